"""End-to-end acceptance checks.

Each test prints one ``acceptance N: PASS|FAIL`` line (visible under
``pytest -v`` without ``-s``) and then asserts the same condition.  The desk
online and offline runs are shared session fixtures, so the whole module
takes about seven minutes on one core.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from persalign.cli import main
from persalign.config import load_config
from persalign.diversity import drd
from persalign.fitting import FitConfig, fit, loss_gradients
from persalign.instance import InstanceConfig, generate_instance, scale_heads
from persalign.offline import pooled_decay_rate, run_sweep, zero_regret_burn_in
from persalign.online import log_time_fit, run_online, tail_share
from persalign.regret import disagreement_mass, expected_regret
from persalign.scores import RewardModel
from persalign.verify import run_all

from conftest import TINY
from oracles import brute_objective, enumerate_regret, grid_oracle, one_d_problem, random_log

SEEDS = range(5)
RIDGE = FitConfig().ridge


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def at_least(flags, k=4):
    return sum(bool(f) for f in flags) >= k


def run_preset(name, seed):
    cfg = load_config(name, env={})
    cfg = dataclasses.replace(cfg, seed=seed)
    inst = cfg.build_instance()
    online = dataclasses.replace(cfg.online, run_seed=seed)
    trace, _, _ = run_online(inst, cfg.fit, online)
    return trace


@pytest.fixture(scope="module")
def desk_online():
    out = {}
    for kind, preset in (("diverse", "desk_online"), ("degenerate", "desk_degenerate")):
        start = time.perf_counter()
        out[kind] = [run_preset(preset, s) for s in SEEDS]
        out[kind + "_seconds"] = time.perf_counter() - start
    return out


@pytest.mark.slow
class TestAcceptance:
    def test_1_property_suite(self, report):
        start = time.perf_counter()
        results = run_all(seed=0)
        took = time.perf_counter() - start
        bad = [r.line for r in results if not r.passed]
        ok = not bad
        report(1, ok, f"{len(results)} suites, {len(bad)} failing, {took:.1f}s (target < 120s)")
        assert ok, bad

    def test_2_gradients(self, report):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            d, j, u = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
            inst = generate_instance(InstanceConfig(dim_d=d, dim_j=j, num_users=u, n_ctx=3, n_act=4,
                                                    raw_gap_target=1e-6), seed)
            log = random_log(inst, int(rng.integers(1, 51)), int(rng.integers(2, 4)), rng)
            model = RewardModel(rng.normal(size=(j, d, d)), rng.normal(size=(j, u)))
            _, gw, gl = loss_gradients(model, log, inst, RIDGE)
            theta = np.concatenate([model.w_hat.ravel(), model.heads_hat.ravel()])
            num = np.empty_like(theta)
            h = 1e-5
            for p in range(len(theta)):
                vals = []
                for s in (1, -1):
                    th = theta.copy()
                    th[p] += s * h
                    m = RewardModel(th[: j * d * d].reshape(j, d, d), th[j * d * d:].reshape(j, u))
                    vals.append(brute_objective(m, log, inst, RIDGE))
                num[p] = (vals[0] - vals[1]) / (2 * h)
            ana = np.concatenate([gw.ravel(), gl.ravel()])
            worst = max(worst, float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-8)))
        ok = worst <= 1e-6
        report(2, ok, f"worst relative error {worst:.2e} over 20 instances (tol 1e-6)")
        assert ok

    def test_3_one_dimensional_erm(self, report):
        gap, t = 0.8, 500
        p = 1 / (1 + math.exp(-gap))
        se = 1 / math.sqrt(t * p * (1 - p))
        obj_err, z = [], []
        for seed in SEEDS:
            inst, log, n0 = one_d_problem(gap, t, seed)
            model, rep = fit(log, inst)
            _, best = grid_oracle(n0, t, RIDGE)
            obj_err.append(abs(rep.final_objective - best))
            z.append(abs(float(model.user_matrices()[0, 0, 0]) - gap) / se)
        ok = max(obj_err) <= 1e-6 and max(z) <= 3
        report(3, ok, f"max |objective - grid| {max(obj_err):.1e}, max |gap error|/se {max(z):.2f}")
        assert ok

    def test_4_bounded_online_regret(self, report, desk_online):
        traces = desk_online["diverse"]
        shares = [tail_share(tr) for tr in traces]
        ok = at_least(s < 0.05 for s in shares)
        secs = desk_online["diverse_seconds"]
        report(4, ok, "tail shares " + ", ".join(f"{s:.4f}" for s in shares)
               + "; G_T " + ", ".join(f"{tr.cumulative[-1]:.1f}" for tr in traces)
               + f"; {secs:.0f}s (target < 900s)")
        assert ok

    def test_5_diversity_failure(self, report, desk_online):
        div, deg = desk_online["diverse"], desk_online["degenerate"]
        ratios = [b.cumulative[-1] / a.cumulative[-1] for a, b in zip(div, deg)]
        fits = [log_time_fit(tr) for tr in deg]
        grows = [s > 0 and r2 > 0.8 for s, r2 in fits]
        ok = at_least(r >= 3 for r in ratios) and at_least(grows)
        report(5, ok, "G ratios " + ", ".join(f"{r:.2f}" for r in ratios)
               + "; ln-t slope/R2 " + ", ".join(f"{s:.1f}/{r2:.3f}" for s, r2 in fits))
        assert ok

    def test_6_offline_decay(self, report):
        start = time.perf_counter()
        lines, oks = [], []
        for users in (5, 10):
            cfg = load_config("desk_offline", env={})
            cfg = dataclasses.replace(cfg, instance=dataclasses.replace(cfg.instance, num_users=users))
            inst = cfg.build_instance()
            results = [run_sweep(inst, cfg.fit, cfg.offline, seed=s) for s in cfg.offline.seeds]
            slope, r2 = pooled_decay_rate(results)
            final = [r.mean_regret[-1] < 0.01 * r.mean_regret[0] for r in results]
            burn = [zero_regret_burn_in(r) is not None for r in results]
            ok = slope < 0 and r2 > 0.7 and at_least(final) and at_least(burn)
            oks.append(ok)
            lines.append(f"U={users}: slope {slope:.2e} R2 {r2:.3f} final<1% {sum(final)}/5 burn-in {sum(burn)}/5")
        took = time.perf_counter() - start
        ok = all(oks)
        report(6, ok, "; ".join(lines) + f"; {took:.0f}s (target < 600s)")
        assert ok

    def test_7_drd_scale_law(self, report):
        inst = load_config("desk_online", env={}).build_instance()
        base = drd(inst).drd
        rel = max(abs(drd(scale_heads(inst, c)).drd / base - c * c) / (c * c) for c in (2, 10, 100))
        same = dataclasses.replace(inst, heads_true=np.repeat(inst.heads_true[:, :1], inst.num_users, axis=1))
        zero = drd(same).drd
        full = load_config("full_online", env={}).build_instance()
        rep = drd(full)
        exact = rep.drd_scale_free == rep.drd / full.head_scale**2
        ok = rel <= 1e-6 and zero == 0.0 and rep.drd > 0 and exact
        report(7, ok, f"max scale-law error {rel:.1e}; identical heads DRD {zero}; "
                      f"full-scale DRD {rep.drd:.6g}, scale-free {rep.drd_scale_free:.6g}")
        assert ok

    def test_8_exact_evaluation(self, report):
        inst = generate_instance(TINY, 11)
        trace, _, _ = run_online(inst, FitConfig(), dataclasses.replace(
            load_config("desk_online", env={}).online, horizon=3000, learner="oracle"))
        rng = np.random.default_rng(0)
        insts = [generate_instance(TINY, s) for s in range(4)]
        worst = 0.0
        for k in range(200):
            tiny = insts[k % 4]
            model = RewardModel(rng.normal(size=tiny.w_true.shape), rng.normal(size=tiny.heads_true.shape))
            reg, mass = enumerate_regret(tiny, model)
            worst = max(worst, abs(expected_regret(tiny, model) - reg), abs(disagreement_mass(tiny, model) - mass))
        ok = trace.cumulative[-1] == 0.0 and worst <= 1e-12
        report(8, ok, f"oracle G_T {trace.cumulative[-1]}; worst enumeration error {worst:.1e} over 200 models")
        assert ok

    def test_9_replay(self, report, tmp_path):
        runs = [
            ("trace.csv", ["online", "--config", "desk_online", "--horizon", "3000"]),
            ("sweep.csv", ["offline-sweep", "--config", "desk_offline", "--n-total", "2000",
                           "--checkpoints", "10", "--seeds", "0,1"]),
        ]
        same = []
        for k, (name, argv) in enumerate(runs):
            first, again = tmp_path / f"first{k}", tmp_path / f"again{k}"
            assert main(argv + ["--out", str(first)]) == 0
            assert main(["replay", str(first / "manifest.json"), "--out", str(again)]) == 0
            same.append((first / name).read_bytes() == (again / name).read_bytes())
        ok = all(same)
        report(9, ok, f"online trace identical: {same[0]}; offline sweep identical: {same[1]}")
        assert ok
