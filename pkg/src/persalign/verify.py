"""Randomized property suites for the choice-model, tilt and regret identities.

Each suite runs a fixed number of seeded trials and reports the number of
violations along with the first counterexample.  ``run_all`` is what the
``verify`` subcommand executes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diversity import drd
from .fitting import loss_gradients
from .instance import InstanceConfig, ProblemInstance, generate_instance, reward_table, scale_heads
from .online import refit_rounds
from .regret import disagreement_mass, expected_regret, gap_envelope, misrec_score_error_check, selector_table
from .scores import RewardModel, choice_kl, mnl_loss, mnl_probs, sigmoid
from .data import PreferenceLog
from .policy import tilt


@dataclass
class SuiteResult:
    name: str
    trials: int
    violations: int = 0
    counterexample: str | None = None
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def flag(self, description: str) -> None:
        self.violations += 1
        if self.counterexample is None:
            self.counterexample = description

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        out = f"[{status}] {self.name}: {self.trials} trials, {self.violations} violations ({self.seconds:.2f}s)"
        if self.counterexample:
            out += f"\n    counterexample: {self.counterexample}"
        return out


def _vec(a) -> str:
    return np.array2string(np.asarray(a), precision=6, separator=", ", max_line_width=200)


def softmax_kl_quadratic(rng: np.random.Generator, trials: int = 1000) -> SuiteResult:
    res = SuiteResult("softmax KL <= half squared distance", trials)
    for _ in range(trials):
        k = int(rng.integers(2, 8))
        scale = rng.choice([0.1, 1.0, 5.0])
        u, v = rng.normal(0, scale, k), rng.normal(0, scale, k)
        kl = choice_kl(u, v)
        bound = 0.5 * float(np.sum((u - v) ** 2))
        if kl > bound * (1 + 1e-12) + 1e-15:
            res.flag(f"u={_vec(u)} v={_vec(v)} kl={kl} bound={bound}")
    return res


def excess_loss_is_kl(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    res = SuiteResult("expected excess log-loss equals choice KL", trials)
    for _ in range(trials):
        k = int(rng.integers(2, 7))
        u, v = rng.normal(0, 2, k), rng.normal(0, 2, k)
        p = mnl_probs(u)
        ys = np.arange(k)
        excess = float(np.sum(p * (mnl_loss(np.tile(v, (k, 1)), ys) - mnl_loss(np.tile(u, (k, 1)), ys))))
        kl = choice_kl(u, v)
        if abs(excess - kl) > 1e-12 * max(1.0, abs(kl)):
            res.flag(f"u={_vec(u)} v={_vec(v)} excess={excess!r} kl={kl!r}")
    return res


def loss_envelope(rng: np.random.Generator, trials: int = 1000) -> SuiteResult:
    res = SuiteResult("log-loss envelope and 2-Lipschitz bound", trials)
    for _ in range(trials):
        k = int(rng.integers(2, 8))
        v = rng.normal(0, 3, k)
        w = v + rng.normal(0, rng.choice([0.01, 1.0]), k)
        y = int(rng.integers(k))
        b = 0.5 * float(v.max() - v.min())
        lv, lw = float(mnl_loss(v, y)), float(mnl_loss(w, y))
        if not -1e-15 <= lv <= math.log(k) + 2 * b + 1e-12:
            res.flag(f"v={_vec(v)} y={y} loss={lv} upper={math.log(k) + 2 * b}")
        elif abs(lv - lw) > 2 * float(np.abs(v - w).max()) + 1e-12:
            res.flag(f"v={_vec(v)} w={_vec(w)} y={y} diff={abs(lv - lw)}")
    return res


def centering_invariance(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    res = SuiteResult("centering leaves choice laws, tilts and argmaxes unchanged", trials)
    for _ in range(trials):
        n = int(rng.integers(2, 12))
        s = rng.normal(0, 3, n)
        c = s - s.mean()
        slate = rng.integers(n, size=int(rng.integers(2, 6)))
        eta = float(rng.uniform(0.1, 3))
        dp = np.abs(mnl_probs(s[slate]) - mnl_probs(c[slate])).max()
        dt = np.abs(tilt(s, eta) - tilt(c, eta)).max()
        if dp > 1e-12 or dt > 1e-12 or np.argmax(s) != np.argmax(c):
            res.flag(f"scores={_vec(s)} slate={slate.tolist()} eta={eta} dprob={dp} dtilt={dt}")
    return res


def tilt_envelope(rng: np.random.Generator, trials: int = 1000) -> SuiteResult:
    res = SuiteResult("tilt likelihood ratio within exp(+-2 eta B)", trials)
    for _ in range(trials):
        n = int(rng.integers(2, 30))
        b = float(rng.uniform(0.1, 3))
        eta = float(rng.uniform(0.1, 3))
        s = rng.uniform(-b, b, n)
        ratio = tilt(s, eta) * n
        lo, hi = math.exp(-2 * eta * b), math.exp(2 * eta * b)
        if ratio.min() < lo * (1 - 1e-12) or ratio.max() > hi * (1 + 1e-12):
            res.flag(f"scores={_vec(s)} eta={eta} B={b} ratio range=({ratio.min()}, {ratio.max()})")
    return res


def choice_kl_variance(rng: np.random.Generator, trials: int = 20, slates: int = 100_000) -> SuiteResult:
    res = SuiteResult("expected slate KL >= variance lower bound (K = 2, 5)", 2 * trials)
    for k in (2, 5):
        for _ in range(trials):
            n = int(rng.integers(3, 25))
            b = float(rng.uniform(0.1, 1.0))
            truth = rng.uniform(-b, b, n)
            cand = rng.uniform(-b, b, n)
            idx = rng.integers(n, size=(slates, k))
            kls = choice_kl(truth[idx], cand[idx])
            mean = float(kls.mean())
            se = float(kls.std(ddof=1) / math.sqrt(slates))
            bound = math.exp(-2 * b) / 2 * (k - 1) / k * float(np.var(cand - truth))
            if mean < bound - 3 * se:
                res.flag(f"K={k} B={b} truth={_vec(truth)} cand={_vec(cand)} mean={mean} bound={bound} se={se}")
    return res


def bt_reduction(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    res = SuiteResult("two-action choice law is the logistic of the score difference", trials)
    for _ in range(trials):
        v = rng.normal(0, 5, 2)
        p = mnl_probs(v)[0]
        q = float(sigmoid(v[0] - v[1]))
        if abs(p - q) > 1e-12:
            res.flag(f"v={_vec(v)} softmax={p} logistic={q}")
    return res


_SMALL = InstanceConfig(dim_d=2, dim_j=2, num_users=3, n_ctx=6, n_act=7, raw_gap_target=0.05)


def _random_model(inst: ProblemInstance, rng: np.random.Generator) -> RewardModel:
    if rng.random() < 0.5:
        w = rng.normal(size=inst.w_true.shape)
        heads = rng.normal(size=inst.heads_true.shape)
    else:  # near-truth
        eps = float(rng.choice([1e-3, 0.05, 0.3]))
        w = inst.w_true + eps * rng.normal(size=inst.w_true.shape)
        heads = inst.heads_true + eps * rng.normal(size=inst.heads_true.shape)
    return RewardModel(w, heads)


def regret_sandwich(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    res = SuiteResult("min-gap x disagreement <= regret <= max-range x disagreement", trials)
    insts = [generate_instance(_SMALL, s) for s in range(5)]
    for k in range(trials):
        inst = insts[k % len(insts)]
        model = _random_model(inst, rng)
        dmin, dmax = gap_envelope(inst)
        g = expected_regret(inst, model)
        m = disagreement_mass(inst, model)
        if not dmin * m * (1 - 1e-12) <= g <= dmax * m * (1 + 1e-12) + 1e-15:
            res.flag(f"instance seed {inst.seed}: regret={g} mass={m} dmin={dmin} dmax={dmax}")
    return res


def misrecommendation(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    res = SuiteResult("misrecommendation implies centered score error >= min gap / 2", trials)
    insts = [generate_instance(_SMALL, s) for s in range(5)]
    for k in range(trials):
        inst = insts[k % len(insts)]
        model = _random_model(inst, rng)
        if not misrec_score_error_check(inst, model):
            res.flag(f"instance seed {inst.seed}: w={_vec(model.w_hat.ravel())} heads={_vec(model.heads_hat.ravel())}")
    return res


def selector_stability(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    res = SuiteResult("sup perturbation below min gap / 2 changes no selection", trials)
    insts = [generate_instance(_SMALL, s) for s in range(5)]
    for k in range(trials):
        inst = insts[k % len(insts)]
        truth = reward_table(inst)
        dmin, _ = gap_envelope(inst)
        noise = rng.uniform(-1, 1, truth.shape)
        noise *= float(rng.uniform(0, 0.999)) * dmin / 2 / np.abs(noise).max()
        if np.any(selector_table(truth + noise) != selector_table(truth)):
            res.flag(f"instance seed {inst.seed}: sup perturbation {np.abs(noise).max()} < {dmin / 2}")
    return res


def gradient_check(rng: np.random.Generator, trials: int = 20) -> SuiteResult:
    res = SuiteResult("analytic loss gradients match central differences", trials)
    h = 1e-5
    for k in range(trials):
        d, j, u = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        inst = generate_instance(InstanceConfig(dim_d=d, dim_j=j, num_users=u, n_ctx=4, n_act=5,
                                                raw_gap_target=1e-6), 100 + k)
        slate_k = int(rng.integers(2, 4))
        t = int(rng.integers(5, 51))
        log = PreferenceLog(slate_k)
        log.extend(rng.integers(u, size=t), rng.integers(4, size=t),
                   rng.integers(5, size=(t, slate_k)), rng.integers(slate_k, size=t))
        model = RewardModel(rng.normal(size=(j, d, d)), rng.normal(size=(j, u)))
        _, gw, gl = loss_gradients(model, log, inst, 1e-3)
        analytic = np.concatenate([gw.ravel(), gl.ravel()])
        theta = np.concatenate([model.w_hat.ravel(), model.heads_hat.ravel()])
        numeric = np.empty_like(theta)
        for p in range(len(theta)):
            vals = []
            for sgn in (1, -1):
                th = theta.copy()
                th[p] += sgn * h
                m = RewardModel(th[: j * d * d].reshape(j, d, d), th[j * d * d:].reshape(j, u))
                vals.append(loss_gradients(m, log, inst, 1e-3)[0])
            numeric[p] = (vals[0] - vals[1]) / (2 * h)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        if err > 1e-6:
            res.flag(f"d={d} J={j} U={u} t={t}: relative error {err:.3g}")
    return res


def drd_scale_law(rng: np.random.Generator, trials: int = 5) -> SuiteResult:
    res = SuiteResult("DRD scales with the squared head scale", trials)
    for k in range(trials):
        inst = generate_instance(_SMALL, 200 + k)
        base = drd(inst).drd
        for c in (2.0, 10.0, 100.0):
            ratio = drd(scale_heads(inst, c)).drd / base
            if abs(ratio - c * c) > 1e-6 * c * c:
                res.flag(f"instance seed {inst.seed}, c={c}: ratio {ratio}")
    return res


def refit_gaps(rng: np.random.Generator, trials: int = 6) -> SuiteResult:
    res = SuiteResult("refit schedule gaps are non-decreasing", trials)
    for divisor in (1, 2, 7, 100, 625, 5000)[:trials]:
        r = refit_rounds(50_000, divisor)
        gaps = np.diff(r)
        if r[0] != 1 or np.any(gaps < 1) or np.any(np.diff(gaps) < 0):
            res.flag(f"divisor {divisor}: rounds {r[:10].tolist()}...")
    return res


SUITES: list[Callable[[np.random.Generator], SuiteResult]] = [
    softmax_kl_quadratic,
    excess_loss_is_kl,
    loss_envelope,
    centering_invariance,
    tilt_envelope,
    choice_kl_variance,
    bt_reduction,
    regret_sandwich,
    misrecommendation,
    selector_stability,
    gradient_check,
    drd_scale_law,
    refit_gaps,
]


def run_all(seed: int = 0, suites=None, echo: Callable[[str], None] | None = None) -> list[SuiteResult]:
    results = []
    for k, suite in enumerate(suites or SUITES):
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        res = suite(rng)
        res.seconds = time.perf_counter() - start
        results.append(res)
        if echo:
            echo(res.line())
    return results
