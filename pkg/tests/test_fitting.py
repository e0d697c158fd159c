import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from persalign.data import Design, PreferenceLog, PreferenceRecord
from persalign.errors import EmptyDataset, InvalidConfig
from persalign.fitting import (
    FitConfig,
    Objective,
    balance_factors,
    empirical_loss,
    fit,
    fit_heads,
    gauge_fix,
    gradient_factors,
    init_gradient_svd,
    loss_gradients,
    revive_dead_rows,
)
from persalign.instance import InstanceConfig, generate_instance
from persalign.offline import log_offline_dataset, offline_rng
from persalign.scores import RewardModel

from oracles import brute_objective, grid_oracle, one_d_problem, random_log

RIDGE = 1e-3


class TestObjective:
    def test_matches_brute_force(self, small_inst):
        rng = np.random.default_rng(0)
        log = random_log(small_inst, 40, 3, rng)
        model = RewardModel(rng.normal(size=small_inst.w_true.shape), rng.normal(size=small_inst.heads_true.shape))
        assert empirical_loss(model, log, small_inst, RIDGE) == pytest.approx(
            brute_objective(model, log, small_inst, RIDGE), rel=1e-12)

    def test_records_and_log_agree(self, small_inst):
        rng = np.random.default_rng(1)
        log = random_log(small_inst, 20, 2, rng)
        model = RewardModel.from_instance(small_inst)
        assert empirical_loss(model, log.records(), small_inst, RIDGE) == empirical_loss(model, log, small_inst, RIDGE)

    def test_empty(self, small_inst):
        with pytest.raises(EmptyDataset):
            empirical_loss(RewardModel.from_instance(small_inst), PreferenceLog(2), small_inst, RIDGE)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        d, j, u = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        inst = generate_instance(InstanceConfig(dim_d=d, dim_j=j, num_users=u, n_ctx=3, n_act=4,
                                                raw_gap_target=1e-6), seed)
        k = int(rng.integers(2, 4))
        log = random_log(inst, int(rng.integers(1, 51)), k, rng)
        model = RewardModel(rng.normal(size=(j, d, d)), rng.normal(size=(j, u)))
        _, gw, gl = loss_gradients(model, log, inst, RIDGE)
        h = 1e-5
        theta = np.concatenate([model.w_hat.ravel(), model.heads_hat.ravel()])
        num = np.empty_like(theta)
        for p in range(len(theta)):
            vals = []
            for s in (1, -1):
                th = theta.copy()
                th[p] += s * h
                m = RewardModel(th[: j * d * d].reshape(j, d, d), th[j * d * d:].reshape(j, u))
                vals.append(brute_objective(m, log, inst, RIDGE))
            num[p] = (vals[0] - vals[1]) / (2 * h)
        ana = np.concatenate([gw.ravel(), gl.ravel()])
        assert np.linalg.norm(ana - num) <= 1e-6 * max(np.linalg.norm(num), 1e-8)


class TestOneDimensional:
    def test_objective_matches_grid(self):
        gap, t = 0.8, 500
        inst, log, n0 = one_d_problem(gap, t, 0)
        model, rep = fit(log, inst)
        _, best = grid_oracle(n0, t, RIDGE)
        assert rep.final_objective == pytest.approx(best, abs=1e-6)
        assert rep.final_objective >= best - 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_gap_within_three_se(self, seed):
        gap, t = 0.8, 500
        inst, log, _ = one_d_problem(gap, t, seed)
        model, _ = fit(log, inst)
        theta = float(model.user_matrices()[0, 0, 0])
        p = 1 / (1 + math.exp(-gap))
        se = 1 / math.sqrt(t * p * (1 - p))
        assert abs(theta - gap) <= 3 * se


@pytest.fixture(scope="module")
def problem():
    inst = generate_instance(InstanceConfig(dim_d=2, dim_j=2, num_users=4, n_ctx=5, n_act=6), 3)
    log = log_offline_dataset(inst, 3000, 2, offline_rng(0))
    return inst, log


class TestFit:
    def test_history_monotone(self, problem):
        inst, log = problem
        _, rep = fit(log, inst)
        assert np.all(np.diff(rep.history) <= 1e-15)
        assert rep.head_updates <= 25 and rep.rep_updates <= 40

    @pytest.mark.parametrize("rule", ["newton", "backtracking_armijo"])
    def test_rules_descend(self, problem, rule):
        inst, log = problem
        _, rep = fit(log, inst, FitConfig(rep_step_rule=rule))
        assert rep.history[-1] < rep.history[0]
        assert np.all(np.diff(rep.history) <= 1e-15)

    def test_warm_start_is_cheap(self, problem):
        inst, log = problem
        model, rep = fit(log, inst)
        _, rep2 = fit(log, inst, warm_start=model)
        assert rep.converged and rep2.converged
        assert rep2.iterations_used <= 4
        assert rep2.final_objective <= rep.final_objective + 1e-12

    def test_prefix(self, problem):
        inst, log = problem
        sub = PreferenceLog.from_records(log.records()[:500])
        _, a = fit(log, inst, n=500)
        _, b = fit(sub, inst)
        assert a.final_objective == b.final_objective

    def test_invalid_rule(self, problem):
        inst, log = problem
        with pytest.raises(InvalidConfig):
            fit(log, inst, FitConfig(rep_step_rule="adam"))

    def test_warm_start_from_zero_model_escapes(self, problem):
        inst, log = problem
        zero = RewardModel.zeros(inst.dim_j, inst.dim_d, inst.num_users)
        _, cold = fit(log, inst)
        model, rep = fit(log, inst, warm_start=zero)
        assert np.any(model.heads_hat)
        assert rep.final_objective <= cold.final_objective + 1e-6

    def test_warm_start_with_dead_row_recovers_rank(self, problem):
        inst, log = problem
        model, rep = fit(log, inst)
        w, h = model.w_hat.copy(), model.heads_hat.copy()
        w[1] = 0.0
        h[1] = 0.0
        _, rep2 = fit(log, inst, warm_start=RewardModel(w, h))
        assert rep2.final_objective <= rep.final_objective + 1e-6

    def test_revive_leaves_live_model_alone(self, problem):
        inst, log = problem
        model, _ = fit(log, inst)
        obj = Objective.from_design(Design.from_log(inst, log), RIDGE)
        assert revive_dead_rows(obj, model) is model

    def test_repeated_action_first_record_does_not_stall(self, problem):
        inst, log = problem
        recs = log.records()
        first = recs[0]
        same = PreferenceRecord(first.user, first.context, (first.slate[0], first.slate[0]), 0)
        stalled = PreferenceLog.from_records([same])
        model, _ = fit(stalled, inst)
        assert not np.any(model.heads_hat)
        grown = PreferenceLog.from_records([same] + recs[:2000])
        refit, rep = fit(grown, inst, warm_start=model)
        _, cold = fit(grown, inst)
        assert np.any(refit.heads_hat)
        assert rep.final_objective <= cold.final_objective + 1e-6

    def test_init_beats_zero(self, problem):
        inst, log = problem
        zero = RewardModel.zeros(inst.dim_j, inst.dim_d, inst.num_users)
        init = init_gradient_svd(log, inst, inst.dim_j, RIDGE)
        assert empirical_loss(init, log, inst, RIDGE) < empirical_loss(zero, log, inst, RIDGE)


class TestHeadNewton:
    @pytest.mark.parametrize("seed", range(5))
    def test_converges_with_true_representation(self, seed):
        inst = generate_instance(InstanceConfig(dim_d=2, dim_j=2, num_users=5, n_ctx=4, n_act=5), seed)
        log = log_offline_dataset(inst, 200, 2, offline_rng(seed))
        cfg = FitConfig(tolerance=1e-15)
        heads, rep = fit_heads(log, inst, inst.w_true, cfg)
        assert rep.grad_norm < 1e-8
        assert rep.iterations_used <= 25


class TestFactorizations:
    def test_gradient_factors_truncate(self):
        g = np.random.default_rng(0).normal(size=(5, 9))
        heads, rep = gradient_factors(g, 2)
        u, s, vt = np.linalg.svd(g)
        np.testing.assert_allclose(heads.T @ rep, (u[:, :2] * s[:2]) @ vt[:2], atol=1e-12)
        np.testing.assert_allclose(rep @ rep.T, np.eye(2), atol=1e-12)

    def test_gradient_factors_pad(self):
        g = np.random.default_rng(0).normal(size=(2, 4))
        heads, rep = gradient_factors(g, 6)
        assert heads.shape == (6, 2) and rep.shape == (6, 4)
        np.testing.assert_allclose(heads.T @ rep, g, atol=1e-12)

    def test_gauge_fix(self):
        rng = np.random.default_rng(1)
        model = RewardModel(rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 4)))
        fixed, deficient = gauge_fix(model)
        assert not deficient
        wm = fixed.w_hat.reshape(3, 4)
        np.testing.assert_allclose(wm @ wm.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(fixed.user_matrices(), model.user_matrices(), atol=1e-12)

    def test_gauge_fix_flags_rank_deficiency(self):
        w = np.zeros((2, 2, 2))
        w[0] = np.eye(2)
        w[1] = 2 * np.eye(2)
        _, deficient = gauge_fix(RewardModel(w, np.ones((2, 3))))
        assert deficient

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_balance_keeps_users_and_lowers_penalty(self, seed):
        rng = np.random.default_rng(seed)
        wm = rng.normal(size=(3, 4)) * rng.uniform(0.1, 10)
        heads = rng.normal(size=(3, 5)) * rng.uniform(0.1, 10)
        bw, bh = balance_factors(wm, heads)
        np.testing.assert_allclose(bh.T @ bw, heads.T @ wm, rtol=1e-8, atol=1e-10)
        assert np.sum(bw**2) + np.sum(bh**2) <= np.sum(wm**2) + np.sum(heads**2) * (1 + 1e-12)
        np.testing.assert_allclose(bw @ bw.T, bh @ bh.T, rtol=1e-6, atol=1e-9)
