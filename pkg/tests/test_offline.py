import dataclasses

import numpy as np
import pytest
from scipy import stats

from persalign.config import load_config
from persalign.errors import InsufficientPositivePoints, InvalidConfig
from persalign.fitting import FitConfig
from persalign.instance import InstanceConfig, generate_instance, reward_table
from persalign.offline import (
    OfflineConfig,
    SweepResult,
    fit_decay_rate,
    log_offline_dataset,
    offline_rng,
    pooled_decay_rate,
    run_sweep,
    zero_regret_burn_in,
)
from persalign.regret import expected_regret
from persalign.scores import RewardModel, mnl_probs


def result(values, ns=None):
    values = np.asarray(values, dtype=float)
    ns = np.arange(len(values)) * 10 if ns is None else np.asarray(ns)
    return SweepResult(0, ns, values)


class TestLogging:
    def test_single_record(self, small_inst):
        log = log_offline_dataset(small_inst, 1, 2, offline_rng(0))
        rec = log.record(0)
        assert 0 <= rec.user < 3 and 0 <= rec.context < 3
        assert all(0 <= a < 4 for a in rec.slate) and rec.chosen in (0, 1)

    def test_user_frequencies(self):
        inst = generate_instance(InstanceConfig(num_users=4, n_ctx=3, n_act=4, user_dist=(0.1, 0.2, 0.3, 0.4)), 0)
        log = log_offline_dataset(inst, 100_000, 2, offline_rng(1))
        counts = np.bincount(log.users, minlength=4)
        assert stats.chisquare(counts, 100_000 * inst.user_dist).pvalue > 0.01

    def test_label_frequencies(self, small_inst):
        log = log_offline_dataset(small_inst, 200_000, 2, offline_rng(2))
        mask = (log.users == 0) & (log.contexts == 1) & (log.slates[:, 0] == 0) & (log.slates[:, 1] == 2)
        n = int(mask.sum())
        p = mnl_probs(reward_table(small_inst)[0, 1, [0, 2]])[0]
        hits = int((log.chosen[mask] == 0).sum())
        assert abs(hits - n * p) <= 3 * np.sqrt(n * p * (1 - p))

    def test_prefix_stable_across_calls(self, small_inst):
        a = log_offline_dataset(small_inst, 100, 2, offline_rng(3))
        b = log_offline_dataset(small_inst, 100, 2, offline_rng(3))
        assert a.records() == b.records()


class TestSweep:
    def test_zero_checkpoint_and_oracle(self, small_inst):
        res = run_sweep(small_inst, FitConfig(), OfflineConfig(n_total=300, n_checkpoints=4, seeds=(0,)))
        np.testing.assert_array_equal(res.n, [0, 100, 200, 300])
        zero = RewardModel.zeros(small_inst.dim_j, small_inst.dim_d, small_inst.num_users)
        assert res.mean_regret[0] == expected_regret(small_inst, zero)
        assert expected_regret(small_inst, RewardModel.from_instance(small_inst)) == 0.0

    def test_warm_and_cold_close(self, small_inst):
        warm = run_sweep(small_inst, FitConfig(), OfflineConfig(n_total=600, n_checkpoints=4))
        cold = run_sweep(small_inst, FitConfig(), OfflineConfig(n_total=600, n_checkpoints=4, warm_start=False))
        np.testing.assert_allclose(warm.mean_regret, cold.mean_regret, atol=1e-6)

    def test_checkpoints_validated(self):
        with pytest.raises(InvalidConfig):
            OfflineConfig(n_checkpoints=1).validate()
        with pytest.raises(InvalidConfig):
            OfflineConfig(n_total=3, n_checkpoints=10).validate()

    def test_csv_rows(self):
        rows = list(result([2.0, 0.0]).rows())
        assert rows == [(0, 0, 2.0, False), (0, 10, 0.0, True)]


class TestDecay:
    def test_exact_exponential(self):
        ns = np.linspace(0, 1000, 11)
        slope, r2 = fit_decay_rate(result(3.0 * np.exp(-0.004 * ns), ns))
        assert slope == pytest.approx(-0.004, abs=1e-9) and r2 == pytest.approx(1.0, abs=1e-9)

    def test_constant(self):
        slope, _ = fit_decay_rate(result([0.5] * 6))
        assert slope == 0.0

    def test_zeros_excluded(self):
        ns = np.arange(8) * 100.0
        vals = np.exp(-0.01 * ns)
        vals[[2, 7]] = 0
        slope, _ = fit_decay_rate(result(vals, ns))
        assert slope == pytest.approx(-0.01, abs=1e-12)

    def test_insufficient(self):
        with pytest.raises(InsufficientPositivePoints):
            fit_decay_rate(result([1.0, 0.5, 0.0, 0.0, 0.0, 0.0]))

    def test_pooled_common_slope(self):
        ns = np.linspace(0, 500, 6)
        runs = [result(a * np.exp(-0.01 * ns), ns) for a in (1.0, 5.0, 0.2)]
        slope, r2 = pooled_decay_rate(runs)
        assert slope == pytest.approx(-0.01, abs=1e-12) and r2 == pytest.approx(1.0, abs=1e-12)


class TestBurnIn:
    @pytest.mark.parametrize("series,expected", [
        ((3, 1, 0, 0, 0), 20), ((3, 1, 0, 1, 0), 40), ((3, 1, 1, 1, 1), None), ((0, 0, 0, 0, 0), 0),
    ])
    def test_suffix_rule(self, series, expected):
        assert zero_regret_burn_in(result(series)) == expected


@pytest.mark.slow
class TestDegenerateSweep:
    def test_final_regret_stays_above_quarter_of_zero_model(self):
        cfg = load_config("desk_offline", env={})
        cfg = dataclasses.replace(cfg, head_rank=2)
        inst = cfg.build_instance()
        ratios = [r.mean_regret[-1] / r.mean_regret[0]
                  for r in (run_sweep(inst, cfg.fit, cfg.offline, seed=s) for s in cfg.offline.seeds)]
        assert sum(q > 0.25 for q in ratios) >= 4, ratios
