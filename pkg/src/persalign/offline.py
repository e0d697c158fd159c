"""Reference-logged datasets and prefix-ERM sweeps.

One record stream is drawn per seed and fits at every checkpoint use its
first ``n`` records, so checkpoints see nested prefixes of the same data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Design, PreferenceLog
from .errors import InsufficientPositivePoints, InvalidConfig, NumericalFailure
from .fitting import FitConfig, fit
from .instance import ProblemInstance, reward_table
from .policy import OFFLINE_STREAM
from .regret import expected_regret
from .scores import RewardModel, mnl_probs

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["seed", "n", "mean_regret", "zero_flag"]


@dataclass(frozen=True)
class OfflineConfig:
    n_total: int = 100_000
    n_checkpoints: int = 100
    slate_k: int = 2
    seeds: tuple[int, ...] = (0,)
    warm_start: bool = True
    weighting: str = "rho"

    def validate(self) -> None:
        if self.n_total < 1:
            raise InvalidConfig("n_total", "must be >= 1")
        if self.n_checkpoints < 2:
            raise InvalidConfig("n_checkpoints", "must be >= 2")
        if self.n_checkpoints > self.n_total + 1:
            raise InvalidConfig("n_checkpoints", "more checkpoints than distinct prefix sizes")
        if self.slate_k < 2:
            raise InvalidConfig("slate_k", "must be >= 2")
        if not self.seeds:
            raise InvalidConfig("seeds", "need at least one seed")
        if self.weighting not in ("rho", "uniform"):
            raise InvalidConfig("weighting", "must be 'rho' or 'uniform'")

    def checkpoints(self) -> np.ndarray:
        """Evenly spaced prefix sizes from 0 to n_total inclusive."""
        cps = np.round(np.linspace(0, self.n_total, self.n_checkpoints)).astype(np.int64)
        if np.any(np.diff(cps) <= 0):
            raise InvalidConfig("n_checkpoints", "checkpoints are not strictly increasing")
        return cps


def offline_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, OFFLINE_STREAM]))


def log_offline_dataset(inst: ProblemInstance, n: int, slate_k: int, rng: np.random.Generator) -> PreferenceLog:
    """``n`` i.i.d. records: user ~ rho, context and every slate slot uniform, label from the true MNL law."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cdf = np.cumsum(inst.user_dist)
    cdf[-1] = 1.0
    users = np.searchsorted(cdf, rng.random(n), side="right")
    contexts = rng.integers(inst.n_ctx, size=n)
    slates = rng.integers(inst.n_act, size=(n, slate_k))
    scores = reward_table(inst)[users[:, None], contexts[:, None], slates]
    pcdf = np.cumsum(mnl_probs(scores), axis=1)
    pcdf[:, -1] = 1.0
    chosen = (rng.random(n)[:, None] >= pcdf).sum(axis=1)
    out = PreferenceLog(slate_k, capacity=n)
    out.extend(users, contexts, slates, chosen)
    return out


@dataclass
class SweepResult:
    seed: int
    n: np.ndarray
    mean_regret: np.ndarray
    failed: list[int] = field(default_factory=list)

    @property
    def zero_flag(self) -> np.ndarray:
        return self.mean_regret == 0

    def rows(self):
        for n, r, z in zip(self.n, self.mean_regret, self.zero_flag):
            yield (self.seed, int(n), float(r), bool(z))


def run_sweep(inst: ProblemInstance, fit_cfg: FitConfig, cfg: OfflineConfig, seed: int | None = None) -> SweepResult:
    """Fit on each prefix and record the exact full-bank expected regret.

    A failed fit is recorded (regret NaN, checkpoint listed in ``failed``)
    and the sweep continues from the last good model.
    """
    cfg.validate()
    fit_cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    cps = cfg.checkpoints()
    records = log_offline_dataset(inst, cfg.n_total, cfg.slate_k, offline_rng(seed))
    design = Design.from_log(inst, records)
    model = RewardModel.zeros(inst.dim_j, inst.dim_d, inst.num_users)
    regrets = np.empty(len(cps))
    failed = []
    have_fit = False
    for k, n in enumerate(cps):
        if n == 0:
            regrets[k] = expected_regret(inst, RewardModel.zeros(inst.dim_j, inst.dim_d, inst.num_users), cfg.weighting)
            continue
        warm = model if (cfg.warm_start and have_fit) else None
        try:
            model, _ = fit(design, inst, fit_cfg, warm_start=warm, n=int(n))
        except NumericalFailure as exc:
            log.warning("seed %d: fit failed at n=%d: %s", seed, n, exc)
            failed.append(int(n))
            regrets[k] = np.nan
            continue
        have_fit = True
        regrets[k] = expected_regret(inst, model, cfg.weighting)
    return SweepResult(seed, cps, regrets, failed)


def fit_decay_rate(result: SweepResult) -> tuple[float, float]:
    """Least squares of ln(mean_regret) on n over checkpoints with positive regret: (slope, R^2)."""
    keep = np.isfinite(result.mean_regret) & (result.mean_regret > 0)
    if keep.sum() < 5:
        raise InsufficientPositivePoints(f"only {int(keep.sum())} checkpoints with positive regret")
    return _loglinear(np.asarray(result.n, dtype=float)[keep], np.log(result.mean_regret[keep]))


def pooled_decay_rate(results: list[SweepResult]) -> tuple[float, float]:
    """One common slope across seeds, each seed with its own intercept: (slope, R^2)."""
    xs, ys = [], []
    for res in results:
        keep = np.isfinite(res.mean_regret) & (res.mean_regret > 0)
        if keep.sum() < 2:
            continue
        x = np.asarray(res.n, dtype=float)[keep]
        y = np.log(res.mean_regret[keep])
        xs.append(x - x.mean())
        ys.append(y - y.mean())
    if not xs or sum(len(x) for x in xs) < 5:
        raise InsufficientPositivePoints("fewer than 5 positive-regret checkpoints across seeds")
    x, y = np.concatenate(xs), np.concatenate(ys)
    slope = float(x @ y / (x @ x))
    syy = float(y @ y)
    r2 = 1.0 - float(np.sum((y - slope * x) ** 2)) / syy if syy > 0 else 1.0
    return slope, r2


def _loglinear(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xc, yc = x - x.mean(), y - y.mean()
    slope = float(xc @ yc / (xc @ xc))
    syy = float(yc @ yc)
    if syy == 0:
        return slope, 1.0
    return slope, 1.0 - float(np.sum((yc - slope * xc) ** 2)) / syy


def zero_regret_burn_in(result: SweepResult) -> int | None:
    """Smallest checkpoint from which every later checkpoint has exactly zero regret."""
    burn = None
    for n, r in zip(result.n[::-1], result.mean_regret[::-1]):
        if r != 0:
            break
        burn = int(n)
    return burn
