"""Greedy personalized alignment loop.

Each round: a user arrives (user ~ rho, context uniform over that user's
bank), the deployed model's KL-tilted policy proposes a slate, the user
chooses by the true MNL law, and the record joins the never-truncated log.
When the refit schedule fires the model is refit on the whole log and is
deployed from the next round on.  Regret is charged to the model that was
deployed when the arrival happened.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import Design
from .errors import InvalidConfig, NumericalFailure
from .fitting import FitConfig, fit
from .instance import ProblemInstance, reward_table
from .policy import (
    ARRIVAL_STREAM,
    LABEL_STREAM,
    SLATE_STREAM,
    TiltedPolicy,
    normalize_mode,
    round_rng,
)
from .regret import RegretTrace, pair_weights, regret_table
from .scores import RewardModel, mnl_probs, score_table

log = logging.getLogger(__name__)

LEARNERS = ("erm", "oracle", "zero")
FIT_COLUMNS = ["round", "iterations_used", "final_objective", "grad_norm", "converged"]


@dataclass(frozen=True)
class OnlineConfig:
    horizon: int = 50_000
    eta: float = 1.0
    slate_mode: str = "paper_bt"
    slate_k: int = 2
    refit_divisor: int = 5000
    warm_start: bool = True
    run_seed: int = 0
    eval_cadence: int = 1
    learner: str = "erm"

    def validate(self) -> None:
        if self.horizon < 1:
            raise InvalidConfig("horizon", "must be >= 1")
        if not self.eta > 0:
            raise InvalidConfig("eta", "must be > 0")
        if self.refit_divisor < 1:
            raise InvalidConfig("refit_divisor", "must be >= 1")
        if self.eval_cadence < 0:
            raise InvalidConfig("eval_cadence", "must be >= 0 (0 disables)")
        if self.learner not in LEARNERS:
            raise InvalidConfig("learner", f"must be one of {LEARNERS}")
        mode = normalize_mode(self.slate_mode)
        if mode == "paper_bt" and self.slate_k != 2:
            raise InvalidConfig("slate_k", "paper_bt slates have exactly two actions")
        if self.slate_k < 2:
            raise InvalidConfig("slate_k", "must be >= 2")


@dataclass
class OnlineRunSummary:
    G_at_checkpoints: dict[int, float]
    last_positive_round: int
    substantial_fraction: float
    refit_count: int
    horizon: int = 0
    expected_cumulative: float | None = None
    min_positive_fitted_regret: float | None = None

    def as_dict(self) -> dict:
        return {
            "schema_version": 1,
            "G_at_checkpoints": {str(k): v for k, v in self.G_at_checkpoints.items()},
            "last_positive_round": self.last_positive_round,
            "substantial_fraction": self.substantial_fraction,
            "refit_count": self.refit_count,
            "horizon": self.horizon,
            "expected_cumulative": self.expected_cumulative,
            "min_positive_fitted_regret": self.min_positive_fitted_regret,
        }


@dataclass
class FitRow:
    round: int
    iterations_used: int
    final_objective: float
    grad_norm: float
    converged: bool

    def as_row(self):
        return (self.round, self.iterations_used, self.final_objective, self.grad_norm, self.converged)


_SCHEDULES: dict[int, list[int]] = {}


def _extend_schedule(divisor: int, upto: int) -> list[int]:
    seq = _SCHEDULES.setdefault(divisor, [1])
    while seq[-1] < upto:
        r = seq[-1]
        seq.append(r + -(-r // divisor))
    return seq


def refit_rounds(horizon: int, divisor: int) -> np.ndarray:
    """Rounds at which the model is refit: every round up to ``divisor``,
    then with gap ceil(round / divisor)."""
    if divisor < 1:
        raise InvalidConfig("refit_divisor", "must be >= 1")
    seq = np.asarray(_extend_schedule(divisor, horizon))
    return seq[seq <= horizon]


def refit_schedule(round_index: int, divisor: int) -> bool:
    if round_index < 1:
        raise ValueError("rounds start at 1")
    seq = _extend_schedule(divisor, round_index)
    pos = np.searchsorted(seq, round_index)
    return pos < len(seq) and seq[pos] == round_index


def summarize(trace: RegretTrace, checkpoints=None, refit_count: int | None = None) -> OnlineRunSummary:
    T = len(trace)
    if T == 0:
        raise ValueError("empty trace")
    if checkpoints is None:
        checkpoints = sorted({max(1, T // 2), T})
    pos = np.flatnonzero(trace.one_step_regret > 0)
    return OnlineRunSummary(
        G_at_checkpoints={int(c): float(trace.cumulative[c - 1]) for c in checkpoints if 1 <= c <= T},
        last_positive_round=int(trace.rounds[pos[-1]]) if len(pos) else 0,
        substantial_fraction=len(pos) / T,
        refit_count=int(trace.refit_occurred.sum()) if refit_count is None else refit_count,
        horizon=T,
    )


def tail_share(trace: RegretTrace) -> float:
    """Share of G_T accrued in rounds (T/2, T]; 0 when G_T = 0."""
    T = len(trace)
    total = float(trace.cumulative[-1])
    if total <= 0:
        return 0.0
    return (total - float(trace.cumulative[T // 2 - 1])) / total if T >= 2 else 0.0


def log_time_fit(trace: RegretTrace, start_frac: float = 0.1) -> tuple[float, float]:
    """Least-squares fit of G_t on ln t over t in [start_frac T, T]: (slope, R^2)."""
    T = len(trace)
    lo = max(1, int(math.ceil(start_frac * T)))
    t = np.arange(lo, T + 1)
    x = np.log(t)
    y = trace.cumulative[lo - 1 :]
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    slope = float(xc @ yc) / sxx
    if syy == 0:
        return slope, 0.0
    r2 = 1.0 - float(np.sum((yc - slope * xc) ** 2)) / syy
    return slope, r2


class _Deployed:
    def __init__(self, inst, truth_tab, model, eta, weights):
        self.model = model
        cand = score_table(model, inst)
        self.regret = regret_table(truth_tab, cand)
        self.policy = TiltedPolicy(cand, eta)
        self.expected = float(np.sum(weights * self.regret))


def run_online(inst: ProblemInstance, fit_cfg: FitConfig, cfg: OnlineConfig):
    """Run the loop; returns ``(trace, summary, fit_rows)``.

    A failing fit raises :class:`NumericalFailure` carrying the partial trace
    as ``exc.trace``.
    """
    cfg.validate()
    fit_cfg.validate()
    mode = normalize_mode(cfg.slate_mode)
    T, U, n_ctx, n_act = cfg.horizon, inst.num_users, inst.n_ctx, inst.n_act
    K = cfg.slate_k
    truth_tab = reward_table(inst)
    weights = pair_weights(inst)
    rho_cdf = np.cumsum(inst.user_dist)
    rho_cdf[-1] = 1.0

    if cfg.learner == "oracle":
        model = RewardModel.from_instance(inst)
    else:
        model = RewardModel.zeros(inst.dim_j, inst.dim_d, U)
    deployed = _Deployed(inst, truth_tab, model, cfg.eta, weights)
    refits = set(refit_rounds(T, cfg.refit_divisor).tolist()) if cfg.learner == "erm" else set()

    design = Design(inst, K)
    users = np.empty(T, dtype=np.int64)
    ctxs = np.empty(T, dtype=np.int64)
    slates = np.empty((T, K), dtype=np.int64)
    chosen = np.empty(T, dtype=np.int64)
    regret = np.empty(T)
    refit_flag = np.zeros(T, dtype=bool)
    fit_rows: list[FitRow] = []
    fitted = False
    appended = 0
    expected_sum = 0.0
    min_positive = math.inf

    for r in range(1, T + 1):
        k = r - 1
        arr = round_rng(cfg.run_seed, r, ARRIVAL_STREAM)
        u = int(np.searchsorted(rho_cdf, arr.random(), side="right"))
        c = int(arr.integers(n_ctx))
        users[k], ctxs[k] = u, c
        regret[k] = deployed.regret[u, c]
        if cfg.eval_cadence and k % cfg.eval_cadence == 0:
            expected_sum += cfg.eval_cadence * deployed.expected

        srng = round_rng(cfg.run_seed, r, SLATE_STREAM)
        if mode == "paper_bt":
            slates[k, 0] = deployed.policy.draw(u, c, srng)
            slates[k, 1] = srng.integers(n_act)
        else:
            slates[k] = deployed.policy.draw(u, c, srng, size=K)

        p = mnl_probs(truth_tab[u, c, slates[k]])
        lrng = round_rng(cfg.run_seed, r, LABEL_STREAM)
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        chosen[k] = np.searchsorted(cdf, lrng.random(), side="right")

        if r in refits:
            design.append(users[appended:r], ctxs[appended:r], slates[appended:r], chosen[appended:r])
            appended = r
            warm = model if (fitted and cfg.warm_start) else None
            try:
                model, rep = fit(design, inst, fit_cfg, warm_start=warm)
            except NumericalFailure as exc:
                exc.trace = RegretTrace.from_arrays(users[:r], ctxs[:r], regret[:r], refit_flag[:r])
                raise
            fitted = True
            refit_flag[k] = True
            fit_rows.append(FitRow(r, rep.iterations_used, rep.final_objective, rep.grad_norm, rep.converged))
            deployed = _Deployed(inst, truth_tab, model, cfg.eta, weights)
            if 0 < deployed.expected < min_positive:
                min_positive = deployed.expected
            if len(fit_rows) % 500 == 0:
                log.info("round %d: %d refits, G=%.4f", r, len(fit_rows), regret[:r].sum())

    trace = RegretTrace.from_arrays(users, ctxs, regret, refit_flag)
    trace.meta["final_model"] = model
    check = math.fsum(regret)
    if abs(check - trace.cumulative[-1]) > 1e-9:
        raise NumericalFailure(f"cumulative regret drifted from its exact sum ({check} vs {trace.cumulative[-1]})")
    summary = summarize(trace, refit_count=len(fit_rows))
    if cfg.eval_cadence:
        summary.expected_cumulative = expected_sum
    if math.isfinite(min_positive):
        summary.min_positive_fitted_regret = min_positive
    return trace, summary, fit_rows
