"""Temperature-zero selectors and regret.

A selector picks the lowest-index argmax of a score over the user's bank.
Regret is measured in true reward: the gap between the truth-optimal action
and the selected one.  Everything is an exact finite average over banks.

Candidates may be a :class:`RewardModel` or a precomputed score table of
shape (U, n_ctx, n_act).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBank
from .instance import ProblemInstance, reward_table
from .io import write_csv
from .scores import RewardModel, centered_score, score_table

TRACE_COLUMNS = ["round", "user", "context", "one_step_regret", "cumulative", "refit_occurred"]


def _table(cand, inst: ProblemInstance) -> np.ndarray:
    if isinstance(cand, RewardModel):
        return score_table(cand, inst)
    table = np.asarray(cand, dtype=float)
    if table.shape != (inst.num_users, inst.n_ctx, inst.n_act):
        raise ValueError(f"score table shape {table.shape} does not match the instance")
    return table


def top_action(model: RewardModel, user: int, context, bank) -> int:
    bank = np.asarray(bank, dtype=float)
    if bank.ndim != 2 or len(bank) == 0:
        raise EmptyBank("cannot select from an empty bank")
    return int(np.argmax(centered_score(model, user, context, bank)))


def selector_table(table: np.ndarray) -> np.ndarray:
    """Lowest-index argmax for every (user, context)."""
    return np.argmax(table, axis=-1)


def regret_table(truth_table: np.ndarray, cand_table: np.ndarray) -> np.ndarray:
    """Per-(user, context) regret of the candidate selector, shape (U, n_ctx)."""
    chosen = selector_table(cand_table)
    got = np.take_along_axis(truth_table, chosen[..., None], axis=-1)[..., 0]
    return np.maximum(truth_table.max(axis=-1) - got, 0.0)


def pair_weights(inst: ProblemInstance, weighting: str = "rho") -> np.ndarray:
    """(d0 x rho) mass of each (user, context); ``uniform`` ignores rho."""
    if weighting == "rho":
        rho = inst.user_dist
    elif weighting == "uniform":
        rho = np.full(inst.num_users, 1.0 / inst.num_users)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return np.repeat(rho[:, None] / inst.n_ctx, inst.n_ctx, axis=1)


def one_step_regret(truth: ProblemInstance, model, user: int, context: int) -> float:
    truth_row = reward_table(truth)[user, context]
    cand_row = _table(model, truth)[user, context]
    return float(max(truth_row.max() - truth_row[np.argmax(cand_row)], 0.0))


def expected_regret(truth: ProblemInstance, model, weighting: str = "rho") -> float:
    reg = regret_table(reward_table(truth), _table(model, truth))
    return float(np.sum(pair_weights(truth, weighting) * reg))


def disagreement_mass(truth: ProblemInstance, model, weighting: str = "rho") -> float:
    truth_sel = selector_table(reward_table(truth))
    cand_sel = selector_table(_table(model, truth))
    return float(np.sum(pair_weights(truth, weighting) * (truth_sel != cand_sel)))


def gap_envelope(truth: ProblemInstance) -> tuple[float, float]:
    """(min top-two gap, max reward range) over all (user, context) pairs."""
    table = reward_table(truth)
    top = np.partition(table, -2, axis=-1)
    gap = top[..., -1] - top[..., -2]
    spread = table.max(axis=-1) - table.min(axis=-1)
    return float(gap.min()), float(spread.max())


def misrec_score_error_check(truth: ProblemInstance, model) -> bool:
    """Every misrecommended pair carries a centered sup-score error of at least min_gap / 2."""
    t = reward_table(truth)
    c = _table(model, truth)
    delta_min, _ = gap_envelope(truth)
    wrong = selector_table(t) != selector_table(c)
    if not wrong.any():
        return True
    tc = t - t.mean(axis=-1, keepdims=True)
    cc = c - c.mean(axis=-1, keepdims=True)
    err = np.abs(cc - tc).max(axis=-1)
    return bool(np.all(err[wrong] >= delta_min / 2))


def compensated_cumsum(values) -> np.ndarray:
    """Running sums with Neumaier compensation; each entry is within an ulp or so of math.fsum.

    Non-negative inputs give a non-decreasing result.
    """
    out = np.empty(len(values))
    total = comp = 0.0
    for k, v in enumerate(np.asarray(values, dtype=float).tolist()):
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
        out[k] = total + comp
    if np.all(np.asarray(values) >= 0):
        out = np.maximum.accumulate(out)
    return out


@dataclass
class RegretTrace:
    """Per-round online regret; ``cumulative`` is the running prefix sum."""

    rounds: np.ndarray
    users: np.ndarray
    contexts: np.ndarray
    one_step_regret: np.ndarray
    cumulative: np.ndarray
    refit_occurred: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rounds)

    @classmethod
    def from_arrays(cls, users, contexts, regret, refit) -> "RegretTrace":
        regret = np.asarray(regret, dtype=float)
        return cls(
            rounds=np.arange(1, len(regret) + 1),
            users=np.asarray(users, dtype=np.int64),
            contexts=np.asarray(contexts, dtype=np.int64),
            one_step_regret=regret,
            cumulative=compensated_cumsum(regret),
            refit_occurred=np.asarray(refit, dtype=bool),
        )

    def truncated(self, n: int) -> "RegretTrace":
        return RegretTrace(
            self.rounds[:n], self.users[:n], self.contexts[:n], self.one_step_regret[:n],
            self.cumulative[:n], self.refit_occurred[:n], dict(self.meta),
        )

    def rows(self):
        for k in range(len(self.rounds)):
            yield (
                int(self.rounds[k]), int(self.users[k]), int(self.contexts[k]),
                float(self.one_step_regret[k]), float(self.cumulative[k]), bool(self.refit_occurred[k]),
            )

    def to_csv(self, path) -> None:
        write_csv(path, TRACE_COLUMNS, self.rows())
