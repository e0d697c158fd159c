"""Bilinear scores, MNL choice laws, log-loss and choice KL.

The reference policy is uniform over each user's action bank, so centering a
score means subtracting its bank mean.  Centering never changes a choice
probability, a tilt or an argmax; the functions below accept raw or centered
scores interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DimensionMismatch, EmptyBank, NumericalFailure
from .instance import ProblemInstance, user_matrices

__all__ = [
    "RewardModel",
    "raw_score",
    "centered_score",
    "score_table",
    "mnl_probs",
    "mnl_loss",
    "choice_kl",
    "sigmoid",
]

sigmoid = expit


@dataclass(frozen=True, eq=False)
class RewardModel:
    w_hat: np.ndarray  # (J, d, d)
    heads_hat: np.ndarray  # (J, U)

    def __post_init__(self):
        J, d, d2 = self.w_hat.shape
        if d != d2 or self.heads_hat.ndim != 2 or self.heads_hat.shape[0] != J:
            raise DimensionMismatch(
                f"w_hat {self.w_hat.shape} and heads_hat {self.heads_hat.shape} disagree"
            )
        if not (np.all(np.isfinite(self.w_hat)) and np.all(np.isfinite(self.heads_hat))):
            raise NumericalFailure("reward model has non-finite entries")

    @property
    def dim_j(self) -> int:
        return self.w_hat.shape[0]

    @property
    def dim_d(self) -> int:
        return self.w_hat.shape[1]

    @property
    def num_users(self) -> int:
        return self.heads_hat.shape[1]

    @classmethod
    def zeros(cls, dim_j: int, dim_d: int, num_users: int) -> "RewardModel":
        return cls(np.zeros((dim_j, dim_d, dim_d)), np.zeros((dim_j, num_users)))

    @classmethod
    def from_instance(cls, inst: ProblemInstance) -> "RewardModel":
        """The truth itself, packaged as a model (the oracle learner)."""
        return cls(np.array(inst.w_true), np.array(inst.heads_true))

    def user_matrices(self) -> np.ndarray:
        return user_matrices(self.w_hat, self.heads_hat)

    def check_against(self, inst: ProblemInstance) -> None:
        if (self.dim_j, self.dim_d, self.num_users) != (inst.dim_j, inst.dim_d, inst.num_users):
            raise DimensionMismatch(
                f"model (J={self.dim_j}, d={self.dim_d}, U={self.num_users}) does not match "
                f"instance (J={inst.dim_j}, d={inst.dim_d}, U={inst.num_users})"
            )


def raw_score(model: RewardModel, user: int, context, action) -> float:
    x = np.asarray(context, dtype=float)
    a = np.asarray(action, dtype=float)
    d = model.dim_d
    if x.shape != (d,) or a.shape != (d,):
        raise DimensionMismatch(f"expected vectors of length {d}, got {x.shape} and {a.shape}")
    phi = np.einsum("k,jkl,l->j", x, model.w_hat, a)
    return float(model.heads_hat[:, user] @ phi)


def centered_score(model: RewardModel, user: int, context, action_bank) -> np.ndarray:
    bank = np.asarray(action_bank, dtype=float)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise EmptyBank("action bank must be a non-empty (n, d) array")
    x = np.asarray(context, dtype=float)
    if x.shape != (model.dim_d,) or bank.shape[1] != model.dim_d:
        raise DimensionMismatch("context/bank dimension does not match the model")
    m = np.tensordot(model.heads_hat[:, user], model.w_hat, axes=1)
    raw = bank @ (m.T @ x)
    return raw - raw.mean()


def score_table(model: RewardModel, inst: ProblemInstance, centered: bool = False) -> np.ndarray:
    """Model scores for every (user, context, action) of ``inst``; shape (U, n_ctx, n_act)."""
    model.check_against(inst)
    table = np.einsum("uck,ukl,ual->uca", inst.contexts, model.user_matrices(), inst.actions)
    if centered:
        table = table - table.mean(axis=-1, keepdims=True)
    return table


def mnl_probs(scores) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    s = np.asarray(scores, dtype=float)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def mnl_loss(scores, chosen) -> np.ndarray | float:
    """log(sum_k exp v_k) - v_y, vectorized over leading axes."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(chosen)
    K = s.shape[-1]
    if np.any(y < 0) or np.any(y >= K):
        raise IndexError(f"chosen index out of range for slate of size {K}")
    picked = np.take_along_axis(s, y[..., None].astype(np.intp), axis=-1)[..., 0]
    out = logsumexp(s, axis=-1) - picked
    return float(out) if np.ndim(out) == 0 else out


def choice_kl(truth_scores, cand_scores) -> np.ndarray | float:
    """KL(softmax(truth) || softmax(cand)) along the last axis."""
    u = np.asarray(truth_scores, dtype=float)
    v = np.asarray(cand_scores, dtype=float)
    if u.shape != v.shape:
        raise DimensionMismatch(f"score shapes differ: {u.shape} vs {v.shape}")
    log_p = u - logsumexp(u, axis=-1, keepdims=True)
    log_q = v - logsumexp(v, axis=-1, keepdims=True)
    out = np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out
