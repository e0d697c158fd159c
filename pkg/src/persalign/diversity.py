"""User-diversity diagnostics: head second moments and the hard-subset DRD.

The DRD value is tr(Sigma_heads @ H_hard), where Sigma_heads is the centered
covariance of the true heads and H_hard averages dphi dphi^T over the pairs
with the smallest top-two gaps, dphi being the representation difference
between the best and second-best action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBank
from .instance import ProblemInstance, reward_table


@dataclass(frozen=True)
class DiversityReport:
    g_lambda_eigs: tuple[float, ...]
    min_eig: float
    numerical_rank: int
    drd: float
    drd_scale_free: float
    hard_fraction: float
    verdict_full_rank: bool

    def as_dict(self) -> dict:
        return {
            "schema_version": 1,
            "g_lambda_eigs": list(self.g_lambda_eigs),
            "min_eig": self.min_eig,
            "numerical_rank": self.numerical_rank,
            "drd": self.drd,
            "drd_scale_free": self.drd_scale_free,
            "hard_fraction": self.hard_fraction,
            "verdict_full_rank": self.verdict_full_rank,
        }

    def summary(self) -> str:
        eigs = ", ".join(f"{e:.4g}" for e in self.g_lambda_eigs)
        return "\n".join([
            f"head second-moment eigenvalues: [{eigs}]",
            f"min eigenvalue: {self.min_eig:.6g}   numerical rank: {self.numerical_rank}",
            f"DRD (hard fraction {self.hard_fraction:g}): {self.drd:.6g}   scale-free: {self.drd_scale_free:.6g}",
            f"full-rank sufficient condition: {'PASS' if self.verdict_full_rank else 'FAIL'}",
        ])


def head_second_moment(heads: np.ndarray, user_dist) -> np.ndarray:
    """sum_i rho_i lambda_i lambda_i^T."""
    heads = np.asarray(heads, dtype=float)
    rho = np.asarray(user_dist, dtype=float)
    if heads.shape[1] != rho.shape[0]:
        raise ValueError("heads and user_dist disagree on the number of users")
    g = (heads * rho) @ heads.T
    return 0.5 * (g + g.T)


def head_covariance(heads: np.ndarray, unbiased: bool = False) -> np.ndarray:
    heads = np.asarray(heads, dtype=float)
    U = heads.shape[1]
    shifted = heads - heads[:, :1]  # exact zeros when all heads coincide
    centered = shifted - shifted.mean(axis=1, keepdims=True)
    denom = U - 1 if unbiased and U > 1 else U
    cov = centered @ centered.T / denom
    return 0.5 * (cov + cov.T)


def hard_subset(gaps: np.ndarray, hard_fraction: float) -> np.ndarray:
    """Flat pair indices of the ceil(fraction * n) smallest gaps, ties by index."""
    n = gaps.size
    k = max(1, math.ceil(hard_fraction * n - 1e-12))
    order = np.argsort(gaps, kind="stable")
    return order[:k]


def hard_direction_matrix(inst: ProblemInstance, hard_fraction: float = 0.10) -> np.ndarray:
    if not 0 < hard_fraction <= 1:
        raise ValueError("hard_fraction must lie in (0, 1]")
    if inst.n_act < 2:
        raise DegenerateBank("DRD needs at least two actions per bank")
    table = reward_table(inst)
    order = np.argsort(-table, axis=-1, kind="stable")
    best, second = order[..., 0], order[..., 1]
    sorted_vals = np.take_along_axis(table, order[..., :2], axis=-1)
    gaps = sorted_vals[..., 0] - sorted_vals[..., 1]
    idx = hard_subset(gaps.ravel(), hard_fraction)
    users, ctxs = np.unravel_index(idx, gaps.shape)
    x = inst.contexts[users, ctxs]
    da = inst.actions[users, best[users, ctxs]] - inst.actions[users, second[users, ctxs]]
    dphi = np.einsum("nk,jkl,nl->nj", x, inst.w_true, da)
    return dphi.T @ dphi / len(idx)


def drd(inst: ProblemInstance, hard_fraction: float = 0.10, rank_tol: float = 1e-8,
        unbiased_cov: bool = False) -> DiversityReport:
    h = hard_direction_matrix(inst, hard_fraction)
    sigma = head_covariance(inst.heads_true, unbiased_cov)
    value = float(max(np.trace(sigma @ h), 0.0))
    eigs = np.linalg.eigvalsh(head_second_moment(inst.heads_true, inst.user_dist))[::-1]
    top = max(eigs[0], 0.0)
    rank = int(np.sum(eigs > rank_tol * top)) if top > 0 else 0
    return DiversityReport(
        g_lambda_eigs=tuple(float(e) for e in eigs),
        min_eig=float(eigs[-1]),
        numerical_rank=rank,
        drd=value,
        drd_scale_free=value / inst.head_scale**2,
        hard_fraction=hard_fraction,
        verdict_full_rank=bool(eigs[-1] > rank_tol * top) if top > 0 else False,
    )


def diversity_verdict(report: DiversityReport, rank_tol: float = 1e-8) -> bool:
    """Sufficient (not necessary) check: G_lambda is numerically positive definite."""
    if not 0 < rank_tol < 1:
        raise ValueError("rank_tol must lie in (0, 1)")
    top = report.g_lambda_eigs[0]
    return bool(top > 0 and report.min_eig > rank_tol * top)
