"""Empirical MNL risk minimization over the bilinear class.

Parameters are the representation ``W`` (J x d x d, handled as a J x d^2
matrix of rows ``w_j = vec(W_j)``) and the head matrix ``Lambda`` (J x U).
User ``i`` scores through ``m_i = sum_j Lambda[j, i] w_j``; the objective is

    (1/t) sum_s [logsumexp(v_s) - v_{s, y_s}] + ridge/2 (|W|^2 + |Lambda|^2).

The loss is convex in each block given the other.  Fitting alternates exact
Newton steps on the heads (one small J x J system per user) with
representation updates, each safeguarded by Armijo backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Design, as_design
from .errors import EmptyDataset, InvalidConfig, NumericalFailure
from .instance import ProblemInstance
from .scores import RewardModel

log = logging.getLogger(__name__)

REP_STEP_RULES = ("backtracking_armijo", "newton")

_ARMIJO_C = 1e-4
_MAX_HALVINGS = 40


def _lse(v: np.ndarray) -> np.ndarray:
    top = v.max(axis=1)
    return top + np.log(np.exp(v - top[:, None]).sum(axis=1))


@dataclass(frozen=True)
class FitConfig:
    ridge: float = 1e-3
    max_rep_updates: int = 40
    max_head_updates: int = 25
    tolerance: float = 1e-9
    rep_step_rule: str = "newton"

    def validate(self) -> None:
        if self.ridge < 0:
            raise InvalidConfig("ridge", "must be >= 0")
        if self.max_rep_updates < 1:
            raise InvalidConfig("max_rep_updates", "must be >= 1")
        if self.max_head_updates < 1:
            raise InvalidConfig("max_head_updates", "must be >= 1")
        if not self.tolerance > 0:
            raise InvalidConfig("tolerance", "must be > 0")
        if self.rep_step_rule not in REP_STEP_RULES:
            raise InvalidConfig("rep_step_rule", f"must be one of {REP_STEP_RULES}")


@dataclass
class FitReport:
    final_objective: float
    iterations_used: int
    converged: bool
    grad_norm: float
    rep_updates: int = 0
    head_updates: int = 0
    history: list[float] = field(default_factory=list)


class Objective:
    """The penalized empirical MNL risk on a fixed set of per-user blocks."""

    def __init__(self, feats: list[np.ndarray], ys: list[np.ndarray], t: int, ridge: float):
        if t == 0:
            raise EmptyDataset("cannot fit on an empty dataset")
        self.feats = feats
        self.ys = ys
        self.t = t
        self.ridge = ridge
        self.num_users = len(feats)
        self.dim = feats[0].shape[-1]
        self.pairwise = feats[0].shape[1] == 2
        if self.pairwise:
            # K = 2: loss is softplus(<m, f_other - f_chosen>)
            self.diffs = []
            for f, y in zip(feats, ys):
                rows = np.arange(len(y))
                self.diffs.append(f[rows, 1 - y] - f[rows, y])

    @classmethod
    def from_design(cls, design: Design, ridge: float, n: int | None = None) -> "Objective":
        feats, ys, t = design.blocks(n)
        return cls(feats, ys, t, ridge)

    def _user_scores(self, i: int, m_i: np.ndarray) -> np.ndarray:
        f = self.feats[i]
        return (f.reshape(-1, self.dim) @ m_i).reshape(f.shape[0], f.shape[1])

    def user_losses(self, mrows: np.ndarray) -> np.ndarray:
        """Summed (not averaged) log-loss of each user's records."""
        out = np.zeros(self.num_users)
        for i in range(self.num_users):
            if len(self.ys[i]) == 0:
                continue
            if self.pairwise:
                out[i] = np.logaddexp(0.0, self.diffs[i] @ mrows[i]).sum()
                continue
            v = self._user_scores(i, mrows[i])
            out[i] = np.sum(_lse(v) - v[np.arange(len(v)), self.ys[i]])
        return out

    def data_loss(self, mrows: np.ndarray) -> float:
        return float(self.user_losses(mrows).sum() / self.t)

    def value(self, wm: np.ndarray, heads: np.ndarray) -> float:
        pen = 0.5 * self.ridge * (np.sum(wm * wm) + np.sum(heads * heads))
        return self.data_loss(heads.T @ wm) + pen

    def moments(self, mrows: np.ndarray, second: bool = True):
        """Per-user loss sums, score gradients g_i (U, D) and Hessians C_i (U, D, D).

        All are normalized by ``t``; the loss is w.r.t. ``m_i``.
        """
        U, D = self.num_users, self.dim
        losses = np.zeros(U)
        g = np.zeros((U, D))
        c = np.zeros((U, D, D)) if second else None
        for i in range(U):
            y = self.ys[i]
            n_i = len(y)
            if n_i == 0:
                continue
            if self.pairwise:
                z = self.diffs[i]
                u = z @ mrows[i]
                losses[i] = np.logaddexp(0.0, u).sum()
                q = expit(u)
                g[i] = q @ z
                if second:
                    zw = z * np.sqrt(q * (1.0 - q))[:, None]
                    c[i] = zw.T @ zw
                continue
            f = self.feats[i]
            v = self._user_scores(i, mrows[i])
            lse = _lse(v)
            rows = np.arange(n_i)
            losses[i] = np.sum(lse - v[rows, y])
            p = np.exp(v - lse[:, None])
            resid = p.copy()
            resid[rows, y] -= 1.0
            g[i] = np.einsum("sk,skD->D", resid, f)
            if second:
                fp = np.einsum("sk,skD->sD", p, f)
                fw = (f * np.sqrt(p)[:, :, None]).reshape(-1, D)
                c[i] = fw.T @ fw - fp.T @ fp
        return losses / self.t, g / self.t, (c / self.t if second else None)

    def value_and_grad(self, wm: np.ndarray, heads: np.ndarray):
        losses, g, _ = self.moments(heads.T @ wm, second=False)
        r = self.ridge
        val = losses.sum() + 0.5 * r * (np.sum(wm * wm) + np.sum(heads * heads))
        return float(val), heads @ g + r * wm, wm @ g.T + r * heads


def _to_model(wm: np.ndarray, heads: np.ndarray, d: int) -> RewardModel:
    return RewardModel(wm.reshape(-1, d, d).copy(), heads.copy())


def empirical_loss(model: RewardModel, data, inst: ProblemInstance, ridge: float) -> float:
    design = as_design(data, inst)
    obj = Objective.from_design(design, ridge)
    J, d = model.dim_j, model.dim_d
    return obj.value(model.w_hat.reshape(J, d * d), model.heads_hat)


def loss_gradients(model: RewardModel, data, inst: ProblemInstance, ridge: float):
    """(objective, dL/dW shaped like w_hat, dL/dLambda)."""
    design = as_design(data, inst)
    obj = Objective.from_design(design, ridge)
    J, d = model.dim_j, model.dim_d
    val, gw, gl = obj.value_and_grad(model.w_hat.reshape(J, d * d), model.heads_hat)
    return val, gw.reshape(J, d, d), gl


def gradient_factors(grad_rows: np.ndarray, rank_j: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-J truncated SVD of a U x D matrix as (heads J x U, rep J x D).

    ``heads.T @ rep`` is the truncation; rep rows are orthonormal right
    singular vectors (padded with zero rows when J exceeds D), heads are
    left singular vectors times singular values.
    """
    U, D = grad_rows.shape
    left, sing, right_t = np.linalg.svd(grad_rows, full_matrices=True)
    r = min(rank_j, len(sing))
    heads = np.zeros((rank_j, U))
    heads[:r] = (left[:, :r] * sing[:r]).T
    rep = np.zeros((rank_j, D))
    k = min(rank_j, D)
    rep[:k] = right_t[:k]
    return heads, rep


def _line_minimize(
    obj: Objective, direction_rows: np.ndarray, pen_sq: float, base_rows: np.ndarray | None = None,
    pen_lin: float = 0.0,
) -> float:
    """argmin_c>=0 of data_loss(base - c * direction) + ridge (c^2 pen_sq / 2 + c pen_lin), safeguarded Newton."""
    u_blocks = [obj._user_scores(i, direction_rows[i]) for i in range(obj.num_users)]
    if base_rows is None:
        v_blocks = [np.zeros_like(u) for u in u_blocks]
    else:
        v_blocks = [obj._user_scores(i, base_rows[i]) for i in range(obj.num_users)]

    def phi(c):
        val, d1, d2 = 0.0, 0.0, 0.0
        for i, u in enumerate(u_blocks):
            if len(u) == 0:
                continue
            v = v_blocks[i] - c * u
            lse = _lse(v)
            rows = np.arange(len(u))
            y = obj.ys[i]
            val += np.sum(lse - v[rows, y])
            p = np.exp(v - lse[:, None])
            mu = np.sum(p * u, axis=1)
            d1 += np.sum(u[rows, y] - mu)
            d2 += np.sum(np.sum(p * u * u, axis=1) - mu * mu)
        r = obj.ridge
        return (val / obj.t + r * (0.5 * c * c * pen_sq + c * pen_lin), d1 / obj.t + r * (c * pen_sq + pen_lin),
                d2 / obj.t + r * pen_sq)

    c = 0.0
    f, d1, d2 = phi(c)
    for _ in range(50):
        if d1 >= 0 or d2 <= 0:
            break
        step = -d1 / d2
        for _ in range(_MAX_HALVINGS):
            f_new, d1_new, d2_new = phi(c + step)
            if f_new <= f + _ARMIJO_C * step * d1:
                break
            step *= 0.5
        else:
            break
        c += step
        converged = abs(f - f_new) <= 1e-15 * max(1.0, abs(f))
        f, d1, d2 = f_new, d1_new, d2_new
        if converged:
            break
    return c


def init_gradient_svd(data, inst: ProblemInstance, rank_j: int, ridge: float = 1e-3) -> RewardModel:
    """Start from the best multiple of the rank-J truncated negative gradient.

    The zero model's per-user gradient w.r.t. an unrestricted bilinear matrix
    is stacked into a U x d^2 matrix and factored by truncated SVD; heads
    carry the singular values and are scaled by an exact line search along
    the descent direction.
    """
    obj = Objective.from_design(as_design(data, inst), ridge)
    return _init_from_objective(obj, rank_j, inst.dim_d)


def gauge_fix(model: RewardModel) -> tuple[RewardModel, bool]:
    """Equivalent model whose representation rows are orthonormal.

    Returns ``(model, rank_deficient)``.  Uses ``W^T = Q R`` with a
    non-negative diagonal in ``R``; heads become ``R Lambda``.
    """
    J, d = model.dim_j, model.dim_d
    wm = model.w_hat.reshape(J, d * d)
    if J > d * d:
        return model, True
    q, r = np.linalg.qr(wm.T)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    diag = np.abs(np.diag(r))
    rank_deficient = bool(diag.min() <= 1e-12 * max(diag.max(), 1e-300))
    return RewardModel(q.T.reshape(J, d, d).copy(), r @ model.heads_hat), rank_deficient


def _head_newton(obj: Objective, wm: np.ndarray, heads: np.ndarray, f0: float):
    """One safeguarded Newton step on every user's head; returns (heads, f, grad_norm)."""
    U = obj.num_users
    J = wm.shape[0]
    r = obj.ridge
    mrows = heads.T @ wm
    losses, g, c = obj.moments(mrows)
    grad = wm @ g.T + r * heads  # (J, U)
    hess = np.einsum("jD,uDE,kE->ujk", wm, c, wm) + r * np.eye(J)
    step = np.zeros_like(heads)
    for i in range(U):
        try:
            step[:, i] = -np.linalg.solve(hess[i], grad[:, i])
        except np.linalg.LinAlgError:
            step[:, i] = -np.linalg.lstsq(hess[i], grad[:, i], rcond=None)[0]
    base = losses + 0.5 * r * np.sum(heads * heads, axis=0)
    slope = np.sum(grad * step, axis=0)
    alpha = np.ones(U)
    pending = np.ones(U, dtype=bool)
    new = heads.copy()
    for _ in range(_MAX_HALVINGS):
        trial = heads + step * alpha
        trial_losses = obj.user_losses(trial.T @ wm) / obj.t
        trial_val = trial_losses + 0.5 * r * np.sum(trial * trial, axis=0)
        ok = pending & (trial_val <= base + _ARMIJO_C * alpha * slope)
        new[:, ok] = trial[:, ok]
        pending &= ~ok
        if not pending.any():
            break
        alpha[pending] *= 0.5
    f = obj.value(wm, new)
    if not np.isfinite(f):
        raise NumericalFailure("objective became non-finite during head update")
    if f > f0:
        return heads, f0
    return new, f


def _rep_step(obj: Objective, wm: np.ndarray, heads: np.ndarray, f0: float, rule: str):
    J, D = wm.shape
    r = obj.ridge
    mrows = heads.T @ wm
    need_hess = rule == "newton"
    losses, g, c = obj.moments(mrows, second=need_hess)
    grad = heads @ g + r * wm  # (J, D)
    if need_hess:
        hess = np.einsum("ju,ku,uDE->jDkE", heads, heads, c).reshape(J * D, J * D)
        hess[np.diag_indices_from(hess)] += r
        try:
            direction = -np.linalg.solve(hess, grad.ravel()).reshape(J, D)
        except np.linalg.LinAlgError:
            direction = -np.linalg.lstsq(hess, grad.ravel(), rcond=None)[0].reshape(J, D)
    else:
        direction = -grad
    slope = float(np.sum(grad * direction))
    if slope >= 0:
        return wm, f0
    step = 1.0
    for _ in range(_MAX_HALVINGS):
        trial = wm + step * direction
        f = obj.value(trial, heads)
        if not np.isfinite(f):
            step *= 0.5
            continue
        if f <= f0 + _ARMIJO_C * step * slope:
            return trial, f
        step *= 0.5
    return wm, f0


def _sym_sqrt(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    vals = np.clip(vals, 1e-300, None)
    root = vals ** (-0.5 if inverse else 0.5)
    return (vecs * root) @ vecs.T


def balance_factors(wm: np.ndarray, heads: np.ndarray):
    """Reparametrize ``(W, Lambda) -> (A W, A^-T Lambda)`` to minimize the ridge term.

    Every user matrix is unchanged, so only the penalty moves.  With
    P = W W^T and Q = Lambda Lambda^T the optimal S = A^T A is the matrix
    geometric mean of P^-1 and Q.  Returns the inputs when either Gram
    matrix is singular.
    """
    p = wm @ wm.T
    q = heads @ heads.T
    for g in (p, q):
        ev = np.linalg.eigvalsh(g)
        if not ev[-1] > 0 or ev[0] <= 1e-14 * ev[-1]:
            return wm, heads
    ph = _sym_sqrt(p)
    ph_inv = _sym_sqrt(p, inverse=True)
    a = _sym_sqrt(ph_inv @ _sym_sqrt(ph @ q @ ph) @ ph_inv)
    try:
        return a @ wm, np.linalg.solve(a, heads)
    except np.linalg.LinAlgError:
        return wm, heads


def fit_objective(obj: Objective, init: RewardModel, cfg: FitConfig) -> tuple[RewardModel, FitReport]:
    cfg.validate()
    J, d = init.dim_j, init.dim_d
    wm = init.w_hat.reshape(J, d * d).copy()
    heads = np.array(init.heads_hat, dtype=float)
    f = obj.value(wm, heads)
    if not np.isfinite(f):
        raise NumericalFailure("initial objective is not finite")
    history = [f]
    reps = nheads = 0
    converged = False
    while reps < cfg.max_rep_updates or nheads < cfg.max_head_updates:
        f_start = f
        if nheads < cfg.max_head_updates:
            heads, f = _head_newton(obj, wm, heads, f)
            nheads += 1
            history.append(f)
        if reps < cfg.max_rep_updates:
            wm, f = _rep_step(obj, wm, heads, f, cfg.rep_step_rule)
            reps += 1
            bw, bh = balance_factors(wm, heads)
            fb = obj.value(bw, bh)
            if fb < f:
                wm, heads, f = bw, bh, fb
            history.append(f)
        if not np.isfinite(f):
            raise NumericalFailure("objective became non-finite")
        if f_start - f <= cfg.tolerance * max(abs(f_start), 1e-300):
            converged = True
            break
    _, gw, gl = obj.value_and_grad(wm, heads)
    grad_norm = float(np.sqrt(np.sum(gw * gw) + np.sum(gl * gl)))
    report = FitReport(
        final_objective=float(f),
        iterations_used=reps + nheads,
        converged=converged,
        grad_norm=grad_norm,
        rep_updates=reps,
        head_updates=nheads,
        history=history,
    )
    return _to_model(wm, heads, d), report


def fit(
    data,
    inst: ProblemInstance,
    cfg: FitConfig = FitConfig(),
    warm_start: RewardModel | None = None,
    n: int | None = None,
) -> tuple[RewardModel, FitReport]:
    """Fit on ``data`` (records, a PreferenceLog or a Design; optionally its first ``n`` rows).

    Cold starts (no ``warm_start``) use :func:`init_gradient_svd`.
    """
    cfg.validate()
    design = as_design(data, inst)
    obj = Objective.from_design(design, cfg.ridge, n)
    if warm_start is None:
        init = _init_from_objective(obj, inst.dim_j, inst.dim_d)
    else:
        warm_start.check_against(inst)
        init = revive_dead_rows(obj, warm_start)
    return fit_objective(obj, init, cfg)


def _init_from_objective(obj: Objective, rank_j: int, d: int) -> RewardModel:
    _, g, _ = obj.moments(np.zeros((obj.num_users, obj.dim)), second=False)
    heads, rep = gradient_factors(g, rank_j)
    direction = heads.T @ rep
    c = _line_minimize(obj, direction, float(np.sum(heads * heads))) if np.any(direction) else 0.0
    return _to_model(rep, -c * heads, d)


def revive_dead_rows(obj: Objective, model: RewardModel, tol: float = 1e-10) -> RewardModel:
    """Refill factor rows whose representation and head are both (near) zero.

    Such rows get zero gradient in both blocks, so alternating updates can
    never bring them back.  They are seeded from the truncated SVD of the
    current gradient projected off the live rows' span, scaled by an exact
    line search.  The model is returned unchanged when that does not lower
    the objective.
    """
    J, d = model.dim_j, model.dim_d
    wm = model.w_hat.reshape(J, d * d)
    heads = np.asarray(model.heads_hat, dtype=float)
    size = np.linalg.norm(wm, axis=1) * np.linalg.norm(heads, axis=1)
    dead = size <= tol * max(float(size.max()), 1e-300)
    if not dead.any():
        return model
    mrows = heads.T @ wm
    _, g, _ = obj.moments(mrows, second=False)
    live = wm[~dead]
    if len(live):
        q, _ = np.linalg.qr(live.T)
        g = g - (g @ q) @ q.T
    left, sing, right_t = np.linalg.svd(g, full_matrices=False)
    k = min(int(dead.sum()), len(sing))
    sing = sing[:k]
    if not np.any(sing > 0):
        return model
    direction = (left[:, :k] * sing) @ right_t[:k]
    c = _line_minimize(obj, direction, 0.0, base_rows=mrows, pen_lin=float(sing.sum()))
    if c <= 0:
        return model
    new_w, new_h = wm.copy(), heads.copy()
    root = np.sqrt(c * sing)
    idx = np.flatnonzero(dead)[:k]
    new_w[idx] = root[:, None] * right_t[:k]
    new_h[idx] = -(root[:, None] * left[:, :k].T)
    if not obj.value(new_w, new_h) < obj.value(wm, heads):
        return model
    return _to_model(new_w, new_h, d)


def fit_heads(
    data, inst: ProblemInstance, w_fixed: np.ndarray, cfg: FitConfig = FitConfig(), heads0=None
) -> tuple[np.ndarray, FitReport]:
    """Newton on the heads alone with the representation frozen."""
    design = as_design(data, inst)
    obj = Objective.from_design(design, cfg.ridge)
    J = w_fixed.shape[0]
    wm = np.asarray(w_fixed, dtype=float).reshape(J, -1)
    heads = np.zeros((J, inst.num_users)) if heads0 is None else np.array(heads0, dtype=float)
    f = obj.value(wm, heads)
    history = [f]
    converged = False
    for k in range(cfg.max_head_updates):
        f_prev = f
        heads, f = _head_newton(obj, wm, heads, f)
        history.append(f)
        if f_prev - f <= cfg.tolerance * max(abs(f_prev), 1e-300):
            converged = True
            break
    _, _, gl = obj.value_and_grad(wm, heads)
    rep = FitReport(float(f), len(history) - 1, converged, float(np.linalg.norm(gl)), 0, len(history) - 1, history)
    return heads, rep
