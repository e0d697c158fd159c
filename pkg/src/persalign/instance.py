"""Ground-truth problem instances for the bilinear personalized reward model.

A user ``i`` scores action ``a`` in context ``x`` as

    R_i(x, a) = sum_j heads[j, i] * x^T W_j a

All raw draws (W, bank vectors, pre-scale heads) are i.i.d. standard normal.
Every (user, context) pair must have a unique best action whose margin over
the runner-up clears ``raw_gap_target * head_scale``.  Two constructors
enforce this:

``resample_contexts`` (default)
    contexts whose top-two gap misses the target are redrawn, up to
    ``max_context_draws`` times each; a seed whose budget runs out is skipped.
``seed_search``
    whole instances are accepted or rejected.

Either way seeds ``seed, seed + 1, ...`` are tried up to ``max_retries``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import GapUnreachable, InvalidConfig

__all__ = [
    "InstanceConfig",
    "ProblemInstance",
    "GapStats",
    "generate_instance",
    "generate_degenerate_instance",
    "gap_stats",
    "reward_table",
    "scale_heads",
    "user_matrices",
]


GAP_MODES = ("resample_contexts", "seed_search")


@dataclass(frozen=True)
class InstanceConfig:
    dim_d: int = 3
    dim_j: int = 4
    num_users: int = 6
    n_ctx: int = 20
    n_act: int = 20
    raw_gap_target: float = 0.05
    head_scale: float = 1.0
    max_retries: int = 500
    shared_banks: bool = False
    user_dist: tuple[float, ...] | None = None
    gap_mode: str = "resample_contexts"
    max_context_draws: int = 10_000

    def validate(self) -> None:
        for name in ("dim_d", "dim_j", "num_users", "n_ctx", "n_act"):
            if int(getattr(self, name)) <= 0:
                raise InvalidConfig(name, "must be a positive integer")
        if not self.raw_gap_target > 0:
            raise InvalidConfig("raw_gap_target", "must be > 0")
        if not self.head_scale > 0:
            raise InvalidConfig("head_scale", "must be > 0")
        if self.max_retries < 1:
            raise InvalidConfig("max_retries", "must be >= 1")
        if self.gap_mode not in GAP_MODES:
            raise InvalidConfig("gap_mode", f"must be one of {GAP_MODES}")
        if self.max_context_draws < 1:
            raise InvalidConfig("max_context_draws", "must be >= 1")
        if self.user_dist is not None:
            rho = np.asarray(self.user_dist, dtype=float)
            if rho.shape != (self.num_users,) or np.any(rho < 0) or abs(rho.sum() - 1) > 1e-12:
                raise InvalidConfig("user_dist", "must be a probability vector of length num_users")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    dim_d: int
    dim_j: int
    num_users: int
    w_true: np.ndarray  # (J, d, d)
    heads_true: np.ndarray  # (J, U)
    contexts: np.ndarray  # (U, n_ctx, d)
    actions: np.ndarray  # (U, n_act, d)
    user_dist: np.ndarray  # (U,)
    head_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        J, d, U = self.dim_j, self.dim_d, self.num_users
        if self.w_true.shape != (J, d, d):
            raise InvalidConfig("w_true", f"expected shape {(J, d, d)}, got {self.w_true.shape}")
        if self.heads_true.shape != (J, U):
            raise InvalidConfig("heads_true", f"expected shape {(J, U)}, got {self.heads_true.shape}")
        for name in ("contexts", "actions"):
            bank = getattr(self, name)
            if bank.ndim != 3 or bank.shape[0] != U or bank.shape[2] != d or bank.shape[1] == 0:
                raise InvalidConfig(name, f"expected non-empty (U, n, {d}) bank, got {bank.shape}")
        rho = self.user_dist
        if rho.shape != (U,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-12:
            raise InvalidConfig("user_dist", "must be a probability vector over users")
        for arr in (self.w_true, self.heads_true, self.contexts, self.actions, self.user_dist):
            arr.setflags(write=False)

    @property
    def n_ctx(self) -> int:
        return self.contexts.shape[1]

    @property
    def n_act(self) -> int:
        return self.actions.shape[1]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "dim_d": self.dim_d,
            "dim_j": self.dim_j,
            "num_users": self.num_users,
            "w_true": self.w_true.tolist(),
            "heads_true": self.heads_true.tolist(),
            "contexts": self.contexts.tolist(),
            "actions": self.actions.tolist(),
            "user_dist": self.user_dist.tolist(),
            "head_scale": float(self.head_scale),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProblemInstance":
        version = doc.get("schema_version")
        if version != 1:
            raise InvalidConfig("schema_version", f"unsupported instance schema {version!r}")
        try:
            return cls(
                dim_d=int(doc["dim_d"]),
                dim_j=int(doc["dim_j"]),
                num_users=int(doc["num_users"]),
                w_true=np.array(doc["w_true"], dtype=float),
                heads_true=np.array(doc["heads_true"], dtype=float),
                contexts=np.array(doc["contexts"], dtype=float),
                actions=np.array(doc["actions"], dtype=float),
                user_dist=np.array(doc["user_dist"], dtype=float),
                head_scale=float(doc["head_scale"]),
                seed=int(doc["seed"]),
            )
        except KeyError as exc:
            raise InvalidConfig(str(exc.args[0]), "missing from instance document") from None

    def fingerprint(self) -> str:
        """sha256 over the canonical JSON encoding."""
        from .io import dumps

        return hashlib.sha256(dumps(self.to_dict()).encode()).hexdigest()


@dataclass(frozen=True)
class GapStats:
    min_gap: float
    pct5_gap: float
    median_gap: float
    mean_gap: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def scaled(self, c: float) -> "GapStats":
        return GapStats(*(c * v for v in dataclasses.astuple(self)))


def user_matrices(w: np.ndarray, heads: np.ndarray) -> np.ndarray:
    """Per-user bilinear matrices M_i = sum_j heads[j, i] W_j, shape (U, d, d)."""
    return np.einsum("ju,jkl->ukl", heads, w)


def reward_table(inst: ProblemInstance, heads: np.ndarray | None = None) -> np.ndarray:
    """True rewards for every (user, context, action) triple, shape (U, n_ctx, n_act)."""
    heads = inst.heads_true if heads is None else heads
    m = user_matrices(inst.w_true, heads)
    return np.einsum("uck,ukl,ual->uca", inst.contexts, m, inst.actions)


def _top_two_gaps(table: np.ndarray) -> np.ndarray:
    if table.shape[-1] < 2:
        return np.full(table.shape[:-1], np.inf).ravel()
    top = np.partition(table, -2, axis=-1)
    return (top[..., -1] - top[..., -2]).ravel()


def gap_stats(inst: ProblemInstance) -> GapStats:
    """Top-two true-reward gap statistics over every (user, context) pair."""
    gaps = _top_two_gaps(reward_table(inst))
    return GapStats(
        min_gap=float(gaps.min()),
        pct5_gap=float(np.percentile(gaps, 5)),
        median_gap=float(np.median(gaps)),
        mean_gap=float(gaps.mean()),
    )


def scale_heads(inst: ProblemInstance, c: float) -> ProblemInstance:
    if not c > 0:
        raise InvalidConfig("c", "head scaling factor must be positive")
    return dataclasses.replace(inst, heads_true=inst.heads_true * c, head_scale=inst.head_scale * c)


def _streams(seed: int) -> list[np.random.Generator]:
    # Separate streams so full and degenerate instances at one seed share W and banks.
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _pair_gaps(ctx: np.ndarray, m: np.ndarray, act: np.ndarray) -> np.ndarray:
    """Top-two gaps of (U, n, d) contexts against per-user matrices, shape (U, n)."""
    table = np.einsum("uck,ukl,ual->uca", ctx, m, act)
    top = np.partition(table, -2, axis=-1)
    return top[..., -1] - top[..., -2]


def _resample_contexts(cfg, ctx, act, m, rng) -> np.ndarray | None:
    """Redraw contexts below the raw gap target; None when the budget runs out."""
    ctx = ctx.copy()
    if cfg.shared_banks:
        bad = _pair_gaps(ctx, m, act).min(axis=0) < cfg.raw_gap_target
        for _ in range(cfg.max_context_draws):
            if not bad.any():
                return ctx
            idx = np.flatnonzero(bad)
            fresh = rng.standard_normal((len(idx), cfg.dim_d))
            ctx[:, idx] = fresh
            bad[idx] = _pair_gaps(ctx[:, idx], m, act).min(axis=0) < cfg.raw_gap_target
        return None
    bad = _pair_gaps(ctx, m, act) < cfg.raw_gap_target
    for _ in range(cfg.max_context_draws):
        if not bad.any():
            return ctx
        users, cols = np.nonzero(bad)
        ctx[users, cols] = rng.standard_normal((len(users), cfg.dim_d))
        bad[users, cols] = _gaps_rows(ctx[users, cols], m[users], act[users]) < cfg.raw_gap_target
    return None


def _gaps_rows(x: np.ndarray, m: np.ndarray, act: np.ndarray) -> np.ndarray:
    scores = np.einsum("nk,nkl,nal->na", x, m, act)
    top = np.partition(scores, -2, axis=-1)
    return top[:, -1] - top[:, -2]


def _draw(cfg: InstanceConfig, seed: int, head_rank: int | None):
    w_rng, bank_rng, head_rng, resample_rng = _streams(seed)
    d, J, U = cfg.dim_d, cfg.dim_j, cfg.num_users
    w = w_rng.standard_normal((J, d, d))
    if cfg.shared_banks:
        ctx = np.broadcast_to(bank_rng.standard_normal((cfg.n_ctx, d)), (U, cfg.n_ctx, d)).copy()
        act = np.broadcast_to(bank_rng.standard_normal((cfg.n_act, d)), (U, cfg.n_act, d)).copy()
    else:
        ctx = bank_rng.standard_normal((U, cfg.n_ctx, d))
        act = bank_rng.standard_normal((U, cfg.n_act, d))
    if head_rank is None:
        raw_heads = head_rng.standard_normal((J, U))
    else:
        q, r = np.linalg.qr(head_rng.standard_normal((J, J)))
        q = q * np.sign(np.diag(r))
        raw_heads = q[:, :head_rank] @ head_rng.standard_normal((head_rank, U))
    if cfg.gap_mode == "resample_contexts":
        ctx = _resample_contexts(cfg, ctx, act, user_matrices(w, raw_heads), resample_rng)
    return w, raw_heads, ctx, act


def _search(cfg: InstanceConfig, seed: int, head_rank: int | None) -> ProblemInstance:
    cfg.validate()
    if cfg.user_dist is None:
        rho = np.full(cfg.num_users, 1.0 / cfg.num_users)
    else:
        rho = np.asarray(cfg.user_dist, dtype=float)
    target = cfg.raw_gap_target * cfg.head_scale
    best = -np.inf
    for attempt in range(cfg.max_retries):
        s = seed + attempt
        w, raw_heads, ctx, act = _draw(cfg, s, head_rank)
        if ctx is None:
            continue
        inst = ProblemInstance(
            dim_d=cfg.dim_d,
            dim_j=cfg.dim_j,
            num_users=cfg.num_users,
            w_true=w,
            heads_true=raw_heads * cfg.head_scale,
            contexts=ctx,
            actions=act,
            user_dist=rho,
            head_scale=float(cfg.head_scale),
            seed=s,
        )
        min_gap = _top_two_gaps(reward_table(inst)).min()
        best = max(best, min_gap)
        if min_gap >= target and min_gap > 0:
            return inst
    raise GapUnreachable(
        f"no seed in [{seed}, {seed + cfg.max_retries}) reached min gap {target:.6g} "
        f"(best {best:.6g})"
    )


def generate_instance(cfg: InstanceConfig, seed: int) -> ProblemInstance:
    """Draw instances from ``seed`` upward until the gap target is met."""
    return _search(cfg, seed, None)


def generate_degenerate_instance(cfg: InstanceConfig, head_rank: int, seed: int) -> ProblemInstance:
    """Like :func:`generate_instance` but with every head confined to a random
    ``head_rank``-dimensional subspace of R^J."""
    if not 1 <= head_rank < cfg.dim_j:
        raise InvalidConfig("head_rank", f"must satisfy 1 <= head_rank < dim_j={cfg.dim_j}")
    return _search(cfg, seed, head_rank)


def load_instance(path) -> ProblemInstance:
    with open(path) as fh:
        return ProblemInstance.from_dict(json.load(fh))
