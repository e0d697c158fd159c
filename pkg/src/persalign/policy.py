"""Reference and KL-tilted sampling policies, slates and choice draws.

Randomness is organized as counter-based Philox streams keyed by
``(run_seed, stream_id)`` with the round index in the counter, so round ``t``
of stream ``s`` is reproducible without replaying earlier rounds.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyBank, InvalidMode
from .scores import RewardModel, centered_score, mnl_probs

SLATE_MODES = ("paper_bt", "iid_tilted")

ARRIVAL_STREAM = 0
SLATE_STREAM = 1
LABEL_STREAM = 2
OFFLINE_STREAM = 3

_MASK64 = (1 << 64) - 1


def round_rng(run_seed: int, round_index: int, stream_id: int) -> np.random.Generator:
    bitgen = np.random.Philox(key=[run_seed & _MASK64, stream_id], counter=[0, round_index, 0, 0])
    return np.random.Generator(bitgen)


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_")
    if m not in SLATE_MODES:
        raise InvalidMode(f"unknown slate mode {mode!r}; expected one of {SLATE_MODES}")
    return m


def tilt(scores, eta: float) -> np.ndarray:
    """Uniform reference reweighted by exp(eta * score), along the last axis."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    s = np.asarray(scores, dtype=float)
    if s.shape[-1] == 0:
        raise EmptyBank("cannot tilt over an empty bank")
    return mnl_probs(eta * s)


def tilted_weights(model: RewardModel, user: int, context, action_bank, eta: float) -> np.ndarray:
    return tilt(centered_score(model, user, context, action_bank), eta)


class TiltedPolicy:
    """Tilted weights for every (user, context) of an instance, cached at build time."""

    def __init__(self, score_table: np.ndarray, eta: float):
        self.eta = eta
        self.weights = tilt(score_table, eta)
        self._cdf = np.cumsum(self.weights, axis=-1)
        self._cdf[..., -1] = 1.0

    def draw(self, user: int, context: int, rng: np.random.Generator, size: int | None = None):
        cdf = self._cdf[user, context]
        u = rng.random(size)
        return np.searchsorted(cdf, u, side="right")


def _draw_from(weights: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(size), side="right")


def sample_online_slate(policy_weights, reference_bank, rng: np.random.Generator,
                        mode: str = "paper_bt", k: int = 2) -> np.ndarray:
    """Slate of action indices.

    ``paper_bt``: one index from the tilted weights, one uniform over the bank.
    ``iid_tilted``: ``k`` i.i.d. indices from the tilted weights.
    ``reference_bank`` is the bank itself or its size.
    """
    mode = normalize_mode(mode)
    n_act = reference_bank if isinstance(reference_bank, (int, np.integer)) else len(reference_bank)
    w = np.asarray(policy_weights, dtype=float)
    if mode == "paper_bt":
        first = _draw_from(w, rng, 1)[0]
        second = rng.integers(n_act)
        return np.array([first, second])
    if k < 2:
        raise ValueError("slates need at least two actions")
    return _draw_from(w, rng, k)


def sample_choice(truth_scores, rng: np.random.Generator) -> int:
    """Categorical draw from the MNL law of the true slate scores."""
    p = mnl_probs(truth_scores)
    return int(_draw_from(p, rng, 1)[0])
