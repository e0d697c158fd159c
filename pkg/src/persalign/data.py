"""Logged preference interactions and their feature design.

A record is ``(user, context index, slate of action indices, chosen slot)``.
For the bilinear model the score of slot ``k`` is ``<vec(M_user), vec(x a_k^T)>``,
so each record is stored once, in arrival order, as a ``(K, d*d)`` feature
block inside its user's growable buffer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDataset
from .instance import ProblemInstance


@dataclass(frozen=True)
class PreferenceRecord:
    user: int
    context: int
    slate: tuple[int, ...]
    chosen: int


class PreferenceLog:
    """Append-only columnar store of records (never truncated)."""

    def __init__(self, slate_k: int, capacity: int = 1024):
        self.slate_k = slate_k
        self._n = 0
        self._users = np.empty(capacity, dtype=np.int64)
        self._contexts = np.empty(capacity, dtype=np.int64)
        self._slates = np.empty((capacity, slate_k), dtype=np.int64)
        self._chosen = np.empty(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = len(self._users)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_users", "_contexts", "_chosen"):
            arr = getattr(self, name)
            grown = np.empty(new, dtype=arr.dtype)
            grown[: self._n] = arr[: self._n]
            setattr(self, name, grown)
        grown = np.empty((new, self.slate_k), dtype=np.int64)
        grown[: self._n] = self._slates[: self._n]
        self._slates = grown

    def append(self, user: int, context: int, slate: Sequence[int], chosen: int) -> None:
        self._grow(self._n + 1)
        i = self._n
        self._users[i] = user
        self._contexts[i] = context
        self._slates[i] = slate
        self._chosen[i] = chosen
        self._n += 1

    def extend(self, users, contexts, slates, chosen) -> None:
        users = np.asarray(users, dtype=np.int64)
        m = len(users)
        self._grow(self._n + m)
        sl = slice(self._n, self._n + m)
        self._users[sl] = users
        self._contexts[sl] = contexts
        self._slates[sl] = np.asarray(slates, dtype=np.int64).reshape(m, self.slate_k)
        self._chosen[sl] = chosen
        self._n += m

    @property
    def users(self) -> np.ndarray:
        return self._users[: self._n]

    @property
    def contexts(self) -> np.ndarray:
        return self._contexts[: self._n]

    @property
    def slates(self) -> np.ndarray:
        return self._slates[: self._n]

    @property
    def chosen(self) -> np.ndarray:
        return self._chosen[: self._n]

    def record(self, s: int) -> PreferenceRecord:
        return PreferenceRecord(
            int(self._users[s]), int(self._contexts[s]), tuple(int(a) for a in self._slates[s]), int(self._chosen[s])
        )

    def records(self) -> list[PreferenceRecord]:
        return [self.record(s) for s in range(self._n)]

    @classmethod
    def from_records(cls, records: Iterable[PreferenceRecord]) -> "PreferenceLog":
        records = list(records)
        if not records:
            raise EmptyDataset("no records")
        log = cls(len(records[0].slate), capacity=len(records))
        for r in records:
            log.append(r.user, r.context, r.slate, r.chosen)
        return log


def record_features(inst: ProblemInstance, users, contexts, slates) -> np.ndarray:
    """vec(x a_k^T) for every slot of every record, shape (n, K, d*d)."""
    x = inst.contexts[users, contexts]  # (n, d)
    a = inst.actions[np.asarray(users)[:, None], slates]  # (n, K, d)
    n, K, d = a.shape
    return (x[:, None, :, None] * a[:, :, None, :]).reshape(n, K, d * d)


class Design:
    """Per-user feature blocks for a growing log on a fixed instance."""

    def __init__(self, inst: ProblemInstance, slate_k: int):
        self.num_users = inst.num_users
        self.dim_d = inst.dim_d
        self.slate_k = slate_k
        self._inst = inst
        self._feat = [np.empty((16, slate_k, inst.dim_d**2)) for _ in range(self.num_users)]
        self._y = [np.empty(16, dtype=np.int64) for _ in range(self.num_users)]
        self._count = np.zeros(self.num_users, dtype=np.int64)
        self._users = np.empty(16, dtype=np.int64)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, users, contexts, slates, chosen) -> None:
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        contexts = np.atleast_1d(np.asarray(contexts, dtype=np.int64))
        slates = np.asarray(slates, dtype=np.int64).reshape(len(users), self.slate_k)
        chosen = np.atleast_1d(np.asarray(chosen, dtype=np.int64))
        feats = record_features(self._inst, users, contexts, slates)
        m = len(users)
        if self._n + m > len(self._users):
            grown = np.empty(max(self._n + m, 2 * len(self._users)), dtype=np.int64)
            grown[: self._n] = self._users[: self._n]
            self._users = grown
        self._users[self._n : self._n + m] = users
        self._n += m
        for i in np.unique(users):
            mask = users == i
            k = int(mask.sum())
            c = self._count[i]
            if c + k > len(self._y[i]):
                cap = max(c + k, 2 * len(self._y[i]))
                f = np.empty((cap, self.slate_k, self.dim_d**2))
                f[:c] = self._feat[i][:c]
                y = np.empty(cap, dtype=np.int64)
                y[:c] = self._y[i][:c]
                self._feat[i], self._y[i] = f, y
            self._feat[i][c : c + k] = feats[mask]
            self._y[i][c : c + k] = chosen[mask]
            self._count[i] = c + k

    @classmethod
    def from_log(cls, inst: ProblemInstance, log: PreferenceLog, n: int | None = None) -> "Design":
        n = len(log) if n is None else n
        des = cls(inst, log.slate_k)
        if n:
            des.append(log.users[:n], log.contexts[:n], log.slates[:n], log.chosen[:n])
        return des

    def prefix_counts(self, n: int | None = None) -> np.ndarray:
        if n is None or n >= self._n:
            return self._count.copy()
        return np.bincount(self._users[:n], minlength=self.num_users)

    def blocks(self, n: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray], int]:
        """Per-user (features, chosen) views restricted to the first ``n`` records."""
        counts = self.prefix_counts(n)
        feats = [self._feat[i][: counts[i]] for i in range(self.num_users)]
        ys = [self._y[i][: counts[i]] for i in range(self.num_users)]
        return feats, ys, int(counts.sum())


def as_design(data, inst: ProblemInstance) -> Design:
    if isinstance(data, Design):
        return data
    if isinstance(data, PreferenceLog):
        return Design.from_log(inst, data)
    return Design.from_log(inst, PreferenceLog.from_records(data))
