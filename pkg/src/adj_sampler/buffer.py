"""Bounded FIFO replay buffer of (X1, grad g(X1)) pairs.

Entries are stored in preallocated ring arrays.  Pushing past capacity
overwrites the oldest rows; sampling is uniform with replacement and returns
value copies, so mutating a sampled entry never touches the store.  Non-finite
entries are dropped with a counted warning instead of failing the run.

Ablation mode additionally stores, per entry, a fixed number of (t, X_t)
states from the generating trajectory; they replace posterior resampling when
training without reciprocal resampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError

logger = logging.getLogger(__name__)

__all__ = ["BufferEntry", "ReplayBuffer"]


@dataclass
class BufferEntry:
    x1: np.ndarray
    grad_g: np.ndarray
    birth: int = 0
    trace_t: np.ndarray | None = None
    trace_x: np.ndarray | None = None


class ReplayBuffer:
    def __init__(self, capacity: int, dim: int, trace_count: int = 0):
        if capacity < 1:
            raise ContractViolationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.trace_count = int(trace_count)
        self._x1 = np.zeros((capacity, dim))
        self._grad = np.zeros((capacity, dim))
        self._birth = np.zeros(capacity, dtype=np.int64)
        if trace_count > 0:
            self._trace_t = np.zeros((capacity, trace_count))
            self._trace_x = np.zeros((capacity, trace_count, dim))
        else:
            self._trace_t = self._trace_x = None
        self._head = 0  # next write slot
        self._size = 0
        self.rejected = 0

    def __len__(self) -> int:
        return self._size

    def push_arrays(self, x1: np.ndarray, grad_g: np.ndarray, birth: int = 0,
                    trace_t: np.ndarray | None = None,
                    trace_x: np.ndarray | None = None) -> int:
        """Append a batch of rows; returns how many were accepted."""
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
        grad_g = np.atleast_2d(np.asarray(grad_g, dtype=np.float64))
        if x1.shape != grad_g.shape or x1.shape[1] != self.dim:
            raise ContractViolationError("buffer push shape mismatch")
        finite = np.isfinite(x1).all(axis=1) & np.isfinite(grad_g).all(axis=1)
        n_bad = int((~finite).sum())
        if n_bad:
            self.rejected += n_bad
            logger.warning("replay buffer dropped %d non-finite entries", n_bad)
            x1, grad_g = x1[finite], grad_g[finite]
            if trace_t is not None:
                trace_t, trace_x = trace_t[finite], trace_x[finite]
        for row in range(x1.shape[0]):
            slot = self._head
            self._x1[slot] = x1[row]
            self._grad[slot] = grad_g[row]
            self._birth[slot] = birth
            if self._trace_t is not None:
                if trace_t is None:
                    raise ContractViolationError("buffer expects trajectory traces")
                self._trace_t[slot] = trace_t[row]
                self._trace_x[slot] = trace_x[row]
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        return x1.shape[0]

    def push(self, entries: list[BufferEntry]) -> int:
        if not entries:
            return 0
        x1 = np.stack([e.x1 for e in entries])
        grad = np.stack([e.grad_g for e in entries])
        tt = tx = None
        if self._trace_t is not None:
            tt = np.stack([e.trace_t for e in entries])
            tx = np.stack([e.trace_x for e in entries])
        birth = entries[0].birth
        return self.push_arrays(x1, grad, birth=birth, trace_t=tt, trace_x=tx)

    def _age_order(self) -> np.ndarray:
        start = (self._head - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def entries(self) -> list[BufferEntry]:
        """Current contents, oldest first."""
        out = []
        for slot in self._age_order():
            out.append(BufferEntry(
                x1=self._x1[slot].copy(), grad_g=self._grad[slot].copy(),
                birth=int(self._birth[slot]),
                trace_t=None if self._trace_t is None else self._trace_t[slot].copy(),
                trace_x=None if self._trace_x is None else self._trace_x[slot].copy()))
        return out

    def sample_arrays(self, m: int, rng: np.random.Generator):
        """m uniform-with-replacement draws as (x1, grad_g, trace_t, trace_x)."""
        if self._size == 0:
            raise ContractViolationError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=m)
        slots = self._age_order()[idx]
        tt = None if self._trace_t is None else self._trace_t[slots].copy()
        tx = None if self._trace_x is None else self._trace_x[slots].copy()
        return self._x1[slots].copy(), self._grad[slots].copy(), tt, tx

    def sample_uniform(self, m: int, rng: np.random.Generator) -> list[BufferEntry]:
        x1, grad, tt, tx = self.sample_arrays(m, rng)
        return [BufferEntry(
            x1=x1[i], grad_g=grad[i],
            trace_t=None if tt is None else tt[i],
            trace_x=None if tx is None else tx[i]) for i in range(m)]
