"""Replay buffer with singular-value based admission.

While the buffer fills every sample is stored. Once full, a candidate
replaces the stored state whose removal lets the minimum singular value of
the state matrix grow the most, and is rejected when no replacement helps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from deepmpc.errors import InvalidInputError


@dataclass(frozen=True)
class ReplayEntry:
    x: np.ndarray
    target: np.ndarray
    step: int

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        tgt = np.array(self.target, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(tgt))):
            raise InvalidInputError("replay entries must be finite")
        x.setflags(write=False)
        tgt.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "target", tgt)


class NotReady(Exception):
    """The buffer holds fewer entries than requested."""


def _min_sv_from_gram(G: np.ndarray) -> np.ndarray:
    lam = np.linalg.eigvalsh(G)[..., 0]
    return np.sqrt(np.maximum(lam, 0.0))


@dataclass
class ReplayBuffer:
    capacity: int = 250
    batch_size: int = 64
    rng_seed: int = 0
    scale: Optional[np.ndarray] = None
    entries: list[ReplayEntry] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.batch_size < self.capacity:
            raise InvalidInputError("batch size must be smaller than capacity")
        self._rng = np.random.default_rng(np.uint64(self.rng_seed))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def state_matrix(self) -> np.ndarray:
        S = np.array([e.x for e in self.entries])
        if self.scale is not None and S.size:
            S = S / self.scale
        return S

    def min_singular_value(self) -> float:
        S = self.state_matrix()
        if S.size == 0:
            return 0.0
        return float(_min_sv_from_gram(S.T @ S))

    def snapshot(self) -> tuple[ReplayEntry, ...]:
        return tuple(self.entries)


def offer(buf: ReplayBuffer, e: ReplayEntry) -> bool:
    """Offer one entry; returns whether it was stored."""
    if not buf.full:
        buf.entries.append(e)
        return True
    S = buf.state_matrix()
    cand = e.x / buf.scale if buf.scale is not None else e.x
    G = S.T @ S
    current = buf.min_singular_value()
    # Gram matrix after swapping row j for the candidate, for every j at once.
    G_swap = G[None] - np.einsum("ji,jk->jik", S, S) + np.outer(cand, cand)[None]
    scores = _min_sv_from_gram(G_swap)
    j = int(np.argmax(scores))
    if scores[j] > current + 1e-12:
        old = buf.entries[j]
        buf.entries[j] = e
        # The rank-two update can round differently from a fresh Gram matrix.
        if buf.min_singular_value() >= current:
            return True
        buf.entries[j] = old
    return False


def sample_batch(buf: ReplayBuffer, n: int) -> list[ReplayEntry]:
    """Uniform sample without replacement, drawn from the buffer's own stream."""
    if n > len(buf.entries):
        raise NotReady(f"buffer holds {len(buf.entries)} entries, {n} requested")
    if n == 0:
        return []
    idx = buf._rng.choice(len(buf.entries), size=n, replace=False)
    return [buf.entries[i] for i in idx]


def dump_csv(buf: ReplayBuffer, path) -> None:
    """Columns: ``step, x0..x{d-1}, target0..target{m-1}``."""
    rows = buf.entries
    d = rows[0].x.size if rows else 0
    m = rows[0].target.size if rows else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"x{i}" for i in range(d)] + [f"target{i}" for i in range(m)])
        for r in rows:
            w.writerow([r.step] + [repr(float(v)) for v in r.x] + [repr(float(v)) for v in r.target])
