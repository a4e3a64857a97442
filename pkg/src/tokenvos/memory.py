"""Layer-wise token memory.

Each transformer layer keeps its own store of reference keys/values. Tokens
from frame 0 are protected and never evicted. Two maintenance policies:

* ``maintain_fifo`` drops whole stored frames, oldest first;
* ``maintain_topk`` drops individual tokens, keeping the ones that received the
  most attention from current-frame queries (older tokens win ties).

The per-layer capacity is ``floor(r_l * N * Cap)`` where ``r_l`` is the layer's
learned selection ratio; a layer with ``r_l = 0`` stores nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class MemoryConfigError(ValueError):
    pass


def capacity(ratio: float, N: int, cap: int, protected: int = 0) -> int:
    """Token capacity of one layer; never below ``protected`` when the layer stores at all."""
    if ratio < 0 or N < 0 or cap < 0 or protected < 0:
        raise ValueError(f"capacity inputs must be non-negative (r={ratio}, N={N}, Cap={cap})")
    if ratio > 1:
        raise ValueError(f"selection ratio {ratio} outside [0, 1]")
    if ratio == 0:
        return 0
    # guard against r*N*Cap landing a hair under an integer
    c = int(math.floor(ratio * N * cap + 1e-9))
    return max(c, protected)


@dataclass
class Evicted:
    frame: int
    position: int


class LayerMemory:
    def __init__(self, C: int, capacity: int, dtype=np.float64):
        self.C = C
        self.capacity = int(capacity)
        self.keys = np.zeros((0, C), dtype=dtype)
        self.values = np.zeros((0, C), dtype=dtype)
        self.frames = np.zeros(0, dtype=np.int64)
        self.positions = np.zeros(0, dtype=np.int64)
        self.protected = np.zeros(0, dtype=bool)
        self.serial = np.zeros(0, dtype=np.int64)  # append order
        self._next = 0

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def protected_count(self) -> int:
        return int(self.protected.sum())

    def append(self, K_sel, V_sel, frame_index: int, positions=None) -> None:
        """Append selected tokens. A zero-capacity layer ignores the call."""
        K_sel = np.asarray(K_sel)
        V_sel = np.asarray(V_sel)
        if K_sel.shape != V_sel.shape:
            raise ValueError(f"keys {K_sel.shape} and values {V_sel.shape} differ")
        if self.capacity == 0:
            return
        n = len(K_sel)
        if positions is None:
            positions = np.arange(n)
        positions = np.asarray(positions, dtype=np.int64)
        if len(positions) != n:
            raise ValueError("one grid position per token required")
        self.keys = np.concatenate([self.keys, K_sel.astype(self.keys.dtype)])
        self.values = np.concatenate([self.values, V_sel.astype(self.values.dtype)])
        self.frames = np.concatenate([self.frames, np.full(n, frame_index, dtype=np.int64)])
        self.positions = np.concatenate([self.positions, positions])
        self.protected = np.concatenate([self.protected, np.full(n, frame_index == 0)])
        self.serial = np.concatenate([self.serial, self._next + np.arange(n)])
        self._next += n

    def read(self):
        """``(K_M, V_M)`` as read-only arrays of shape (n_M, C)."""
        k = self.keys.view()
        v = self.values.view()
        k.flags.writeable = False
        v.flags.writeable = False
        return k, v

    def _keep(self, keep: np.ndarray) -> list:
        gone = [Evicted(int(f), int(p)) for f, p in zip(self.frames[~keep], self.positions[~keep])]
        for name in ("keys", "values", "frames", "positions", "protected", "serial"):
            setattr(self, name, getattr(self, name)[keep])
        return gone

    def maintain_fifo(self) -> list:
        """Evict the oldest unprotected stored frame until within capacity."""
        evicted = []
        while len(self) > self.capacity:
            unprot = ~self.protected
            if not unprot.any():
                break
            oldest = self.frames[unprot][np.argmin(self.serial[unprot])]
            evicted += self._keep(~(unprot & (self.frames == oldest)))
        return evicted

    def maintain_topk(self, scores, keep: int | None = None) -> list:
        """Retain protected tokens plus the best-scoring unprotected ones.

        Runs only when the store exceeds capacity; it then shrinks to ``keep``
        tokens (default: the capacity). Ties favour older tokens.
        """
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(self),):
            raise ValueError(f"{len(scores)} scores for {len(self)} memory tokens")
        if len(self) <= self.capacity:
            return []
        target = self.capacity if keep is None else min(keep, self.capacity)
        target = max(target, self.protected_count)
        slots = target - self.protected_count
        unprot = np.flatnonzero(~self.protected)
        order = np.lexsort((self.serial[unprot], -scores[unprot]))
        mask = self.protected.copy()
        mask[unprot[order[:slots]]] = True
        return self._keep(mask)

    def provenance_rows(self, layer: int) -> list:
        return [
            {"layer": layer, "slot": i, "frame": int(f), "position": int(p), "protected": bool(pr)}
            for i, (f, p, pr) in enumerate(zip(self.frames, self.positions, self.protected))
        ]


def dump_memory_csv(memories, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "slot", "frame", "position", "protected"])
        w.writeheader()
        for layer, mem in enumerate(memories):
            w.writerows(mem.provenance_rows(layer))
