"""Dynamic token selector.

Per layer, each reference token is scored from its own normalised feature and
a max-pooled global context; a two-way softmax gives drop/keep probabilities.
Training draws straight-through Gumbel samples, inference takes the argmax.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Tensor, ops


@dataclass
class SelectionDistribution:
    p: Tensor  # (..., N, 2): column 0 drop, column 1 keep
    layer: int = 0
    hard: np.ndarray | None = None  # (..., N) bool


class TokenSelector(Module):
    def __init__(self, C: int, rng: np.random.Generator, layer: int = 0):
        self.layer = layer
        hidden = max(C // 2, 2)
        self.norm = LayerNorm(C)
        self.local = Linear(C, hidden, rng)
        self.head1 = Linear(2 * hidden, hidden, rng)
        self.head2 = Linear(hidden, 2, rng)
        # start out keeping tokens: bias the keep logit
        self.head2.bias.data[:] = [-1.5, 1.5]

    def encode(self, e: Tensor) -> Tensor:
        return ops.gelu(self.local(self.norm(e)))

    def logits(self, e_ref: Tensor, context: Tensor | None = None) -> Tensor:
        """(..., N, C) -> (..., N, 2) unnormalised scores.

        ``context`` replaces the reference tokens as the source of the pooled
        global feature (the variant that pools current-frame tokens).
        """
        z = self.encode(e_ref)
        zg = z if context is None else self.encode(context)
        g = ops.max(zg, axis=-2)  # (..., hidden)
        g_rep = ops.add(ops.reshape(g, g.shape[:-1] + (1, g.shape[-1])),
                        Tensor(np.zeros(z.shape[:-1] + (1,), dtype=z.dtype)))
        h = ops.concat([g_rep, z], axis=-1)
        return self.head2(ops.gelu(self.head1(h)))

    def __call__(self, e_ref: Tensor, context: Tensor | None = None) -> SelectionDistribution:
        return SelectionDistribution(ops.softmax(self.logits(e_ref, context), axis=-1), self.layer)


def dts_score(selector: TokenSelector, e_ref: Tensor, context: Tensor | None = None) -> SelectionDistribution:
    return selector(e_ref, context)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12)))


def gumbel_select(p: Tensor, tau: float, rng: np.random.Generator | None = None,
                  noise: np.ndarray | None = None) -> Tensor:
    """Straight-through Gumbel-softmax keep indicator, shape (..., N).

    Forward value is the hard one-hot keep column; the gradient is that of the
    tempered soft sample. Either ``rng`` or pre-drawn ``noise`` (shape of ``p``)
    supplies the Gumbel perturbation.
    """
    if tau <= 0:
        raise ValueError(f"Gumbel temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_select needs an rng or explicit noise")
        noise = sample_gumbel(p.shape, rng)
    noise = np.asarray(noise, dtype=p.dtype)
    logp = ops.log(ops.add(p, 1e-30))
    y = ops.softmax(ops.scale(ops.add(logp, noise), 1.0 / tau), axis=-1)
    hard = (y.data[..., 1] >= y.data[..., 0]).astype(p.dtype)
    return ops.straight_through(hard, ops.getitem(y, (Ellipsis, 1)))


def infer_select(p) -> np.ndarray:
    """Keep iff p_keep >= p_drop (ties keep)."""
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    return arr[..., 1] >= arr[..., 0]


def apply_selection(K_ref: Tensor, V_ref: Tensor, hard) -> tuple:
    """Row-gather of the kept tokens, order preserved. Works on (N, C) or (1, N, C)."""
    idx = np.flatnonzero(np.asarray(hard).reshape(-1))
    return ops.gather_rows(K_ref, idx, axis=-2), ops.gather_rows(V_ref, idx, axis=-2)


class RatioTracker:
    """Per-layer selected-token fractions over training.

    ``update`` records one batch; ``means`` is the running arithmetic mean of
    all recorded batches; ``stabilized`` is the mean over the retained tail
    (the last ``window`` updates).
    """

    def __init__(self, num_layers: int, window: int = 100):
        self.num_layers = num_layers
        self.window = window
        self.count = 0
        self.totals = np.zeros(num_layers)
        self.tail = deque(maxlen=window)
        self.history: list = []

    def update(self, fractions) -> None:
        f = np.asarray(fractions, dtype=np.float64)
        if f.shape != (self.num_layers,):
            raise ValueError(f"expected {self.num_layers} fractions, got shape {f.shape}")
        if (f < 0).any() or (f > 1).any():
            raise ValueError("selection fractions must lie in [0, 1]")
        self.count += 1
        self.totals += f
        self.tail.append(f)
        self.history.append(f)

    @property
    def means(self) -> np.ndarray:
        return self.totals / max(self.count, 1)

    def stabilized(self) -> np.ndarray:
        if not self.tail:
            return np.ones(self.num_layers)
        return np.mean(np.stack(list(self.tail)), axis=0)
