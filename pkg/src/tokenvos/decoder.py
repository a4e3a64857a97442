"""FPN-style mask decoding of current-frame tokens and multi-object aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Module, Tensor, ops
from .config import ConfigError, ModelConfig

NEG = -1e9


@dataclass
class ObjectLogits:
    logits: Tensor  # (B, M_max+1, H, W)
    valid_objects: np.ndarray  # (B,) number of objects M per sample

    def masked(self) -> Tensor:
        return ops.add(self.logits, Tensor(channel_mask(self.valid_objects, self.logits.shape, self.logits.dtype)))


def channel_mask(valid, shape, dtype) -> np.ndarray:
    """Additive mask: 0 on channels 0..M, a large negative value beyond."""
    valid = np.atleast_1d(np.asarray(valid))
    B, K = shape[0], shape[1]
    ch = np.arange(K)[None, :]
    m = np.where(ch <= valid[:, None], 0.0, NEG).astype(dtype)
    return m.reshape(B, K, 1, 1)


class FPNDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        C, half = cfg.C, cfg.C // 2
        c4, c8 = cfg.stem_channels
        self.lat_top = Conv2d(C, half, 1, rng)
        self.lat8 = Conv2d(c8, half, 1, rng)
        self.fuse8 = Conv2d(half, half, 3, rng, padding=1)
        self.lat4 = Conv2d(c4, half, 1, rng)
        self.fuse4 = Conv2d(half, half, 3, rng, padding=1)
        self.head = Conv2d(half, cfg.M_max + 1, 1, rng)

    def __call__(self, tokens: Tensor, skips) -> Tensor:
        """(B, N, C) tokens + (s4, s8) skips -> (B, M_max+1, H, W) logits."""
        if skips is None or len(skips) != 2:
            raise ConfigError("decoder needs the two stem skip maps")
        s4, s8 = skips
        B, N, C = tokens.shape
        gh, gw = self.cfg.grid
        x = ops.reshape(ops.transpose(tokens, (0, 2, 1)), (B, C, gh, gw))
        x = self.lat_top(x)
        x = ops.add(ops.upsample_bilinear(x, 2), self.lat8(s8))
        x = ops.gelu(self.fuse8(x))
        x = ops.add(ops.upsample_bilinear(x, 2), self.lat4(s4))
        x = ops.gelu(self.fuse4(x))
        x = self.head(x)
        return ops.upsample_bilinear(x, self.cfg.P // 4)


def fpn_decode(decoder: FPNDecoder, tokens: Tensor, skips, valid_objects) -> ObjectLogits:
    return ObjectLogits(decoder(tokens, skips), np.atleast_1d(np.asarray(valid_objects)))


def aggregate_objects(logits: ObjectLogits) -> np.ndarray:
    """Per-pixel softmax over channels 0..M, then argmax; exact ties go to the lowest id."""
    data = logits.logits.data if isinstance(logits.logits, Tensor) else np.asarray(logits.logits)
    valid = np.atleast_1d(np.asarray(logits.valid_objects))
    if (valid < 1).any():
        raise ValueError("aggregation needs at least one object")
    z = data.astype(np.float64) + channel_mask(valid, data.shape, np.float64)
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    return prob.argmax(axis=1).astype(np.uint8)
