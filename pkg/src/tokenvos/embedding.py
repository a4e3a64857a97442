"""Frame and mask embedding.

Frames become patch tokens through a stride-P patchify convolution plus a
learned positional table. Label rasters are one-hot encoded over
``M_max + 1`` channels and embedded by a single stride-P convolution. A small
convolutional stem runs beside the patch projection and provides the 1/4 and
1/8 scale skip features used by the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, GeometryError, Module, Parameter, Tensor, ops
from .config import ConfigError, ModelConfig


class ObjectCountError(ValueError):
    pass


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, N, C)
    grid: tuple
    frame_index: int = 0

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid[0] * self.grid[1]:
            raise GeometryError(f"{self.tokens.shape[-2]} tokens do not fill a {self.grid} grid")


@dataclass
class MaskEmbedding:
    embedding: Tensor  # (B, N, C)
    num_objects: int


def one_hot_labels(labels: np.ndarray, m_max: int, dtype=np.float64) -> np.ndarray:
    """(B, H, W) or (H, W) integer raster -> (B, m_max+1, H, W) one-hot."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.min(initial=0) < 0:
        raise ObjectCountError("negative label in raster")
    top = int(labels.max(initial=0))
    if top > m_max:
        raise ObjectCountError(f"label {top} exceeds M_max={m_max}")
    eye = np.eye(m_max + 1, dtype=dtype)
    return np.ascontiguousarray(eye[labels].transpose(0, 3, 1, 2))


def frames_to_nchw(frames: np.ndarray, cfg: ModelConfig, dtype) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.shape[1:] != (cfg.H, cfg.W, 3):
        raise ConfigError(f"frame shape {frames.shape[1:]} does not match config {(cfg.H, cfg.W, 3)}")
    return np.ascontiguousarray(frames.transpose(0, 3, 1, 2), dtype=dtype)


def _tokens_from_map(x: Tensor) -> Tensor:
    B, C, gh, gw = x.shape
    return ops.transpose(ops.reshape(x, (B, C, gh * gw)), (0, 2, 1))


class PatchEmbed(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Conv2d(3, cfg.C, cfg.P, rng, stride=cfg.P)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.N, cfg.C)))

    def __call__(self, x: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, N, C)."""
        return ops.add(_tokens_from_map(self.proj(x)), self.pos)


class SkipStem(Module):
    """Two strided convs producing maps at 4/P and 2/P of the frame scale (1/4, 1/8 for P=16)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c4, c8 = cfg.stem_channels
        k = cfg.P // 4
        self.conv4 = Conv2d(3, c4, k, rng, stride=k)
        self.conv8 = Conv2d(c4, c8, 2, rng, stride=2)

    def __call__(self, x: Tensor):
        s4 = ops.gelu(self.conv4(x))
        s8 = ops.gelu(self.conv8(s4))
        return s4, s8


class MaskEmbed(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Conv2d(cfg.M_max + 1, cfg.C, cfg.P, rng, stride=cfg.P)
        # the He-style conv init is too hot for an additive value offset
        self.proj.weight.data *= 0.25

    def __call__(self, onehot: Tensor) -> Tensor:
        """(B, M_max+1, H, W) one-hot -> (B, N, C)."""
        return _tokens_from_map(self.proj(onehot))


class Embedding(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch = PatchEmbed(cfg, rng)
        self.stem = SkipStem(cfg, rng)
        self.mask = MaskEmbed(cfg, rng)

    def patch_embed(self, frames, frame_index: int = 0) -> TokenGrid:
        """(B, H, W, 3) or (H, W, 3) frames in [0, 1] -> TokenGrid."""
        x = Tensor(frames_to_nchw(frames, self.cfg, self.patch.pos.dtype))
        return TokenGrid(self.patch(x), self.cfg.grid, frame_index)

    def frame_features(self, frames):
        """Patch tokens plus decoder skips for a batch of frames."""
        x = Tensor(frames_to_nchw(frames, self.cfg, self.patch.pos.dtype))
        tokens = self.patch(x)
        s4, s8 = self.stem(x)
        return tokens, (s4, s8)

    def mask_embed(self, labels) -> MaskEmbedding:
        labels = np.asarray(labels)
        lab = labels if labels.ndim == 3 else labels[None]
        if lab.shape[1:] != (self.cfg.H, self.cfg.W):
            raise ConfigError(f"mask shape {lab.shape[1:]} does not match config {(self.cfg.H, self.cfg.W)}")
        onehot = one_hot_labels(lab, self.cfg.M_max, self.patch.pos.dtype)
        return MaskEmbedding(self.mask(Tensor(onehot)), int(lab.max(initial=0)))
