"""Model assembly: embeddings, transformer layers with token selectors, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attention import LayerOutput, TransformerLayer, empty_memory
from ..autodiff import Module, Tensor, get_dtype, ops
from ..config import ModelConfig
from ..decoder import FPNDecoder, ObjectLogits
from ..dts import SelectionDistribution, TokenSelector, gumbel_select, infer_select
from ..embedding import Embedding

SELECT_MODES = ("none", "soft", "gumbel", "argmax")


@dataclass
class MemoryRead:
    keys: Tensor  # (B, n, C)
    values: Tensor
    weight: Tensor | None = None  # (B, n) or None for all-ones


@dataclass
class FrameOutput:
    logits: ObjectLogits
    layers: list
    keep: list  # per layer: Tensor (B, N) keep weights, or None when everything is kept
    hard: list  # per layer: bool ndarray (B, N)
    dists: list = field(default_factory=list)


class VOSModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embed = Embedding(cfg, rng)
        self.layers = [TransformerLayer(cfg, i, rng) for i in range(cfg.L)]
        self.selectors = [TokenSelector(cfg.C, rng, layer=i) for i in range(cfg.L)] if cfg.dts else []
        self.decoder = FPNDecoder(cfg, rng)
        self.cast(get_dtype())
        self.assign_names()

    @property
    def dtype(self):
        return self.embed.patch.pos.dtype

    def forward(self, ref_tokens: Tensor, ref_labels, cur_tokens: Tensor, cur_skips, valid,
                memory=None, select: str = "none", tau: float = 1.0, noise=None,
                gather: bool = False, with_stats: bool = True) -> FrameOutput:
        """One reference/current frame pair through the whole network.

        ``ref_labels`` is the (B, H, W) reference raster; ``memory`` a per-layer
        list of :class:`MemoryRead` (or None for an empty memory). ``select``
        picks how the token selectors act: ``none`` keeps all tokens, ``soft``
        uses the keep probability as key weight, ``gumbel`` draws
        straight-through samples (``noise``: (L, B, N, 2) Gumbel draws),
        ``argmax`` is the deterministic inference rule. With ``gather`` the
        argmax selection is realised by gathering rows (batch of one).
        """
        if select not in SELECT_MODES:
            raise ValueError(f"unknown selection mode {select!r}")
        cfg = self.cfg
        m_ref = self.embed.mask_embed(ref_labels).embedding
        B = ref_tokens.shape[0]
        e_ref, e_t = ref_tokens, cur_tokens
        outs, keeps, hards, dists = [], [], [], []
        for l, layer in enumerate(self.layers):
            mem = memory[l] if memory is not None and memory[l] is not None else None
            if mem is None:
                K_M = V_M = empty_memory((B,), cfg.C, e_ref.dtype)
                mem_w = None
            else:
                K_M, V_M, mem_w = mem.keys, mem.values, mem.weight
            ref_w = ref_index = None
            keep = None
            hard = np.ones((B, cfg.N), dtype=bool)
            if self.selectors and select != "none":
                ctx = e_t if cfg.dts_global == "current" else None
                dist: SelectionDistribution = self.selectors[l](e_ref, ctx)
                dists.append(dist)
                if select == "soft":
                    keep = ops.getitem(dist.p, (Ellipsis, 1))
                    hard = infer_select(dist.p)
                elif select == "gumbel":
                    keep = gumbel_select(dist.p, tau, noise=None if noise is None else noise[l],
                                         rng=None if noise is not None else np.random.default_rng())
                    hard = keep.data > 0.5
                else:
                    hard = infer_select(dist.p)
                    keep = Tensor(hard.astype(e_ref.dtype))
                dist.hard = hard
                if gather and select == "argmax":
                    if B != 1:
                        raise ValueError("gather selection needs a batch of one")
                    ref_index = np.flatnonzero(hard[0])
                else:
                    ref_w = keep
            out: LayerOutput = layer(e_ref, e_t, m_ref, K_M, V_M, ref_weight=ref_w, mem_weight=mem_w,
                                     ref_index=ref_index, with_stats=with_stats)
            outs.append(out)
            keeps.append(keep)
            hards.append(hard)
            e_ref, e_t = out.e_ref, out.e_t
        logits = self.decoder(e_t, cur_skips)
        return FrameOutput(ObjectLogits(logits, np.atleast_1d(np.asarray(valid))), outs, keeps, hards, dists)
