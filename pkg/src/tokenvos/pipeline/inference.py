"""Streaming per-frame inference with layer-wise token memory."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, no_grad
from ..config import MemoryPolicy
from ..decoder import aggregate_objects
from ..embedding import ObjectCountError
from ..memory import LayerMemory, capacity
from .model import FrameOutput, MemoryRead, VOSModel


class SessionError(ValueError):
    pass


class InferenceSession:
    """Holds everything the next frame may read: the previous frame's tokens and
    mask, and the per-layer memories. Nothing else from the past is kept.

    Frame ``t - 1`` is the reference of frame ``t``; after frame ``t`` is
    predicted, the reference tokens of that pass (frame ``t - 1``) are stored if
    ``t - 1`` is 0 or a multiple of the store interval.
    """

    def __init__(self, model: VOSModel, policy: MemoryPolicy | None = None, ratios=None):
        self.model = model
        self.cfg = model.cfg
        self.policy = policy or MemoryPolicy()
        L = self.cfg.L
        if ratios is None or not self.cfg.dts:
            ratios = np.ones(L)
        self.ratios = np.clip(np.asarray(ratios, dtype=np.float64), 0.0, 1.0)
        if self.ratios.shape != (L,):
            raise SessionError(f"need {L} selection ratios, got {self.ratios.shape}")
        self.memories = [
            LayerMemory(self.cfg.C, capacity(r, self.cfg.N, self.policy.cap), dtype=model.dtype) for r in self.ratios
        ]
        self.frame_index = -1
        self.ref_tokens = None
        self.ref_mask = None
        self.num_objects = 0
        self.last_output: FrameOutput | None = None
        self.store_log: list = []  # (frame stored, per-layer appended counts)

    @property
    def select_mode(self) -> str:
        return "argmax" if self.cfg.dts else "none"

    def start(self, frame, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=np.uint8)
        m = int(mask.max(initial=0))
        if m > self.cfg.M_max:
            raise ObjectCountError(f"{m} objects exceed M_max={self.cfg.M_max}")
        if m < 1:
            raise SessionError("first mask contains no object")
        self.num_objects = m
        with no_grad():
            tokens, _ = self.model.embed.frame_features(np.asarray(frame)[None])
        self.ref_tokens = tokens
        self.ref_mask = mask
        self.frame_index = 0
        return mask.copy()

    def _memory_reads(self):
        reads = []
        for mem in self.memories:
            if len(mem) == 0:
                reads.append(None)
                continue
            k, v = mem.read()
            reads.append(MemoryRead(Tensor(k[None], dtype=k.dtype), Tensor(v[None], dtype=v.dtype)))
        return reads

    def step(self, frame) -> np.ndarray:
        if self.ref_tokens is None:
            raise SessionError("call start() with the first frame and mask before step()")
        t = self.frame_index + 1
        with no_grad():
            tokens, skips = self.model.embed.frame_features(np.asarray(frame)[None])
            out = self.model.forward(
                self.ref_tokens, self.ref_mask[None], tokens, skips, [self.num_objects],
                memory=self._memory_reads(), select=self.select_mode, gather=True,
            )
        pred = aggregate_objects(out.logits)[0]
        self.last_output = out
        ref_frame = t - 1
        if ref_frame == 0 or ref_frame % self.policy.store_interval == 0:
            self._store(out, ref_frame)
        self.ref_tokens = tokens
        self.ref_mask = pred
        self.frame_index = t
        return pred

    def _store(self, out: FrameOutput, ref_frame: int) -> None:
        counts = []
        for l, (mem, lo) in enumerate(zip(self.memories, out.layers)):
            keep = out.hard[l][0]
            idx = np.flatnonzero(keep)
            old_scores = lo.stats.mem_mass[0] if len(mem) else np.zeros(0)
            new_scores = lo.stats.ref_mass[0][idx]
            before = len(mem)
            mem.append(lo.K_ref.data[0][idx], lo.V_ref.data[0][idx], ref_frame, positions=idx)
            counts.append(len(mem) - before)
            if ref_frame == 0 and mem.capacity > 0:
                mem.capacity = capacity(self.ratios[l], self.cfg.N, self.policy.cap, mem.protected_count)
            if self.policy.kind == "fifo":
                mem.maintain_fifo()
            else:
                scores = np.concatenate([old_scores, new_scores])[: len(mem)]
                mem.maintain_topk(scores, keep=self.policy.topk_for(self.cfg.N))
        self.store_log.append((ref_frame, counts))


def infer_video(model: VOSModel, frames, first_mask, policy: MemoryPolicy | None = None, ratios=None,
                session: InferenceSession | None = None):
    """Yield one label raster per frame; frame 0 returns ``first_mask``.

    ``frames`` may be any iterable (frames are consumed lazily).
    """
    sess = session or InferenceSession(model, policy, ratios)
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise SessionError("video has no frames") from None
    yield sess.start(first, first_mask)
    for frame in it:
        yield sess.step(frame)
