"""All-in-one transformer layer with unidirectional hybrid attention.

Queries come from two frames: the reference frame (previous frame, carrying
its mask embedding in the values) and the current frame. Keys and values come
from three blocks: token memory, reference, current. Current-frame queries
always attend jointly over ``[memory; reference; current]`` with a single
softmax. What the reference queries see depends on the decoupling mode:

========  =====================================
mode      reference-query key blocks
========  =====================================
none      memory, reference, current
decoup1   memory, reference
decoup2   reference, current
both      reference
========  =====================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import GeometryError, LayerNorm, Linear, MLP, Module, Tensor, ops
from .config import ModelConfig

MODES = ("none", "decoup1", "decoup2", "both")
BLOCKS = ("mem", "ref", "self")

REF_KEY_BLOCKS = {
    "none": ("mem", "ref", "cur"),
    "decoup1": ("mem", "ref"),
    "decoup2": ("ref", "cur"),
    "both": ("ref",),
}


@dataclass
class LayerActivations:
    Q_ref: Tensor
    K_ref: Tensor
    V_ref: Tensor
    Q_t: Tensor
    K_t: Tensor
    V_t: Tensor
    K_M: Tensor
    V_M: Tensor

    @property
    def n_mem(self) -> int:
        return self.K_M.shape[-2]


@dataclass
class AttentionDecomposition:
    """Head-averaged attention mass of each current-frame query per key block."""

    w_mem: np.ndarray
    w_ref: np.ndarray
    w_self: np.ndarray

    @property
    def argmax_block(self) -> np.ndarray:
        stacked = np.stack([self.w_mem, self.w_ref, self.w_self], axis=-1)
        return np.asarray(BLOCKS)[stacked.argmax(axis=-1)]

    @classmethod
    def from_weights(cls, weights: np.ndarray, n_mem: int, n_ref: int) -> "AttentionDecomposition":
        """``weights``: (..., heads, Nq, n_mem + n_ref + N) softmax rows of current-frame queries."""
        w = weights.mean(axis=-3)
        return cls(
            w_mem=w[..., :n_mem].sum(axis=-1),
            w_ref=w[..., n_mem : n_mem + n_ref].sum(axis=-1),
            w_self=w[..., n_mem + n_ref :].sum(axis=-1),
        )

    def aggregates(self, select=None) -> dict:
        m, r, s = self.w_mem, self.w_ref, self.w_self
        if select is not None:
            m, r, s = m[select], r[select], s[select]
        labels = np.stack([m, r, s], axis=-1).argmax(axis=-1)
        return {
            "w_mem_mean": float(m.mean()) if m.size else 0.0,
            "w_ref_mean": float(r.mean()) if r.size else 0.0,
            "w_self_mean": float(s.mean()) if s.size else 0.0,
            "argmax_block_fraction": float((labels != 2).mean()) if labels.size else 0.0,
        }


@dataclass
class AttentionStats:
    decomp: AttentionDecomposition
    mem_mass: np.ndarray  # (B, n_mem) summed weight received by each memory token
    ref_mass: np.ndarray  # (B, N) summed weight received by each reference token (0 if excluded)


def inject_mask(acts: LayerActivations, m_ref, layer: int, cfg: ModelConfig) -> LayerActivations:
    """Add the mask embedding to the reference values on mask-injection layers."""
    if not 0 <= layer < cfg.L:
        raise ValueError(f"layer {layer} outside 0..{cfg.L - 1}")
    emb = getattr(m_ref, "embedding", m_ref)
    if emb.shape[-2] != acts.V_ref.shape[-2]:
        raise GeometryError(f"mask embedding has {emb.shape[-2]} tokens, reference has {acts.V_ref.shape[-2]}")
    if layer not in cfg.mask_add_layers:
        return acts
    return replace(acts, V_ref=ops.add(acts.V_ref, emb))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    d = c // heads
    y = ops.reshape(x, tuple(lead) + (n, heads, d))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ops.transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ops.reshape(ops.transpose(x, axes), tuple(lead) + (n, h * d))


def _ones(batch_shape, n, dtype):
    return np.ones(tuple(batch_shape) + (n,), dtype=dtype)


def _attend(q, keys, values, weights, scale):
    """Multi-head attention; ``weights`` is None or a (B, n_keys) key-weight Tensor."""
    k = ops.concat(keys, axis=-2) if len(keys) > 1 else keys[0]
    v = ops.concat(values, axis=-2) if len(values) > 1 else values[0]
    s = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), scale)
    if weights is None:
        w = ops.softmax(s, axis=-1)
    else:
        w = ops.weighted_softmax(s, ops.reshape(weights, weights.shape[:-1] + (1, 1, weights.shape[-1])))
    return ops.matmul(w, v), w


def hybrid_attention(acts: LayerActivations, heads: int, mode: str = "both",
                     ref_weight=None, mem_weight=None, ref_index=None, with_stats: bool = True):
    """Decoupled attention over the three key blocks.

    ``ref_weight`` (B, N) and ``mem_weight`` (B, n_M) are optional key weights
    (straight-through token selections during training). ``ref_index`` instead
    gathers the selected reference rows for the current-frame key block, the
    compute-saving inference path. Reference self-attention always sees all N
    reference tokens.

    Returns ``(a_ref, a_t, stats)`` with head-merged outputs of shape (B, N, C).
    """
    if mode not in MODES:
        raise ValueError(f"unknown decoupling mode {mode!r}")
    C = acts.Q_t.shape[-1]
    if C % heads:
        raise ValueError(f"heads={heads} does not divide C={C}")
    scale = 1.0 / math.sqrt(C // heads)
    dtype = acts.Q_t.dtype
    n_mem = acts.n_mem
    N = acts.K_ref.shape[-2]
    batch = acts.Q_t.shape[:-2]

    qr, kr, vr = (split_heads(t, heads) for t in (acts.Q_ref, acts.K_ref, acts.V_ref))
    qt, kt, vt = (split_heads(t, heads) for t in (acts.Q_t, acts.K_t, acts.V_t))
    km, vm = split_heads(acts.K_M, heads), split_heads(acts.V_M, heads)

    if mem_weight is not None:
        mem_weight = mem_weight if isinstance(mem_weight, Tensor) else Tensor(np.asarray(mem_weight, dtype=dtype))
    if ref_weight is not None:
        ref_weight = ref_weight if isinstance(ref_weight, Tensor) else Tensor(np.asarray(ref_weight, dtype=dtype))

    blocks = {"mem": (km, vm), "ref": (kr, vr), "cur": (kt, vt)}
    use_mem = n_mem > 0

    # reference queries
    names = [b for b in REF_KEY_BLOCKS[mode] if b != "mem" or use_mem]
    keys = [blocks[b][0] for b in names]
    vals = [blocks[b][1] for b in names]
    weights = None
    if "mem" in names and mem_weight is not None:
        parts = []
        for b in names:
            parts.append(mem_weight if b == "mem" else Tensor(_ones(batch, blocks[b][0].shape[-2], dtype)))
        weights = ops.concat(parts, axis=-1)
    a_ref, _ = _attend(qr, keys, vals, weights, scale)

    # current-frame queries: one softmax over [mem; ref; cur]
    if ref_index is not None:
        ref_index = np.asarray(ref_index, dtype=np.intp)
        kr_t = ops.gather_rows(kr, ref_index, axis=-2)
        vr_t = ops.gather_rows(vr, ref_index, axis=-2)
        n_ref = len(ref_index)
    else:
        kr_t, vr_t, n_ref = kr, vr, N
    keys, vals, parts = [], [], []
    if use_mem:
        keys.append(km)
        vals.append(vm)
        parts.append(mem_weight if mem_weight is not None else Tensor(_ones(batch, n_mem, dtype)))
    if n_ref:
        keys.append(kr_t)
        vals.append(vr_t)
        parts.append(ref_weight if (ref_weight is not None and ref_index is None) else Tensor(_ones(batch, n_ref, dtype)))
    keys.append(kt)
    vals.append(vt)
    parts.append(Tensor(_ones(batch, kt.shape[-2], dtype)))
    weighted = (use_mem and mem_weight is not None) or (ref_weight is not None and ref_index is None)
    w_all = ops.concat(parts, axis=-1) if weighted else None
    a_t, wt = _attend(qt, keys, vals, w_all, scale)

    stats = None
    if with_stats:
        W = wt.data
        decomp = AttentionDecomposition.from_weights(W, n_mem, n_ref)
        received = W.sum(axis=(-3, -2))  # (B, n_keys)
        mem_mass = received[..., :n_mem]
        ref_mass = np.zeros(tuple(batch) + (N,), dtype=np.float64)
        got = received[..., n_mem : n_mem + n_ref]
        if ref_index is not None:
            ref_mass[..., ref_index] = got
        else:
            ref_mass[...] = got
        stats = AttentionStats(decomp, mem_mass, ref_mass)
    return merge_heads(a_ref), merge_heads(a_t), stats


def uni_hybrid_attention(acts: LayerActivations, heads: int, **kw):
    """Reference attends to itself only; current frame attends to memory, reference and itself."""
    a_ref, a_t, stats = hybrid_attention(acts, heads, mode="both", **kw)
    return a_ref, a_t, stats.decomp if stats is not None else None


def decoupling_variant(acts: LayerActivations, mode: str, heads: int = 1, **kw):
    a_ref, a_t, stats = hybrid_attention(acts, heads, mode=mode, **kw)
    return a_ref, a_t, stats.decomp if stats is not None else None


# ---------------------------------------------------------------------------
# Reference implementation: joint attention with explicit -inf masks
# ---------------------------------------------------------------------------

def mode_allowed(mode: str, n_mem: int, N: int) -> np.ndarray:
    """Boolean (2N, n_mem + 2N) matrix of permitted query/key pairs for the joint form."""
    if mode not in MODES:
        raise ValueError(f"unknown decoupling mode {mode!r}")
    allowed = np.ones((2 * N, n_mem + 2 * N), dtype=bool)
    ref_rows = slice(0, N)
    mem_cols = slice(0, n_mem)
    cur_cols = slice(n_mem + N, n_mem + 2 * N)
    if mode in ("decoup1", "both"):
        allowed[ref_rows, cur_cols] = False
    if mode in ("decoup2", "both"):
        allowed[ref_rows, mem_cols] = False
    return allowed


def full_attention_oracle(acts: LayerActivations, heads: int = 1, allowed=None):
    """Naive joint attention ``softmax([Q_ref;Q_t][K_M;K_ref;K_t]^T / sqrt(d_k)) [V_M;V_ref;V_t]``.

    Plain numpy, one head at a time, so it shares no code with the fused path.
    ``allowed`` optionally masks query/key pairs to -inf before the softmax.
    Works on unbatched (N, C) activations.
    """
    def arr(t):
        return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)

    Q = np.concatenate([arr(acts.Q_ref), arr(acts.Q_t)], axis=0)
    K = np.concatenate([arr(acts.K_M), arr(acts.K_ref), arr(acts.K_t)], axis=0)
    V = np.concatenate([arr(acts.V_M), arr(acts.V_ref), arr(acts.V_t)], axis=0)
    N = arr(acts.Q_ref).shape[0]
    C = Q.shape[1]
    d = C // heads
    out = np.zeros((2 * N, C))
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        logits = Q[:, cols] @ K[:, cols].T / math.sqrt(d)
        if allowed is not None:
            logits = np.where(allowed, logits, -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        out[:, cols] = (e / e.sum(axis=1, keepdims=True)) @ V[:, cols]
    return out[:N], out[N:]


def blockwise_current_output(acts: LayerActivations, heads: int = 1):
    """Recompose ``a_t = W_tM V_M + W_tref V_ref + W_tt V_t`` from explicit weight blocks."""
    def arr(t):
        return np.asarray(t.data, dtype=np.float64)

    Qt, Km, Kr, Kt = arr(acts.Q_t), arr(acts.K_M), arr(acts.K_ref), arr(acts.K_t)
    Vm, Vr, Vt = arr(acts.V_M), arr(acts.V_ref), arr(acts.V_t)
    n_mem, N = Km.shape[0], Kr.shape[0]
    C = Qt.shape[1]
    d = C // heads
    out = np.zeros_like(Qt)
    blocks = []
    for h in range(heads):
        c = slice(h * d, (h + 1) * d)
        s = Qt[:, c] @ np.concatenate([Km[:, c], Kr[:, c], Kt[:, c]]).T / math.sqrt(d)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        W_m, W_r, W_t = w[:, :n_mem], w[:, n_mem : n_mem + N], w[:, n_mem + N :]
        out[:, c] = W_m @ Vm[:, c] + W_r @ Vr[:, c] + W_t @ Vt[:, c]
        blocks.append((W_m, W_r, W_t))
    return out, blocks


# ---------------------------------------------------------------------------
# Transformer layer
# ---------------------------------------------------------------------------

@dataclass
class LayerOutput:
    e_ref: Tensor
    e_t: Tensor
    K_ref: Tensor  # memory candidates for this layer
    V_ref: Tensor  # mask-injected
    stats: AttentionStats | None


class TransformerLayer(Module):
    """Pre-norm block: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))`` over ``[e_ref; e_t]``."""

    def __init__(self, cfg: ModelConfig, index: int, rng: np.random.Generator):
        self.cfg = cfg
        self.index = index
        C = cfg.C
        self.ln1 = LayerNorm(C)
        self.qkv = Linear(C, 3 * C, rng)
        self.proj = Linear(C, C, rng)
        self.ln2 = LayerNorm(C)
        self.mlp = MLP(C, cfg.mlp_ratio * C, C, rng)

    def project(self, e_ref: Tensor, e_t: Tensor, m_ref, K_M: Tensor, V_M: Tensor) -> LayerActivations:
        N = e_ref.shape[-2]
        C = self.cfg.C
        h = self.ln1(ops.concat([e_ref, e_t], axis=-2))
        qkv = self.qkv(h)
        q, k, v = ops.split(qkv, (C, C, C), axis=-1)
        q_ref, q_t = ops.split(q, (N, N), axis=-2)
        k_ref, k_t = ops.split(k, (N, N), axis=-2)
        v_ref, v_t = ops.split(v, (N, N), axis=-2)
        acts = LayerActivations(q_ref, k_ref, v_ref, q_t, k_t, v_t, K_M, V_M)
        return inject_mask(acts, m_ref, self.index, self.cfg)

    def __call__(self, e_ref: Tensor, e_t: Tensor, m_ref, K_M: Tensor, V_M: Tensor,
                 ref_weight=None, mem_weight=None, ref_index=None, with_stats: bool = True) -> LayerOutput:
        acts = self.project(e_ref, e_t, m_ref, K_M, V_M)
        a_ref, a_t, stats = hybrid_attention(
            acts, self.cfg.heads, self.cfg.decoupling,
            ref_weight=ref_weight, mem_weight=mem_weight, ref_index=ref_index, with_stats=with_stats,
        )
        x = ops.concat([e_ref, e_t], axis=-2)
        x = ops.add(x, self.proj(ops.concat([a_ref, a_t], axis=-2)))
        x = ops.add(x, self.mlp(self.ln2(x)))
        N = e_ref.shape[-2]
        out_ref, out_t = ops.split(x, (N, N), axis=-2)
        return LayerOutput(out_ref, out_t, acts.K_ref, acts.V_ref, stats)


def empty_memory(batch_shape, C: int, dtype) -> Tensor:
    return Tensor(np.zeros(tuple(batch_shape) + (0, C), dtype=dtype))
