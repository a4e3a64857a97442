"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

import numpy as np


def numerical_grad(fn, tensor, h: float = 1e-6, indices=None) -> np.ndarray:
    """d fn() / d tensor.data[idx] by central differences.

    ``fn`` is re-evaluated with ``tensor.data`` perturbed in place and must
    return a float. With ``indices`` (iterable of flat indices) only those
    entries are computed; the result then has one value per index.
    """
    flat = tensor.data.reshape(-1)
    idxs = range(flat.size) if indices is None else list(indices)
    out = np.zeros(len(idxs))
    for k, i in enumerate(idxs):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    if indices is None:
        return out.reshape(tensor.shape)
    return out


def rel_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
