"""Frame/mask rasters on disk and model checkpoints.

Dataset layout written by ``gen`` and read by ``eval``::

    <root>/<sequence>/frames/00000.png   RGB, 8 bit
    <root>/<sequence>/masks/00000.png    single channel, pixel value = object id

Frames are ordered lexicographically by file name.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, model_digest

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class DataIOError(OSError):
    pass


def write_frame(path, frame) -> None:
    arr = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read frame {path}: {exc}") from exc
    return arr / 255.0


def write_mask(path, mask) -> None:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("mask labels must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1", "I;16", "I"):
                raise DataIOError(f"{path}: mask must be single-channel, got mode {im.mode}")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read mask {path}: {exc}") from exc
    if arr.max(initial=0) > 255:
        raise DataIOError(f"{path}: label values exceed 8 bits")
    return arr.astype(np.uint8)


def list_images(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise DataIOError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def iter_frames(directory):
    """Lazily read the frames of a directory in lexicographic order."""
    for p in list_images(directory):
        yield read_frame(p)


def write_sequence(root, name: str, frames, rasters) -> Path:
    seq = Path(root) / name
    (seq / "frames").mkdir(parents=True, exist_ok=True)
    (seq / "masks").mkdir(parents=True, exist_ok=True)
    for t, (f, r) in enumerate(zip(frames, rasters)):
        write_frame(seq / "frames" / f"{t:05d}.png", f)
        write_mask(seq / "masks" / f"{t:05d}.png", r)
    return seq


def write_masks(directory, rasters) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, r in enumerate(rasters):
        write_mask(d / f"{t:05d}.png", r)


def sequence_dirs(root) -> list:
    """Sequences under ``root``; ``root`` itself counts if it holds ``frames/``."""
    root = Path(root)
    if (root / "frames").is_dir():
        return [root]
    if not root.is_dir():
        raise DataIOError(f"video directory not found: {root}")
    seqs = sorted(p for p in root.iterdir() if (p / "frames").is_dir())
    if not seqs:
        raise DataIOError(f"no sequences (sub-directories with frames/) under {root}")
    return seqs


def read_sequence(seq_dir):
    """``(frames, rasters or None)`` for one sequence directory."""
    seq_dir = Path(seq_dir)
    frames = np.stack([read_frame(p) for p in list_images(seq_dir / "frames")])
    masks = None
    if (seq_dir / "masks").is_dir():
        paths = list_images(seq_dir / "masks")
        if paths:
            masks = np.stack([read_mask(p) for p in paths])
    return frames, masks


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(path, model, cfg: RunConfig, meta: dict | None = None) -> str:
    digest = model_digest(cfg.model)
    params = {name: p.data for name, p in model.named_parameters()}
    save_checkpoint(path, params, cfg.to_dict(), digest, meta)
    return digest


def load_model(path, dtype=None):
    """Return ``(model, cfg, header)`` rebuilt from a checkpoint."""
    from .autodiff import precision
    from .pipeline import VOSModel

    try:
        params, header = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataIOError(f"checkpoint not found: {path}") from exc
    try:
        cfg = RunConfig.from_dict(header["config"])
    except (ConfigError, KeyError) as exc:
        raise ConfigError(f"{path}: bad embedded config: {exc}") from exc
    fp = dtype or next(iter(params.values())).dtype
    with precision(np.dtype(fp).name):
        model = VOSModel(cfg.model, seed=0)
    model.load_state_dict(params)
    model.cast(np.dtype(fp))
    return model, cfg, header
