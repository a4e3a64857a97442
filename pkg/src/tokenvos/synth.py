"""Moving-shapes videos with pixel-exact ground truth.

Objects translate at constant velocity and bounce off the frame border.
Higher object ids are painted on top where shapes overlap. Each sequence gets a
random background colour and distinct random object colours.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import SynthConfig


class PlacementError(ValueError):
    pass


@dataclass
class ShapeTrack:
    kind: str
    size: int
    center: np.ndarray  # (x, y) in pixel units, at frame 0
    velocity: np.ndarray
    color: np.ndarray


def shape_mask(kind: str, size: int, cx: float, cy: float, H: int, W: int) -> np.ndarray:
    """Rasterise one shape; pixel (y, x) is covered if its centre lies inside."""
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    half = size / 2.0
    if kind == "square":
        return (np.abs(xs - cx) < half) & (np.abs(ys - cy) < half)
    if kind == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half * half
    if kind == "triangle":
        # apex up, base at the bottom of the bounding box
        top, bottom = cy - half, cy + half
        inside_y = (ys >= top) & (ys < bottom)
        frac = np.clip((ys - top) / size, 0.0, 1.0)
        return inside_y & (np.abs(xs - cx) <= frac * half)
    raise ValueError(f"unknown shape {kind!r}")


def _advance(pos: float, vel: float, half: float, limit: float):
    pos += vel
    lo, hi = half, limit - half
    for _ in range(4):
        if pos < lo:
            pos = 2 * lo - pos
            vel = -vel
        elif pos > hi:
            pos = 2 * hi - pos
            vel = -vel
        else:
            break
    return pos, vel


def _pick_colors(rng: np.random.Generator, n: int, gap: float):
    colors = []
    for _ in range(1000):
        c = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(c - o) >= gap for o in colors):
            colors.append(c)
            if len(colors) == n:
                return colors
    raise PlacementError(f"could not draw {n} colours {gap} apart")


def make_tracks(cfg: SynthConfig, rng: np.random.Generator) -> tuple:
    colors = _pick_colors(rng, cfg.num_objects + 1, cfg.min_color_gap)
    background, fills = colors[0], colors[1:]
    tracks = []
    for k in range(cfg.num_objects):
        size = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        half = size / 2.0
        if 2 * half > min(cfg.H, cfg.W):
            raise PlacementError(f"object of size {size} does not fit a {cfg.H}x{cfg.W} frame")
        cx = rng.uniform(half, cfg.W - half)
        cy = rng.uniform(half, cfg.H - half)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        angle = rng.uniform(0, 2 * np.pi)
        tracks.append(ShapeTrack(
            kind=str(rng.choice(cfg.shapes)), size=size, center=np.array([cx, cy]),
            velocity=speed * np.array([np.cos(angle), np.sin(angle)]), color=fills[k],
        ))
    return background, tracks


def render(cfg: SynthConfig, background, tracks, rng: np.random.Generator | None = None,
           return_overlap: bool = False):
    """Return ``frames`` (T, H, W, 3) float in [0, 1] and ``rasters`` (T, H, W) uint8.

    With ``return_overlap`` a third value reports whether any two shapes ever overlap.
    """
    T, H, W = cfg.frames, cfg.H, cfg.W
    frames = np.empty((T, H, W, 3))
    rasters = np.zeros((T, H, W), dtype=np.uint8)
    overlap = False
    pos = [t.center.astype(float).copy() for t in tracks]
    vel = [t.velocity.astype(float).copy() for t in tracks]
    for f in range(T):
        img = np.broadcast_to(background, (H, W, 3)).copy()
        lab = np.zeros((H, W), dtype=np.uint8)
        for k, tr in enumerate(tracks):
            m = shape_mask(tr.kind, tr.size, pos[k][0], pos[k][1], H, W)
            overlap = overlap or bool((lab[m] > 0).any())
            img[m] = tr.color
            lab[m] = k + 1
        if cfg.noise > 0 and rng is not None:
            img = np.clip(img + rng.normal(0, cfg.noise, img.shape), 0.0, 1.0)
        frames[f] = img
        rasters[f] = lab
        for k, tr in enumerate(tracks):
            half = tr.size / 2.0
            pos[k][0], vel[k][0] = _advance(pos[k][0], vel[k][0], half, W)
            pos[k][1], vel[k][1] = _advance(pos[k][1], vel[k][1], half, H)
    if return_overlap:
        return frames, rasters, overlap
    return frames, rasters


def gen_sequence(cfg: SynthConfig, seed: int | None = None):
    """Generate ``(frames, rasters)`` deterministically from the config seed (or ``seed``)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    for _ in range(200):
        background, tracks = make_tracks(cfg, rng)
        frames, rasters, overlap = render(cfg, background, tracks, rng, return_overlap=True)
        if _acceptable(cfg, rasters) and (cfg.occlusion or not overlap):
            return frames, rasters
    raise PlacementError("could not place objects satisfying the occlusion/visibility constraints")


def _acceptable(cfg: SynthConfig, rasters: np.ndarray) -> bool:
    # every object must be visible in frame 0
    first = rasters[0]
    return all((first == k).any() for k in range(1, cfg.num_objects + 1))


def gen_dataset(cfg: SynthConfig, count: int, seed: int):
    """``count`` sequences with per-sequence seeds derived from ``seed``."""
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [gen_sequence(cfg, int(s.generate_state(1)[0])) for s in seqs]


def with_frames(cfg: SynthConfig, frames: int) -> SynthConfig:
    return replace(cfg, frames=frames)
