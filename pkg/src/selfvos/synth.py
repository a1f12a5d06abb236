"""Seeded moving-shape videos with exact masks.

Each clip has a smooth textured background and 1-3 rigid textured shapes
(ellipses or convex polygons) translating linearly with small jitter. Frames
get a global brightness modulation and mild pixel noise. The same geometry
routine produces both the rendered pixels and the masks, so masks are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import save_frame, save_mask
from .errors import ConfigError

MAX_TRIES = 500


@dataclass
class SynthConfig:
    clips: int = 25
    frames: int = 8
    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    speed_min: float = 0.5
    speed_max: float = 2.5
    brightness_jitter: float = 0.15
    noise: float = 0.16
    val_clips: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.size % 32:
            raise ConfigError(f"synthetic resolution {self.size} must be a multiple of 32")
        if not 1 <= self.min_shapes <= self.max_shapes <= 3:
            raise ConfigError("shape count per clip must satisfy 1 <= min <= max <= 3")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ConfigError("speed range must satisfy 0 <= min <= max")
        if self.frames < 1 or self.clips < 1 or not 0 <= self.val_clips <= self.clips:
            raise ConfigError("need >= 1 clip, >= 1 frame and 0 <= val_clips <= clips")


@dataclass
class Shape:
    kind: str  # "ellipse" or "polygon"
    radius: float  # bounding radius about the centre
    params: np.ndarray  # ellipse: (ry, rx, angle); polygon: vertices [n, 2] relative to centre
    colour: np.ndarray  # [3]
    texture: np.ndarray  # (freq_y, freq_x, phase, amplitude)
    centres: np.ndarray  # [T, 2] (row, col) per frame


def shape_mask(shape: Shape, t: int, size: int) -> np.ndarray:
    """Pixels whose centres lie inside the shape at frame t, [size, size] bool."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy = yy - shape.centres[t, 0]
    dx = xx - shape.centres[t, 1]
    if shape.kind == "ellipse":
        ry, rx, ang = shape.params
        c, s = np.cos(ang), np.sin(ang)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    verts = shape.params
    inside = np.ones((size, size), dtype=bool)
    n = len(verts)
    for i in range(n):
        (y0, x0), (y1, x1) = verts[i], verts[(i + 1) % n]
        # counter-clockwise vertices: interior is on the left of each edge
        inside &= (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0
    return inside


def _random_shape(rng: np.random.Generator, size: int) -> tuple[str, float, np.ndarray]:
    r = rng.uniform(0.12, 0.2) * size
    if rng.random() < 0.5:
        ry = r * rng.uniform(0.6, 1.0)
        return "ellipse", r, np.array([ry, r, rng.uniform(0, np.pi)])
    n = int(rng.integers(3, 7))
    # near-regular vertex spacing keeps polygons from becoming slivers
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi)
    angles += rng.uniform(-0.25, 0.25, size=n) * (2 * np.pi / n)
    radii = r * rng.uniform(0.8, 1.0, size=n)
    verts = np.stack([np.sin(angles) * radii, np.cos(angles) * radii], axis=1)
    # ensure counter-clockwise order in (row, col) coordinates
    area = 0.5 * np.sum(verts[:, 1] * np.roll(verts[:, 0], -1) - np.roll(verts[:, 1], -1) * verts[:, 0])
    if area < 0:
        verts = verts[::-1]
    return "polygon", r, verts


def _trajectory(rng, cfg: SynthConfig, radius: float) -> np.ndarray | None:
    lo, hi = radius + 1.0, cfg.size - radius - 1.0
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.sin(angle), np.cos(angle)])
    steps = np.arange(cfg.frames)[:, None]
    jitter = rng.normal(0, 0.3, size=(cfg.frames, 2))
    jitter[0] = 0
    path = steps * vel + jitter
    span_lo, span_hi = path.min(axis=0), path.max(axis=0)
    start_lo = lo - span_lo
    start_hi = hi - span_hi
    if np.any(start_lo > start_hi):
        return None
    start = rng.uniform(start_lo, start_hi)
    return start + path


def _background(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.85, size=3)
    img = np.repeat(base[:, None, None], size, axis=1).repeat(size, axis=2).copy()
    for _ in range(4):
        fy, fx = rng.uniform(-6, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12, size=3)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img += amp[:, None, None] * wave[None]
    return img


def make_clip(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, list[Shape]]:
    """Render one clip: frames [T, 3, S, S] in [0, 1] and labels [T, S, S]."""
    S, Tn = cfg.size, cfg.frames
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes: list[Shape] = []
    for _ in range(MAX_TRIES):
        if len(shapes) == n_shapes:
            break
        kind, radius, params = _random_shape(rng, S)
        centres = _trajectory(rng, cfg, radius)
        if centres is None:
            continue
        clash = any(np.min(np.linalg.norm(centres - o.centres, axis=1)) < radius + o.radius + 2 for o in shapes)
        if clash:
            continue
        colour = rng.uniform(0.0, 1.0, size=3)
        texture = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 2 * np.pi), rng.uniform(0.05, 0.15)])
        shapes.append(Shape(kind, radius, params, colour, texture, centres))
    if not shapes:
        raise ConfigError("could not place any shape; lower the speed range or raise the resolution")

    background = _background(rng, S)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    frames = np.empty((Tn, 3, S, S))
    labels = np.zeros((Tn, S, S), dtype=np.int64)
    brightness = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter, size=Tn)
    for t in range(Tn):
        img = background.copy()
        for label, sh in enumerate(shapes, start=1):
            m = shape_mask(sh, t, S)
            fy, fx, ph, amp = sh.texture
            local = np.sin(fy * (yy - sh.centres[t, 0]) * 2 + fx * (xx - sh.centres[t, 1]) * 2 + ph)
            pattern = sh.colour[:, None, None] + amp * local[None]
            img[:, m] = pattern[:, m]
            labels[t][m] = label
        img = img * brightness[t] + rng.normal(0, cfg.noise, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
    return frames.astype(np.float32), labels, shapes


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Write clips under ``out_dir`` in the Frames/Masks layout, plus splits.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    ids = [f"clip{i:03d}" for i in range(cfg.clips)]
    for clip_id in ids:
        frames, labels, _ = make_clip(rng, cfg)
        for t in range(cfg.frames):
            save_frame(out / "Frames" / clip_id / f"{t:05d}.png", frames[t])
            save_mask(out / "Masks" / clip_id / f"{t:05d}.png", labels[t])
    n_train = cfg.clips - cfg.val_clips
    splits = {"train": ids[:n_train], "val": ids[n_train:]}
    (out / "splits.json").write_text(json.dumps(splits, indent=2) + "\n")
    return out
