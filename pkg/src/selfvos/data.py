"""Frame/mask directory layouts, image I/O and resampling helpers.

Layout::

    <root>/Frames/<clip>/<NNNNN>.<img>
    <root>/Masks/<clip>/<NNNNN>.png      (optional)
    <root>/splits.json                   (optional, {"train": [...], "val": [...]})
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .tensor import bilinear_matrix

log = logging.getLogger(__name__)

FRAME_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
MASK_EXTS = {".png", ".bmp", ".tif", ".tiff", ".gif"}

# label colours for written masks; label 0 (background) is black
PALETTE = [0, 0, 0, 220, 60, 60, 60, 180, 75, 255, 225, 25, 0, 130, 200, 245, 130, 48, 145, 30, 180, 70, 240, 240]


@dataclass
class ClipRecord:
    clip_id: str
    frames: list[Path]
    masks: dict[int, Path] = field(default_factory=dict)  # frame number -> path
    frame_numbers: list[int] = field(default_factory=list)
    resolution: tuple[int, int] | None = None  # (H, W)

    def __len__(self) -> int:
        return len(self.frames)

    def mask_for(self, position: int) -> Path | None:
        return self.masks.get(self.frame_numbers[position])


@dataclass
class DatasetIndex:
    root: Path
    clips: list[ClipRecord]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clips)

    def clip(self, clip_id: str) -> ClipRecord:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)

    def subset(self, split: str | None) -> list[ClipRecord]:
        if split is None:
            return list(self.clips)
        if split not in self.splits:
            raise DataError(f"split {split!r} not defined under {self.root} (have {sorted(self.splits)})")
        wanted = set(self.splits[split])
        return [c for c in self.clips if c.clip_id in wanted]


def _numbered(directory: Path, exts: set[str]) -> list[tuple[int, Path]]:
    items = []
    for path in directory.iterdir():
        if not path.is_file() or path.suffix.lower() not in exts:
            continue
        if not path.stem.isdigit():
            log.warning("skipping non-numeric file name %s", path)
            continue
        items.append((int(path.stem), path))
    items.sort(key=lambda item: item[0])
    return items


def scan_dataset(root) -> DatasetIndex:
    """Index a Frames/Masks directory tree, sorted by clip id then frame number."""
    root = Path(root)
    frames_dir = root / "Frames"
    if not frames_dir.is_dir():
        raise DataError(f"no Frames directory under {root}")
    masks_dir = root / "Masks"
    clips = []
    for clip_dir in sorted(p for p in frames_dir.iterdir() if p.is_dir()):
        frames = _numbered(clip_dir, FRAME_EXTS)
        if not frames:
            log.warning("clip %s has no frames; skipped", clip_dir.name)
            continue
        masks: dict[int, Path] = {}
        if (masks_dir / clip_dir.name).is_dir():
            masks = dict(_numbered(masks_dir / clip_dir.name, MASK_EXTS))
            if masks and len(masks) != len(frames):
                log.warning("clip %s: %d frames but %d masks", clip_dir.name, len(frames), len(masks))
        with Image.open(frames[0][1]) as im:
            resolution = (im.height, im.width)
        clips.append(ClipRecord(
            clip_id=clip_dir.name,
            frames=[p for _, p in frames],
            masks=masks,
            frame_numbers=[n for n, _ in frames],
            resolution=resolution,
        ))
    if not clips:
        raise DataError(f"no clips found under {frames_dir}")
    splits = {}
    if (root / "splits.json").is_file():
        splits = {k: list(v) for k, v in json.loads((root / "splits.json").read_text()).items()}
    return DatasetIndex(root, clips, splits)


# ---------------------------------------------------------------------------
# image I/O


def load_frame(path) -> np.ndarray:
    """RGB frame as float32 [3, H, W] in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read frame {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_frames(clip: ClipRecord, start: int = 0, count: int | None = None) -> np.ndarray:
    paths = clip.frames[start:None if count is None else start + count]
    return np.stack([load_frame(p) for p in paths])


def save_frame(path, frame: np.ndarray) -> None:
    """Write a [3, H, W] float frame in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(frame).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Integer label map [H, W]; 0 is background.

    Palette and grayscale images give their stored values. RGB images are
    mapped colour-by-colour to labels in sorted colour order, black first.
    """
    try:
        with Image.open(path) as im:
            if im.mode in ("P", "L", "I", "I;16"):
                return np.asarray(im, dtype=np.int64)
            if im.mode == "1":
                return np.asarray(im, dtype=np.int64)
            rgb = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    flat = rgb.reshape(-1, 3)
    colours, inverse = np.unique(flat, axis=0, return_inverse=True)
    return inverse.reshape(rgb.shape[:2]).astype(np.int64)


def save_mask(path, labels: np.ndarray) -> None:
    """Write a label map as a palette PNG (labels must fit in 0..255)."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError(f"labels out of 0..255 range for {path}")
    im = Image.fromarray(labels.astype(np.uint8), "P")
    im.putpalette(PALETTE + [0] * (768 - len(PALETTE)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


# ---------------------------------------------------------------------------
# resampling


def resize_bilinear(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize over the last two axes (half-pixel centres)."""
    h, w = images.shape[-2:]
    if (h, w) == tuple(size):
        return images
    rh = bilinear_matrix(h, size[0], images.dtype)
    rw = bilinear_matrix(w, size[1], images.dtype)
    return rh @ images @ rw.T


def resize_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape[-2:]
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def scaled_size(h: int, w: int, lowest: int) -> tuple[int, int]:
    """Size with the shorter side equal to ``lowest``, aspect preserved."""
    if h <= w:
        return lowest, max(lowest, int(round(w * lowest / h)))
    return max(lowest, int(round(h * lowest / w))), lowest


def scale_lowest_side(frames: np.ndarray, lowest: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    return resize_bilinear(frames, scaled_size(h, w, lowest))


def area_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] weights averaging the source pixels each output cell covers."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, num_labels: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    n = int(labels.max()) + 1 if num_labels is None else num_labels
    return (np.arange(n)[:, None, None] == labels[None]).astype(np.float64)


def scan_masks(root) -> dict[str, dict[int, Path]]:
    """Masks under ``<root>/Masks``: clip id -> {frame number: path}."""
    masks_dir = Path(root) / "Masks"
    if not masks_dir.is_dir():
        raise DataError(f"no Masks directory under {root}")
    out = {}
    for clip_dir in sorted(p for p in masks_dir.iterdir() if p.is_dir()):
        found = dict(_numbered(clip_dir, MASK_EXTS))
        if found:
            out[clip_dir.name] = found
    if not out:
        raise DataError(f"no masks found under {masks_dir}")
    return out
