"""Anchors, affinities, pseudo-labels and the two self-supervised losses.

All feature vectors reaching this module are unit norm, so dot products are
cosine similarities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor


@dataclass
class LossWeights:
    tau: float = 0.07
    lam: float = 0.1
    include_positive_in_cv_denominator: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class AnchorSet:
    vectors: Tensor  # [K, d]
    positions: np.ndarray  # [K, 3] (frame, row, col)
    clip_ids: np.ndarray  # [K]
    grid_n: int

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ViewTransform:
    """Crop box in source pixels, resampled to the view size, optionally mirrored."""

    top: float
    left: float
    height: float
    width: float
    flip: bool = False

    @classmethod
    def identity(cls, height: float, width: float) -> "ViewTransform":
        return cls(0, 0, height, width, False)

    def inside(self, src_height: float, src_width: float) -> bool:
        return (self.top >= 0 and self.left >= 0 and self.height > 0 and self.width > 0
                and self.top + self.height <= src_height and self.left + self.width <= src_width)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")


def cell_edges(size: int, n: int) -> np.ndarray:
    return (np.arange(n + 1) * size) // n


def sample_anchors(z: Tensor, grid_n: int, rng: np.random.Generator, clip_ids=None) -> AnchorSet:
    """One anchor per grid cell per clip, drawn from reference embeddings [B, d, h, w]."""
    B, d, h, w = z.shape
    if grid_n < 1 or h < grid_n or w < grid_n:
        raise ConfigError(f"embedding grid {h}x{w} smaller than anchor grid {grid_n}x{grid_n}")
    if clip_ids is None:
        clip_ids = np.arange(B)
    clip_ids = np.asarray(clip_ids)
    re, ce = cell_edges(h, grid_n), cell_edges(w, grid_n)
    b_idx, rows, cols = [], [], []
    for b in range(B):
        for i in range(grid_n):
            for j in range(grid_n):
                b_idx.append(b)
                rows.append(rng.integers(re[i], re[i + 1]))
                cols.append(rng.integers(ce[j], ce[j + 1]))
    b_idx, rows, cols = np.array(b_idx), np.array(rows), np.array(cols)
    grid = T.transpose(z, (0, 2, 3, 1))
    vectors = grid[b_idx, rows, cols]
    positions = np.stack([np.zeros_like(rows), rows, cols], axis=1)
    return AnchorSet(vectors, positions, clip_ids[b_idx], grid_n)


def affinity(z: Tensor, anchors: AnchorSet, tau: float) -> Tensor:
    """Softmax over all anchors in the batch of z_i . k_j / tau, [M, K]."""
    _check_tau(tau)
    logits = T.matmul(z, T.transpose(anchors.vectors)) * (1.0 / tau)
    return T.softmax(logits, axis=1)


def pseudo_labels(z_hat, feature_clip_ids, anchors: AnchorSet, tau: float) -> np.ndarray:
    """Index of the highest-affinity anchor from the feature's own clip; no gradient."""
    _check_tau(tau)
    zh = z_hat.data if isinstance(z_hat, Tensor) else np.asarray(z_hat)
    feature_clip_ids = np.asarray(feature_clip_ids)
    logits = zh @ anchors.vectors.data.T / tau
    same = feature_clip_ids[:, None] == anchors.clip_ids[None, :]
    empty = ~same.any(axis=1)
    if empty.any():
        missing = sorted(set(feature_clip_ids[empty].tolist()))
        raise DataError(f"no anchors from clip(s) {missing}")
    # softmax is monotone in the logits; ranking logits avoids underflow ties at small tau
    return np.argmax(np.where(same, logits, -np.inf), axis=1)


def loss_cv(z: Tensor, z_hat: Tensor, tau: float, include_positive: bool = False) -> Tensor:
    """Cross-view consistency over aligned pairs (z_i, z_hat_i), summed over i.

    By default the denominator runs over l != i; ``include_positive`` gives
    the usual InfoNCE denominator over all l.
    """
    _check_tau(tau)
    if z.shape != z_hat.shape:
        raise ContractError(f"feature counts differ: {z.shape} vs {z_hat.shape}")
    R = z.shape[0]
    if R == 0 or (R < 2 and not include_positive):
        raise ContractError(f"cross-view loss needs at least 2 pairs without the positive term, got {R}")
    sims = T.matmul(z, T.transpose(z_hat)) * (1.0 / tau)
    diag = np.arange(R)
    positives = sims[diag, diag]
    if include_positive:
        denom = T.logsumexp(sims, axis=1)
    else:
        mask = np.zeros((R, R), dtype=sims.dtype)
        mask[diag, diag] = -np.inf
        denom = T.logsumexp(sims + Tensor(mask), axis=1)
    return T.sum_(denom - positives)


def align_cells(src: ViewTransform, dst: ViewTransform, view_size: tuple[int, int], stride: int) -> np.ndarray:
    """For each cell of the dst view grid, the flat index of the src cell seeing the same source point.

    Cells whose centre falls outside the src view get -1. Nearest-neighbour,
    row-major indices.
    """
    H, W = view_size
    h, w = H // stride, W // stride
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = (r + 0.5) * stride
    x = (c + 0.5) * stride
    if dst.flip:
        x = W - x
    sy = dst.top + y * dst.height / H
    sx = dst.left + x * dst.width / W
    y2 = (sy - src.top) * H / src.height
    x2 = (sx - src.left) * W / src.width
    if src.flip:
        x2 = W - x2
    r2 = np.floor(y2 / stride).astype(int)
    c2 = np.floor(x2 / stride).astype(int)
    valid = (y2 >= 0) & (x2 >= 0) & (r2 < h) & (c2 < w)
    return np.where(valid, r2 * w + c2, -1).reshape(-1)


def loss_st(q: Tensor, p: np.ndarray, transforms, ref_mask, view_size: tuple[int, int], stride: int) -> Tensor:
    """Space-time self-training: -sum log q~_i[p_i] over non-reference cells.

    ``q`` is [F, h*w, K] (main view), ``p`` is [F, h*w] (regularising view).
    ``transforms[f]`` is the (main, regularising) ViewTransform pair for frame
    f; q is warped onto p's grid before indexing.
    """
    F, N, K = q.shape
    p = np.asarray(p).reshape(F, -1)
    ref_mask = np.asarray(ref_mask, dtype=bool)
    rows, labels = [], []
    for f in range(F):
        if ref_mask[f]:
            continue
        main_t, reg_t = transforms[f]
        idx = align_cells(main_t, reg_t, view_size, stride)
        valid = idx >= 0
        rows.append(f * N + idx[valid])
        labels.append(p[f][valid])
    if not rows or sum(len(r) for r in rows) == 0:
        raise ContractError("space-time loss needs at least one aligned non-reference feature")
    rows = np.concatenate(rows)
    labels = np.concatenate(labels)
    picked = T.reshape(q, (F * N, K))[rows, labels]
    return -T.sum_(T.log(picked))


def total_loss(l_cv, l_st, lam: float):
    if not lam >= 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_cv + l_st * lam
