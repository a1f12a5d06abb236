"""Label propagation through a video with kNN-softmax over a rolling context.

Frame 0's embedding and one-hot mask stay in the context for the whole
video; later (embedding, mask) pairs are kept FIFO up to ``capacity``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import area_matrix, one_hot, resize_bilinear
from .encoder import EmbeddingMap, EncoderConfig, embedding_maps
from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import bilinear_matrix


@dataclass
class PropagationConfig:
    k: int = 10
    radius: int = 6
    temperature: float = 0.07
    capacity: int = 8

    def __post_init__(self):
        if self.k < 1 or self.radius < 0 or self.capacity < 1 or not self.temperature > 0:
            raise ConfigError(f"invalid propagation config {self}")


@dataclass
class ContextBuffer:
    """Permanent first entry plus up to ``capacity`` most recent entries."""

    capacity: int
    first: tuple[EmbeddingMap, np.ndarray] | None = None
    recent: list[tuple[EmbeddingMap, np.ndarray]] = field(default_factory=list)

    def add(self, emb: EmbeddingMap, mask: np.ndarray) -> None:
        if self.first is None:
            self.first = (emb, mask)
            return
        self.recent.append((emb, mask))
        if len(self.recent) > self.capacity:
            self.recent.pop(0)

    @property
    def entries(self) -> list[tuple[EmbeddingMap, np.ndarray]]:
        return ([self.first] if self.first is not None else []) + self.recent

    def __len__(self) -> int:
        return len(self.entries)


def _window_mask(h: int, w: int, radius: int) -> np.ndarray:
    """[h*w, h*w] True where two cells are within Chebyshev distance ``radius``."""
    r, c = np.divmod(np.arange(h * w), w)
    return (np.abs(r[:, None] - r[None, :]) <= radius) & (np.abs(c[:, None] - c[None, :]) <= radius)


def correlate_local(query: np.ndarray, context: list[np.ndarray], radius: int) -> np.ndarray:
    """Cosine similarities from each query cell to context cells in its window.

    ``query`` is [h, w, d]; each context grid is [h, w, d]. Returns
    [h*w, n_ctx*h*w] with -inf outside the window; candidate index
    ``e*h*w + cell`` refers to context entry e.
    """
    h, w, d = query.shape
    for g in context:
        if g.shape != query.shape:
            raise ShapeError(f"context grid {g.shape} does not match query {query.shape}")
    if not context:
        raise ContractError("context is empty")
    q = query.reshape(h * w, d)
    keys = np.concatenate([g.reshape(h * w, d) for g in context], axis=0)
    sims = q @ keys.T
    window = np.tile(_window_mask(h, w, radius), (1, len(context)))
    return np.where(window, sims, -np.inf)


def knn_softmax(affinities: np.ndarray, k: int, temperature: float) -> np.ndarray:
    """Keep the top-k finite scores per row and softmax over them; others get 0.

    Ties go to the lower candidate index.
    """
    if affinities.shape[-1] == 0:
        raise ContractError("no candidates")
    valid = np.isfinite(affinities)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("a query has no candidates within its window")
    kk = min(k, affinities.shape[1])
    # stable sort on negated scores keeps the lower index first among equals
    order = np.argsort(-affinities, axis=1, kind="stable")[:, :kk]
    top = np.take_along_axis(affinities, order, axis=1)
    keep = np.isfinite(top)
    logits = np.where(keep, top / temperature, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(logits), 0.0)
    weights = np.zeros_like(affinities, dtype=np.float64)
    np.put_along_axis(weights, order, e / e.sum(axis=1, keepdims=True), axis=1)
    return weights


def propagate_frame(query: EmbeddingMap, context: ContextBuffer, config: PropagationConfig) -> np.ndarray:
    """Mask distribution [C, h, w] for ``query`` from the context entries."""
    entries = context.entries
    if not entries:
        raise ContractError("context is empty")
    h, w = query.hw
    aff = correlate_local(query.grid, [e.grid for e, _ in entries], config.radius)
    weights = knn_softmax(aff, config.k, config.temperature)
    masks = np.concatenate([m.reshape(m.shape[0], h * w) for _, m in entries], axis=1)  # [C, n*h*w]
    out = masks @ weights.T
    out /= out.sum(axis=0, keepdims=True)
    return out.reshape(-1, h, w)


def downsample_mask(labels: np.ndarray, grid: tuple[int, int], num_labels: int | None = None) -> np.ndarray:
    """One-hot of a label map, area-averaged to ``grid`` and renormalized."""
    oh = one_hot(labels, num_labels)
    H, W = labels.shape
    ah, aw = area_matrix(H, grid[0]), area_matrix(W, grid[1])
    out = ah @ oh @ aw.T
    return out / out.sum(axis=0, keepdims=True)


def inference_size(H: int, W: int, multiple: int = 32) -> tuple[int, int]:
    return max(multiple, int(round(H / multiple)) * multiple), max(multiple, int(round(W / multiple)) * multiple)


@dataclass
class PropagationResult:
    soft: np.ndarray  # [T, C, H, W] per-pixel distributions at source resolution
    labels: np.ndarray  # [T, H, W] argmax label maps
    grid_soft: list[np.ndarray]  # per-frame [C, h, w] on the embedding grid


def propagate_embeddings(embeddings: list[EmbeddingMap], first_labels: np.ndarray, config: PropagationConfig,
                         num_labels: int | None = None) -> list[np.ndarray]:
    """Grid-resolution mask distributions for every frame, starting from frame 0's labels."""
    h, w = embeddings[0].hw
    m0 = downsample_mask(first_labels, (h, w), num_labels)
    ctx = ContextBuffer(config.capacity)
    ctx.add(embeddings[0], m0)
    out = [m0]
    for emb in embeddings[1:]:
        m = propagate_frame(emb, ctx, config)
        ctx.add(emb, m)
        out.append(m)
    return out


def propagate_video(frames: np.ndarray, first_mask: np.ndarray, params, encoder_config: EncoderConfig,
                    config: PropagationConfig, clip_id: str = "") -> PropagationResult:
    """Propagate ``first_mask`` ([H, W] labels) through frames [T, 3, H, W]."""
    T_, _, H, W = frames.shape
    if first_mask.shape != (H, W):
        raise DataError(f"first mask {first_mask.shape} does not match frame size {(H, W)}")
    num_labels = int(first_mask.max()) + 1
    if T_ == 1:
        soft = one_hot(first_mask, num_labels)[None]
        return PropagationResult(soft, first_mask[None].copy(), [soft[0]])
    size = inference_size(H, W)
    work = resize_bilinear(frames, size) if size != (H, W) else frames
    embeddings = embedding_maps(work, encoder_config, params, clip_id=clip_id)
    grids = propagate_embeddings(embeddings, first_mask, config, num_labels)
    h, w = grids[0].shape[1:]
    rh, rw = bilinear_matrix(h, H), bilinear_matrix(w, W)
    soft = np.stack([rh @ g @ rw.T for g in grids])
    soft[0] = one_hot(first_mask, num_labels)
    labels = soft.argmax(axis=1)
    return PropagationResult(soft, labels, grids)
