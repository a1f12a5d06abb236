"""Self-supervised training loop: two views, shared encoder, Adam.

One step: crop/flip a regularising view of every clip, embed both views with
the same parameters, draw anchors from the main view's reference frames,
score affinities and pseudo-labels, and apply one Adam update to the
combined cross-view + self-training loss.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .correspondence import (
    LossWeights,
    ViewTransform,
    affinity,
    align_cells,
    loss_cv,
    loss_st,
    pseudo_labels,
    sample_anchors,
    total_loss,
)
from .data import DatasetIndex, load_frames, resize_bilinear, scale_lowest_side
from .encoder import EncoderConfig, embed, init_params
from .errors import ConfigError, DataError, IncompatibleVersionError, IntegrityError, SelfVOSError
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"DTRK"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class NonFiniteLossError(SelfVOSError, FloatingPointError):
    """A loss term became NaN or infinite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    max_steps: int = 0  # 0: run all epochs
    clips_per_batch: int = 2
    frames_per_clip: int = 5
    crop_size: int = 256
    grid_n: int = 4
    reg_scale_min: float = 0.6
    flip_prob: float = 0.5
    grad_clip: float = 0.0  # global-norm clipping, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.clips_per_batch < 2:
            raise ConfigError("clips_per_batch must be >= 2 (inter-video terms need two clips)")
        if self.frames_per_clip < 2:
            raise ConfigError("frames_per_clip must be >= 2 (need non-reference frames)")
        if self.crop_size % 32:
            raise ConfigError(f"crop_size {self.crop_size} must be a multiple of 32")
        if not 0 < self.reg_scale_min <= 1:
            raise ConfigError("reg_scale_min must be in (0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(crop_size=64, clips_per_batch=2, frames_per_clip=5, max_steps=300)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam step, in place; ``step`` is the 1-based count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8,
                 state: AdamState | None = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = state or AdamState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.state.step += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_update(p.data, p.grad.astype(p.dtype, copy=False), self.state.m[name], self.state.v[name],
                        self.state.step, self.lr, self.beta1, self.beta2, self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# augmentation


def augment_views(clips: np.ndarray, crop_size: int, rng: np.random.Generator, reg_scale_min: float = 0.6,
                  flip_prob: float = 0.5, enabled: bool = True):
    """Main and regularising views of clips [B, T, 3, H, W].

    The main view is a random crop_size crop of each clip. The regularising
    view re-crops a random square inside the main crop, resizes it back to
    crop_size and mirrors it with probability ``flip_prob``. One transform
    pair per clip, shared by its frames.
    """
    B, Tn, _, H, W = clips.shape
    if H < crop_size or W < crop_size:
        raise DataError(f"frames {H}x{W} smaller than crop {crop_size}")
    v = np.empty((B, Tn, 3, crop_size, crop_size), dtype=clips.dtype)
    v_hat = np.empty_like(v)
    transforms = []
    for b in range(B):
        top = int(rng.integers(0, H - crop_size + 1))
        left = int(rng.integers(0, W - crop_size + 1))
        main = ViewTransform(top, left, crop_size, crop_size, False)
        v[b] = clips[b, :, :, top:top + crop_size, left:left + crop_size]
        if not enabled:
            v_hat[b] = v[b]
            transforms.append((main, main))
            continue
        side = int(rng.integers(int(np.ceil(reg_scale_min * crop_size)), crop_size + 1))
        t2 = top + int(rng.integers(0, crop_size - side + 1))
        l2 = left + int(rng.integers(0, crop_size - side + 1))
        flip = bool(rng.random() < flip_prob)
        crop = clips[b, :, :, t2:t2 + side, l2:l2 + side]
        crop = resize_bilinear(crop, (crop_size, crop_size))
        v_hat[b] = crop[..., ::-1] if flip else crop
        transforms.append((main, ViewTransform(t2, l2, side, side, flip)))
    return v, v_hat, transforms


# ---------------------------------------------------------------------------
# one step


def compute_losses(v: np.ndarray, v_hat: np.ndarray, transforms, params: dict[str, Tensor], enc: EncoderConfig,
                   weights: LossWeights, grid_n: int, rng: np.random.Generator):
    """Forward both views and return (l_cv, l_st, total) tensors."""
    B, Tn, _, S, _ = v.shape
    x = np.concatenate([v, v_hat]).reshape(2 * B * Tn, 3, S, S)
    z_all = embed(Tensor(x.astype(params["stage1.patch.weight"].dtype, copy=False)), enc, params)
    _, d, h, w = z_all.shape
    N = h * w
    tokens = T.reshape(T.transpose(z_all, (0, 2, 3, 1)), (2, B, Tn, N, d))
    z, z_hat = tokens[0], tokens[1]  # [B, T, N, d]
    stride = S // h

    ref_maps = T.transpose(T.reshape(z[:, 0], (B, h, w, d)), (0, 3, 1, 2))
    anchors = sample_anchors(ref_maps, grid_n, rng, clip_ids=np.arange(B))

    q = affinity(T.reshape(z, (B * Tn * N, d)), anchors, weights.tau)
    q = T.reshape(q, (B * Tn, N, len(anchors)))
    feature_clips = np.repeat(np.arange(B), Tn * N)
    p = pseudo_labels(z_hat.data.reshape(B * Tn * N, d), feature_clips, anchors, weights.tau).reshape(B * Tn, N)
    frame_transforms = [transforms[b] for b in range(B) for _ in range(Tn)]
    ref_mask = np.tile(np.arange(Tn) == 0, B)
    l_st = loss_st(q, p, frame_transforms, ref_mask, (S, S), stride)

    rows_main, rows_reg = [], []
    for b, (main_t, reg_t) in enumerate(transforms):
        idx = align_cells(reg_t, main_t, (S, S), stride)
        valid = np.flatnonzero(idx >= 0)
        for t in range(Tn):
            base = (b * Tn + t) * N
            rows_main.append(base + valid)
            rows_reg.append(base + idx[valid])
    flat_z = T.reshape(z, (B * Tn * N, d))
    flat_zh = T.reshape(z_hat, (B * Tn * N, d))
    l_cv = loss_cv(flat_z[np.concatenate(rows_main)], flat_zh[np.concatenate(rows_reg)], weights.tau,
                   weights.include_positive_in_cv_denominator)
    return l_cv, l_st, total_loss(l_cv, l_st, weights.lam)


def train_step(batch: np.ndarray, params: dict[str, Tensor], optimizer: Adam, enc: EncoderConfig, config: TrainConfig,
               weights: LossWeights, rng: np.random.Generator, augment: bool = True) -> dict[str, float]:
    v, v_hat, transforms = augment_views(batch, config.crop_size, rng, config.reg_scale_min, config.flip_prob, augment)
    l_cv, l_st, total = compute_losses(v, v_hat, transforms, params, enc, weights, config.grid_n, rng)
    for name, term in (("l_cv", l_cv), ("l_st", l_st), ("total", total)):
        if not np.isfinite(term.data):
            raise NonFiniteLossError(f"{name} is not finite ({float(term.data)})")
    optimizer.zero_grad()
    total.backward()
    if config.grad_clip > 0:
        clip_grad_norm(params, config.grad_clip)
    optimizer.step()
    return {"l_cv": float(l_cv.data), "l_st": float(l_st.data), "total": float(total.data)}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    epoch: int
    step: int
    rng_state: dict
    extra: dict = field(default_factory=dict)


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ConfigError(f"cannot store dtype {arr.dtype} for {name}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    meta = {
        "config": ckpt.config,
        "adam_step": ckpt.adam_step,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensor_count": len(tensors),
    }
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text]
    out += [_tensor_record(name, arr) for name, arr in tensors]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt metadata block: {exc}") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(int(meta["tensor_count"])):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in CODE_DTYPES:
            raise IntegrityError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dtype = CODE_DTYPES[code].newbyteorder("<")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        group, _, key = name.partition("/")
        if group not in groups:
            raise IntegrityError(f"unexpected tensor group in {name}")
        groups[group][key] = arr.astype(CODE_DTYPES[code])
    if r.pos != len(buf):
        raise IntegrityError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(version, meta["config"], groups["param"], groups["adam_m"], groups["adam_v"],
                      int(meta["adam_step"]), int(meta["epoch"]), int(meta["step"]), meta["rng_state"],
                      meta.get("extra", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = encode_checkpoint(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# loop


def load_training_clips(index: DatasetIndex, split: str | None, crop_size: int, min_frames: int) -> tuple[list[str], list[np.ndarray]]:
    """Frames of every usable clip, lowest side scaled to ``crop_size``."""
    ids, clips = [], []
    for rec in index.subset(split):
        if len(rec) < min_frames:
            log.warning("clip %s has %d frames (< %d); skipped", rec.clip_id, len(rec), min_frames)
            continue
        ids.append(rec.clip_id)
        clips.append(scale_lowest_side(load_frames(rec), crop_size).astype(np.float32))
    if len(clips) < 2:
        raise DataError(f"need at least 2 clips with >= {min_frames} frames, found {len(clips)}")
    return ids, clips


class Trainer:
    """Owns parameters, optimizer state and the sampling RNG for a training run."""

    def __init__(self, clips: list[np.ndarray], encoder_config: EncoderConfig, config: TrainConfig,
                 weights: LossWeights, params: dict[str, Tensor] | None = None, augment: bool = True):
        self.clips = clips
        self.encoder_config = encoder_config
        self.config = config
        self.weights = weights
        self.augment = augment
        self.rng = np.random.default_rng(config.seed)
        self.params = params if params is not None else init_params(encoder_config, seed=config.seed)
        self.optimizer = Adam(self.params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.epoch = 0
        self.step = 0
        self.order: list[int] = []
        self.cursor = 0

    # -- sampling -------------------------------------------------------
    def _next_indices(self) -> list[int]:
        B = self.config.clips_per_batch
        if len(self.clips) < B:
            raise DataError(f"{len(self.clips)} clips cannot fill a batch of {B}")
        if self.cursor + B > len(self.order):
            if self.order:
                self.epoch += 1
            self.order = self.rng.permutation(len(self.clips)).tolist()
            self.cursor = 0
        picked = self.order[self.cursor:self.cursor + B]
        self.cursor += B
        return picked

    def next_batch(self) -> np.ndarray:
        Tn = self.config.frames_per_clip
        out = []
        for i in self._next_indices():
            clip = self.clips[i]
            start = int(self.rng.integers(0, len(clip) - Tn + 1))
            out.append(clip[start:start + Tn])
        return np.stack(out)

    # -- running --------------------------------------------------------
    def total_steps(self) -> int:
        per_epoch = len(self.clips) // self.config.clips_per_batch
        by_epochs = self.config.epochs * per_epoch
        return min(by_epochs, self.config.max_steps) if self.config.max_steps else by_epochs

    def train_step(self) -> dict[str, float]:
        batch = self.next_batch()
        report = train_step(batch, self.params, self.optimizer, self.encoder_config, self.config, self.weights,
                            self.rng, self.augment)
        self.step += 1
        report["step"] = self.step
        return report

    def run(self, steps: int | None = None) -> Iterator[dict[str, float]]:
        target = self.total_steps() if steps is None else self.step + steps
        while self.step < target:
            yield self.train_step()

    # -- persistence ----------------------------------------------------
    def config_snapshot(self) -> dict:
        return {"encoder": asdict(self.encoder_config), "train": asdict(self.config), "loss": asdict(self.weights)}

    def checkpoint(self) -> Checkpoint:
        st = self.optimizer.state
        return Checkpoint(
            version=FORMAT_VERSION,
            config=self.config_snapshot(),
            params={k: p.data for k, p in self.params.items()},
            adam_m=dict(st.m),
            adam_v=dict(st.v),
            adam_step=st.step,
            epoch=self.epoch,
            step=self.step,
            rng_state=self.rng.bit_generator.state,
            extra={"order": self.order, "cursor": self.cursor, "augment": self.augment},
        )

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, ckpt: Checkpoint, clips: list[np.ndarray]) -> "Trainer":
        enc, cfg, weights = configs_from_snapshot(ckpt.config)
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
        trainer = cls(clips, enc, cfg, weights, params=params, augment=ckpt.extra.get("augment", True))
        trainer.optimizer.state = AdamState({k: v.copy() for k, v in ckpt.adam_m.items()},
                                            {k: v.copy() for k, v in ckpt.adam_v.items()}, ckpt.adam_step)
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.epoch, trainer.step = ckpt.epoch, ckpt.step
        trainer.order = list(ckpt.extra.get("order", []))
        trainer.cursor = int(ckpt.extra.get("cursor", 0))
        return trainer


def configs_from_snapshot(snapshot: dict) -> tuple[EncoderConfig, TrainConfig, LossWeights]:
    return EncoderConfig(**snapshot["encoder"]), TrainConfig(**snapshot["train"]), LossWeights(**snapshot["loss"])


def params_from_checkpoint(ckpt: Checkpoint) -> tuple[dict[str, Tensor], EncoderConfig]:
    enc, _, _ = configs_from_snapshot(ckpt.config)
    return {k: Tensor(v.copy()) for k, v in ckpt.params.items()}, enc
