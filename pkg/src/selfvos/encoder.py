"""Serial-block conv-attentional encoder and the MLP projection head.

Each stage is a strided patch-embedding convolution followed by pre-norm
transformer blocks. The attention inside a block is factorized (softmax over
tokens on the keys, so cost is linear in the token count) plus a depthwise
3x3 convolutional relative-position term. The projection head maps the
tapped stage to unit-norm embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

PATCH_KERNELS = (4, 2, 2, 2)
STAGE_STRIDES = (4, 8, 16, 32)


class InputSizeError(ShapeError):
    """Input spatial size is not a multiple of the required stride."""


@dataclass
class EncoderConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    stage_depths: list[int] = field(default_factory=lambda: [1, 1, 2, 1])
    heads: int = 2
    embed_stage: int = 3
    proj_dim: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.stage_depths = [int(d) for d in self.stage_depths]
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("stage_channels and stage_depths need exactly 4 entries")
        if self.embed_stage not in (1, 2, 3, 4):
            raise ConfigError(f"embed_stage must be in 1..4, got {self.embed_stage}")
        for c in self.stage_channels:
            if c % self.heads:
                raise ConfigError(f"stage width {c} not divisible by heads={self.heads}")

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        """Widths ending at 512 so the head maps 512 -> 128 channels."""
        return cls(stage_channels=[64, 128, 320, 512], stage_depths=[2, 2, 2, 2], heads=8, embed_stage=4, proj_dim=128)

    @property
    def embed_channels(self) -> int:
        return self.stage_channels[self.embed_stage - 1]

    @property
    def embed_stride(self) -> int:
        return STAGE_STRIDES[self.embed_stage - 1]


@dataclass
class EmbeddingMap:
    """Unit-norm embeddings of one frame laid out on the feature grid."""

    clip_id: str
    frame_index: int
    grid: np.ndarray  # [h, w, d]
    stride: int

    @property
    def hw(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _conv_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Random parameters for all four stages plus the projection head."""
    rng = np.random.default_rng(seed)
    raw: dict[str, np.ndarray] = {}
    prev = 3
    for s, (c, depth) in enumerate(zip(config.stage_channels, config.stage_depths), start=1):
        k = PATCH_KERNELS[s - 1]
        raw[f"stage{s}.patch.weight"] = _conv_uniform(rng, (c, prev, k, k))
        raw[f"stage{s}.patch.bias"] = np.zeros(c)
        raw[f"stage{s}.patch_norm.gamma"] = np.ones(c)
        raw[f"stage{s}.patch_norm.beta"] = np.zeros(c)
        hidden = c * config.mlp_ratio
        for b in range(depth):
            p = f"stage{s}.block{b}"
            raw[f"{p}.norm1.gamma"] = np.ones(c)
            raw[f"{p}.norm1.beta"] = np.zeros(c)
            raw[f"{p}.attn.qkv.weight"] = _trunc_normal(rng, (c, 3 * c), 0.02)
            raw[f"{p}.attn.qkv.bias"] = np.zeros(3 * c)
            raw[f"{p}.attn.crpe.weight"] = _conv_uniform(rng, (c, 1, 3, 3))
            raw[f"{p}.attn.proj.weight"] = _trunc_normal(rng, (c, c), 0.02)
            raw[f"{p}.attn.proj.bias"] = np.zeros(c)
            raw[f"{p}.norm2.gamma"] = np.ones(c)
            raw[f"{p}.norm2.beta"] = np.zeros(c)
            raw[f"{p}.mlp.fc1.weight"] = _trunc_normal(rng, (c, hidden), 0.02)
            raw[f"{p}.mlp.fc1.bias"] = np.zeros(hidden)
            raw[f"{p}.mlp.fc2.weight"] = _trunc_normal(rng, (hidden, c), 0.02)
            raw[f"{p}.mlp.fc2.bias"] = np.zeros(c)
        prev = c
    n_in = config.embed_channels
    raw["head.conv1.weight"] = _conv_uniform(rng, (n_in, n_in, 1, 1))
    raw["head.conv1.bias"] = np.zeros(n_in)
    raw["head.ln1.gamma"] = np.ones(n_in)
    raw["head.ln1.beta"] = np.zeros(n_in)
    raw["head.conv2.weight"] = _conv_uniform(rng, (config.proj_dim, n_in, 1, 1))
    raw["head.conv2.bias"] = np.zeros(config.proj_dim)
    return {name: Tensor(arr.astype(dtype), requires_grad=True) for name, arr in raw.items()}


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return T.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


# ---------------------------------------------------------------------------
# building blocks


def check_input_size(h: int, w: int, multiple: int = 32) -> None:
    if h % multiple or w % multiple:
        raise InputSizeError(f"input size {h}x{w} must be a multiple of {multiple}")


def patch_embed(x: Tensor, params: dict[str, Tensor], stage: int) -> tuple[Tensor, tuple[int, int]]:
    """Downsample a [B, C, H, W] map into stage tokens [B, h*w, C_stage]."""
    k = PATCH_KERNELS[stage - 1]
    _, _, H, W = x.shape
    if H % k or W % k:
        raise InputSizeError(f"stage {stage} input {H}x{W} must be a multiple of {k}")
    y = T.conv2d(x, params[f"stage{stage}.patch.weight"], params[f"stage{stage}.patch.bias"], stride=k)
    B, C, h, w = y.shape
    tokens = T.transpose(T.reshape(y, (B, C, h * w)), (0, 2, 1))
    tokens = T.layer_norm(tokens, params[f"stage{stage}.patch_norm.gamma"], params[f"stage{stage}.patch_norm.beta"])
    return tokens, (h, w)


def conv_attention(tokens: Tensor, params: dict[str, Tensor], heads: int, hw: tuple[int, int]) -> Tensor:
    """Factorized attention plus convolutional relative position, [B, N, C] -> [B, N, C].

    ``params`` holds ``qkv.weight``/``qkv.bias`` and ``crpe.weight`` (depthwise
    3x3, no bias). The output projection is applied by the caller.
    """
    B, N, C = tokens.shape
    h, w = hw
    if h * w != N:
        raise ShapeError(f"{N} tokens do not factor into grid {h}x{w}")
    d = C // heads
    qkv = _linear(tokens, params, "qkv")
    qkv = T.transpose(T.reshape(qkv, (B, N, 3, heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # [B, heads, N, d]
    k_soft = T.softmax(k, axis=2)
    context = T.matmul(T.transpose(k_soft, (0, 1, 3, 2)), v)  # [B, heads, d, d]
    factor = T.matmul(q * (d ** -0.5), context)
    v_img = T.reshape(T.transpose(v, (0, 1, 3, 2)), (B, C, h, w))
    conv_v = T.conv2d(v_img, params["crpe.weight"], None, stride=1, pad=1, groups=C)
    conv_v = T.transpose(T.reshape(conv_v, (B, heads, d, N)), (0, 1, 3, 2))
    out = factor + q * conv_v
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, C))


def serial_block(x: Tensor, params: dict[str, Tensor], heads: int, hw: tuple[int, int]) -> Tensor:
    y = T.layer_norm(x, params["norm1.gamma"], params["norm1.beta"])
    y = conv_attention(y, _sub(params, "attn"), heads, hw)
    x = x + _linear(y, params, "attn.proj")
    y = T.layer_norm(x, params["norm2.gamma"], params["norm2.beta"])
    y = _linear(T.relu(_linear(y, params, "mlp.fc1")), params, "mlp.fc2")
    return x + y


def _tokens_to_map(tokens: Tensor, hw: tuple[int, int]) -> Tensor:
    B, N, C = tokens.shape
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, C, hw[0], hw[1]))


def encode_pyramid(frames: Tensor, config: EncoderConfig, params: dict[str, Tensor], upto: int = 4) -> list[Tensor]:
    """Feature maps F_1..F_upto, each [B, C_s, H / stride_s, W / stride_s]."""
    _, _, H, W = frames.shape
    check_input_size(H, W, STAGE_STRIDES[upto - 1])
    maps = []
    x = frames
    for s in range(1, upto + 1):
        tokens, hw = patch_embed(x, params, s)
        for b in range(config.stage_depths[s - 1]):
            tokens = serial_block(tokens, _sub(params, f"stage{s}.block{b}"), config.heads, hw)
        x = _tokens_to_map(tokens, hw)
        maps.append(x)
    return maps


def encode(frames, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Feature map of the tap stage, [B, C_embed, H / s, W / s]."""
    if not isinstance(frames, Tensor):
        frames = Tensor(np.asarray(frames, dtype=params["stage1.patch.weight"].dtype))
    _, _, H, W = frames.shape
    check_input_size(H, W, 32)
    return encode_pyramid(frames, config, params, upto=config.embed_stage)[-1]


def project(y: Tensor, params: dict[str, Tensor], config: EncoderConfig | None = None) -> Tensor:
    """conv1x1 -> LayerNorm -> ReLU -> conv1x1, then unit-normalize each position."""
    n_in = params["head.conv1.weight"].shape[1]
    if y.shape[1] != n_in:
        raise ConfigError(f"head expects {n_in} channels, feature map has {y.shape[1]}")
    x = T.conv2d(y, params["head.conv1.weight"], params["head.conv1.bias"])
    x = T.transpose(x, (0, 2, 3, 1))
    x = T.layer_norm(x, params["head.ln1.gamma"], params["head.ln1.beta"])
    x = T.transpose(T.relu(x), (0, 3, 1, 2))
    x = T.conv2d(x, params["head.conv2.weight"], params["head.conv2.bias"])
    return T.l2_normalize(x, axis=1)


def embed(frames, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """encode followed by project: [B, 3, H, W] -> unit-norm [B, proj_dim, H/s, W/s]."""
    return project(encode(frames, config, params), params, config)


def embedding_maps(frames: np.ndarray, config: EncoderConfig, params: dict[str, Tensor], clip_id: str = "",
                   batch: int = 8) -> list[EmbeddingMap]:
    """Gradient-free embedding of a [T, 3, H, W] frame stack."""
    out: list[EmbeddingMap] = []
    dtype = params["stage1.patch.weight"].dtype
    with T.no_grad():
        for start in range(0, len(frames), batch):
            chunk = Tensor(np.asarray(frames[start:start + batch], dtype=dtype))
            z = embed(chunk, config, params).data
            for i, grid in enumerate(z):
                out.append(EmbeddingMap(clip_id, start + i, np.ascontiguousarray(grid.transpose(1, 2, 0)), config.embed_stride))
    return out
