import numpy as np
import pytest

from selfvos import encoder as E
from selfvos import tensor as T
from selfvos.tensor import Tensor


def naive_conv_attention(x, wqkv, bqkv, wcrpe, heads, hw):
    """Per-element loops over tokens, heads and channels."""
    B, N, C = x.shape
    h, w = hw
    d = C // heads
    qkv = np.einsum("bnc,co->bno", x, wqkv) + bqkv
    q, k, v = qkv[..., :C], qkv[..., C:2 * C], qkv[..., 2 * C:]
    out = np.zeros((B, N, C))
    for b in range(B):
        for hd in range(heads):
            sl = slice(hd * d, (hd + 1) * d)
            qh, kh, vh = q[b, :, sl], k[b, :, sl], v[b, :, sl]
            ks = np.zeros_like(kh)
            for j in range(d):
                col = np.exp(kh[:, j] - kh[:, j].max())
                ks[:, j] = col / col.sum()
            for n in range(N):
                for j in range(d):
                    acc = 0.0
                    for i in range(d):
                        ctx = sum(ks[m, i] * vh[m, j] for m in range(N))
                        acc += qh[n, i] * ctx
                    out[b, n, hd * d + j] = acc / np.sqrt(d)
        # depthwise 3x3 on V laid out on the grid
        for c in range(C):
            grid = v[b, :, c].reshape(h, w)
            for r in range(h):
                for cc in range(w):
                    acc = 0.0
                    for i in range(3):
                        for j in range(3):
                            rr, c2 = r + i - 1, cc + j - 1
                            if 0 <= rr < h and 0 <= c2 < w:
                                acc += grid[rr, c2] * wcrpe[c, 0, i, j]
                    out[b, r * w + cc, c] += q[b, r * w + cc, c] * acc
    return out


def _attn_params(rng, C):
    return {
        "qkv.weight": Tensor(rng.normal(size=(C, 3 * C))),
        "qkv.bias": Tensor(rng.normal(size=3 * C)),
        "crpe.weight": Tensor(rng.normal(size=(C, 1, 3, 3))),
    }


def test_conv_attention_matches_naive_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 8))
    p = _attn_params(rng, 8)
    out = E.conv_attention(Tensor(x), p, heads=2, hw=(2, 2))
    ref = naive_conv_attention(x, p["qkv.weight"].data, p["qkv.bias"].data, p["crpe.weight"].data, 2, (2, 2))
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("hw", [(4, 4), (2, 8), (3, 5)])
def test_conv_attention_oracle_up_to_16_tokens(seed, hw):
    rng = np.random.default_rng(seed)
    N = hw[0] * hw[1]
    x = rng.normal(size=(1, N, 6))
    p = _attn_params(rng, 6)
    out = E.conv_attention(Tensor(x), p, heads=3, hw=hw)
    ref = naive_conv_attention(x, p["qkv.weight"].data, p["qkv.bias"].data, p["crpe.weight"].data, 3, hw)
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


def test_conv_attention_single_token():
    rng = np.random.default_rng(1)
    C, heads = 4, 2
    d = C // heads
    x = rng.normal(size=(1, 1, C))
    p = _attn_params(rng, C)
    qkv = x[0, 0] @ p["qkv.weight"].data + p["qkv.bias"].data
    q, k, v = qkv[:C], qkv[C:2 * C], qkv[2 * C:]
    centre = p["crpe.weight"].data[:, 0, 1, 1]
    expected = np.zeros(C)
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        # softmax over a single token is 1, so K drops out of the factor term
        expected[sl] = q[sl].sum() * v[sl] / np.sqrt(d)
    expected += q * v * centre
    out = E.conv_attention(Tensor(x), p, heads=heads, hw=(1, 1))
    np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-10)


def test_conv_attention_zero_values_give_zero():
    rng = np.random.default_rng(2)
    p = _attn_params(rng, 8)
    p["qkv.weight"].data[:, 16:] = 0.0
    p["qkv.bias"].data[16:] = 0.0
    out = E.conv_attention(Tensor(rng.normal(size=(2, 16, 8))), p, heads=2, hw=(4, 4))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_attention_bad_grid():
    p = _attn_params(np.random.default_rng(0), 4)
    with pytest.raises(T.ShapeError):
        E.conv_attention(Tensor(np.zeros((1, 6, 4))), p, heads=2, hw=(2, 2))


@pytest.mark.parametrize("seed", range(3))
def test_conv_attention_grad_check(seed):
    rng = np.random.default_rng(seed)
    p = _attn_params(rng, 4)
    x = rng.normal(size=(1, 6, 4))
    wout = rng.normal(size=(1, 6, 4))
    assert T.grad_check(lambda t: T.sum_(E.conv_attention(t, p, 2, (2, 3)) * Tensor(wout)), x) < 1e-4


@pytest.mark.parametrize("size,expected", [
    (256, [(64, 64), (32, 32), (16, 16), (8, 8)]),
    (32, [(8, 8), (4, 4), (2, 2), (1, 1)]),
])
def test_resolution_ladder(size, expected):
    config = E.EncoderConfig(stage_channels=[8, 8, 8, 8], stage_depths=[1, 1, 1, 1], heads=2, proj_dim=8)
    params = E.init_params(config, seed=0)
    with T.no_grad():
        maps = E.encode_pyramid(Tensor(np.zeros((1, 3, size, size), np.float32)), config, params)
    assert [m.shape[2:] for m in maps] == expected


@pytest.mark.parametrize("h,w", [(64, 96), (96, 32), (128, 64)])
def test_resolution_ladder_rectangular(h, w):
    config = E.EncoderConfig(stage_channels=[8, 8, 8, 8], stage_depths=[0, 0, 0, 0], heads=2, proj_dim=8)
    params = E.init_params(config)
    with T.no_grad():
        maps = E.encode_pyramid(Tensor(np.zeros((1, 3, h, w), np.float32)), config, params)
    for s, m in enumerate(maps, start=1):
        assert m.shape[2:] == (h // 2 ** (s + 1), w // 2 ** (s + 1))


def test_input_not_multiple_of_32():
    config = E.EncoderConfig()
    params = E.init_params(config)
    with pytest.raises(E.InputSizeError, match="32"):
        E.encode(np.zeros((1, 3, 100, 100), np.float32), config, params)


def test_encode_default_shape():
    config = E.EncoderConfig()
    params = E.init_params(config, seed=0)
    with T.no_grad():
        y = E.encode(np.random.default_rng(0).random((2, 3, 64, 64)), config, params)
    assert y.shape == (2, 128, 4, 4)


def test_encode_deterministic():
    config = E.EncoderConfig()
    x = np.random.default_rng(0).random((1, 3, 64, 64))
    with T.no_grad():
        a = E.encode(x, config, E.init_params(config, seed=5)).data
        b = E.encode(x, config, E.init_params(config, seed=5)).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(20))
def test_encode_finite(seed):
    config = E.EncoderConfig()
    x = np.random.default_rng(seed).random((1, 3, 64, 64))
    with T.no_grad():
        z = E.embed(x, config, E.init_params(config, seed=seed)).data
    assert np.all(np.isfinite(z))


def test_project_full_scale_preset():
    config = E.EncoderConfig.full_scale()
    params = E.init_params(config, seed=0)
    with T.no_grad():
        z = E.project(Tensor(np.random.default_rng(0).normal(size=(1, 512, 4, 4)).astype(np.float32)), params, config)
    assert z.shape == (1, 128, 4, 4)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-5)


def test_project_zero_input_still_unit_norm():
    config = E.EncoderConfig()
    params = E.init_params(config, seed=0)
    params["head.conv2.bias"].data[:] = np.linspace(-1, 1, config.proj_dim)
    with T.no_grad():
        z = E.project(Tensor(np.zeros((1, 128, 2, 2), np.float32)), params, config)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-5)


def test_project_channel_mismatch():
    config = E.EncoderConfig()
    params = E.init_params(config)
    with pytest.raises(T.ConfigError):
        E.project(Tensor(np.zeros((1, 64, 2, 2), np.float32)), params, config)


def test_project_layer_order_grad_check():
    config = E.EncoderConfig(stage_channels=[4, 4, 4, 4], stage_depths=[1, 1, 1, 1], heads=2, embed_stage=1, proj_dim=3)
    params = E.init_params(config, seed=1, dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(1, 4, 2, 2))
    wout = np.random.default_rng(2).normal(size=(1, 3, 2, 2))
    assert T.grad_check(lambda t: T.sum_(E.project(t, params) * Tensor(wout)), x) < 1e-4


def test_config_validation():
    with pytest.raises(T.ConfigError):
        E.EncoderConfig(heads=3)
    with pytest.raises(T.ConfigError):
        E.EncoderConfig(embed_stage=5)


def test_embedding_maps_unit_norm():
    config = E.EncoderConfig(embed_stage=2)
    params = E.init_params(config, seed=3)
    maps = E.embedding_maps(np.random.default_rng(0).random((3, 3, 64, 64)), config, params, clip_id="c")
    assert len(maps) == 3 and maps[0].grid.shape == (8, 8, 128) and maps[0].stride == 8
    for m in maps:
        np.testing.assert_allclose(np.linalg.norm(m.grid, axis=-1), 1.0, atol=1e-5)
