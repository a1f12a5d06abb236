"""Small reverse-mode autodiff tensor built on numpy.

Every differentiable op records its parents and a closure that maps the
output gradient to parent gradients. ``backward`` orders the recorded graph
into a :class:`Tape` (parents before children) and walks it in reverse. The
graph is released after one backward pass; calling backward again on the
same loss raises :class:`GraphReleasedError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, SelfVOSError, ShapeError  # noqa: F401


class GraphReleasedError(SelfVOSError, RuntimeError):
    """backward was called on a graph that was already consumed."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def backward(self) -> "Tape":
        return backward(self)

    # -- operator overloads ----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


# ---------------------------------------------------------------------------
# tape / backward


class Tape:
    """Topologically ordered record of the ops reachable from a loss.

    ``nodes[i]`` never precedes any of its parents.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad``; intermediate
    gradients are not retained. The graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if getattr(loss, "_op", None) == "released":
        raise GraphReleasedError("graph already consumed by a previous backward call; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphReleasedError("loss does not require grad (no recorded graph)")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._op = "released"
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(a))) along ``axis``.

    Entries equal to -inf are treated as absent.
    """
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(ad - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._make(res, (a,), bw, "logsumexp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ConfigError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw, "softmax")


def argmax(x, axis: int = -1) -> np.ndarray:
    """Forward-only; returns a plain integer array."""
    return np.argmax(_as_array(x), axis=axis)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast like ``np.matmul``."""
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalisation


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then scale and shift."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 channels, got {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps) if eps > 0 else np.where(var > 0, 1.0 / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    bd = beta.data if beta is not None else None
    out = xhat
    if gd is not None:
        out = out * gd
    if bd is not None:
        out = out + bd

    def bw(g):
        gx_hat = g * gd if gd is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gd is not None else None
        gb = g.sum(axis=lead) if bd is not None else None
        return gx, gg, gb

    parents = (x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0))
    return Tensor._make(out.astype(xd.dtype, copy=False), parents, bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def bw(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return Tensor._make(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over [B, C, H, W] with weight [O, C/groups, kh, kw]."""
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigError(f"groups={groups} must divide in_channels={C} and out_channels={O}")
    if Cg != C // groups:
        raise ShapeError(f"weight expects {Cg * groups} input channels, input has {C}")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H}x{W}")
    G, Og = groups, O // groups
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    xp = xp.reshape(B, G, Cg, H + 2 * pad, W + 2 * pad)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    if Cg == 1 and Og == 1:
        # depthwise fast path
        wd = w.data.reshape(G, kh, kw)
        out = np.zeros((B, G, Ho, Wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, 0, i:i + hs:stride, j:j + ws:stride] * wd[None, :, i, j, None, None]
        out = out.reshape(B, O, Ho, Wo)

        def bw_core(g):
            g = g.reshape(B, G, Ho, Wo)
            gxp = np.zeros((B, G, H + 2 * pad, W + 2 * pad), dtype=xd.dtype)
            gw = np.zeros((G, kh, kw), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, :, 0, i:i + hs:stride, j:j + ws:stride]
                    gw[:, i, j] = np.einsum("bghw,bghw->g", g, win)
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += g * wd[None, :, i, j, None, None]
            return gxp, gw.reshape(w.shape)
    else:
        # im2col: cols[b, g, (ho wo), (c i j)]
        cols = np.empty((B, G, Cg, kh, kw, Ho, Wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = xp[:, :, :, i:i + hs:stride, j:j + ws:stride]
        cols = cols.reshape(B, G, Cg * kh * kw, Ho * Wo)
        wmat = w.data.reshape(G, Og, Cg * kh * kw)
        out = (wmat[None] @ cols).reshape(B, O, Ho, Wo)

        def bw_core(g):
            g = g.reshape(B, G, Og, Ho * Wo)
            gw = np.einsum("bgol,bgkl->gok", g, cols).reshape(w.shape)
            gcols = (np.swapaxes(wmat, -1, -2)[None] @ g).reshape(B, G, Cg, kh, kw, Ho, Wo)
            gxp = np.zeros((B, G, Cg, H + 2 * pad, W + 2 * pad), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, :, i, j]
            return gxp, gw

    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gxp, gw = bw_core(g)
        gxp = gxp.reshape(B, C, H + 2 * pad, W + 2 * pad)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b if b is not None else Tensor(0.0))
    return Tensor._make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """[dst, src] interpolation weights, half-pixel centres, edge clamped."""
    m = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` (works for shrinking too)."""
    h, w = x.shape[-2:]
    rh = bilinear_matrix(h, size[0], x.dtype)
    rw = bilinear_matrix(w, size[1], x.dtype)
    out = rh @ x.data @ rw.T

    def bw(g):
        return (rh.T @ g @ rw,)

    return Tensor._make(out, (x,), bw, "bilinear")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, floor: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a float64 Tensor to a scalar Tensor. Relative error per entry
    is ``|a - n| / max(floor, |a|, |n|)``; the floor keeps entries whose true
    gradient is ~0 from dividing rounding noise by itself.
    """
    x0 = np.array(_as_array(x), dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x0.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x0.copy())).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
