"""Finite-difference gradient suite over every differentiable op and the training losses.

Each case is ``name -> (f, x)`` where ``f`` maps a float64 Tensor to a
scalar; ``run_suite`` evaluates every case across several seeds.
"""

from __future__ import annotations

import numpy as np

from . import correspondence as C
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def op_cases(rng: np.random.Generator) -> dict:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w_rand = rng.normal(size=(3, 4))
    img = rng.normal(size=(2, 3, 6, 6))
    wconv = rng.normal(size=(4, 3, 3, 3))
    wdw = rng.normal(size=(3, 1, 3, 3))
    gamma = rng.normal(size=4)
    beta = rng.normal(size=4)
    w35 = rng.normal(size=(3, 5))
    w64 = rng.normal(size=(6, 4))
    w4 = rng.normal(size=4)
    wimg4 = rng.normal(size=(2, 4, 6, 6))
    wimg3 = rng.normal(size=(2, 3, 6, 6))
    wup = rng.normal(size=(3, 7, 9))
    return {
        "add": (lambda t: T.sum_((t + Tensor(pos)) * Tensor(w_rand)), a),
        "sub": (lambda t: T.sum_((Tensor(pos) - t) * Tensor(w_rand)), a),
        "mul": (lambda t: T.sum_(t * t * Tensor(w_rand)), a),
        "div": (lambda t: T.sum_(Tensor(w_rand) / t), pos),
        "exp": (lambda t: T.sum_(T.exp(t) * Tensor(w_rand)), a),
        "log": (lambda t: T.sum_(T.log(t) * Tensor(w_rand)), pos),
        "mean": (lambda t: T.mean(t * Tensor(w_rand), axis=1)[1], a),
        "relu": (lambda t: T.sum_(T.relu(t) * Tensor(w_rand)), a + np.sign(a) * 0.1),
        "matmul_left": (lambda t: T.sum_(T.matmul(t, Tensor(b)) * Tensor(w35)), a),
        "matmul_right": (lambda t: T.sum_(T.matmul(Tensor(a), t) * Tensor(w35)), b),
        "slice": (lambda t: T.sum_(t[1:, ::2] * Tensor(w_rand[1:, ::2])), a),
        "fancy_index": (lambda t: T.sum_(t[np.array([0, 2, 0]), np.array([1, 3, 1])]), a),
        "concat": (lambda t: T.sum_(T.concat([t, t * 2.0], axis=0) * Tensor(w64)), a),
        "transpose": (lambda t: T.sum_(T.transpose(t) * Tensor(w_rand.T)), a),
        "reshape": (lambda t: T.sum_(T.reshape(t, (2, 6)) * Tensor(w_rand.reshape(2, 6))), a),
        "softmax": (lambda t: T.sum_(T.softmax(t, axis=1) * Tensor(w_rand)), a),
        "logsumexp": (lambda t: T.sum_(T.logsumexp(t, axis=0) * Tensor(w4)), a),
        "layer_norm_x": (lambda t: T.sum_(T.layer_norm(t, Tensor(gamma), Tensor(beta)) * Tensor(w_rand)), a),
        "layer_norm_gamma": (lambda t: T.sum_(T.layer_norm(Tensor(a), t, Tensor(beta)) * Tensor(w_rand)), gamma),
        "l2_normalize": (lambda t: T.sum_(T.l2_normalize(t, axis=1) * Tensor(w_rand)), a),
        "conv2d_x": (lambda t: T.sum_(T.conv2d(t, Tensor(wconv), stride=2, pad=1) * Tensor(wimg4[:, :, :3, :3])), img),
        "conv2d_w": (lambda t: T.sum_(T.conv2d(Tensor(img), t, pad=1) * Tensor(wimg4)), wconv),
        "depthwise_x": (lambda t: T.sum_(T.conv2d(t, Tensor(wdw), pad=1, groups=3) * Tensor(wimg3)), img),
        "depthwise_w": (lambda t: T.sum_(T.conv2d(Tensor(img), t, pad=1, groups=3) * Tensor(wimg3)), wdw),
        "bilinear": (lambda t: T.sum_(T.bilinear_upsample(t, (7, 9)) * Tensor(wup)), rng.normal(size=(3, 3, 4))),
    }


def _anchors(vectors, clip_ids):
    n = len(vectors)
    return C.AnchorSet(Tensor(vectors), np.zeros((n, 3), dtype=int), np.asarray(clip_ids), 1)


def loss_cases(rng: np.random.Generator) -> dict:
    zh = _unit(rng, 6, 4)
    anchors = _anchors(_unit(rng, 5, 4), [0, 0, 0, 1, 1])
    p = rng.integers(0, 5, size=(2, 4))
    ident = C.ViewTransform.identity(8, 8)
    crop_flip = C.ViewTransform(2, 1, 6, 6, True)
    lam = 0.3

    def st(x):
        q = C.affinity(T.reshape(T.l2_normalize(x, axis=-1), (8, 4)), anchors, 0.5)
        return C.loss_st(T.reshape(q, (2, 4, 5)), p, [(ident, ident), (ident, crop_flip)], [False, False], (8, 8), 4)

    def total(x):
        z = T.l2_normalize(T.reshape(x, (8, 4)), axis=-1)
        cv = C.loss_cv(z[:6], Tensor(zh), 0.5)
        return C.total_loss(cv, st(x), lam)

    return {
        "loss_cv": (lambda t: C.loss_cv(T.l2_normalize(t), Tensor(zh), 0.5), rng.normal(size=(6, 4))),
        "loss_cv_infonce": (lambda t: C.loss_cv(T.l2_normalize(t), Tensor(zh), 0.5, True), rng.normal(size=(6, 4))),
        "loss_st": (st, rng.normal(size=(2, 4, 4))),
        "total_loss": (total, rng.normal(size=(2, 4, 4))),
    }


def all_cases(rng: np.random.Generator) -> dict:
    return {**op_cases(rng), **loss_cases(rng)}


def run_suite(seeds=range(10), tolerance: float = TOLERANCE) -> list[tuple[str, int, float]]:
    """Return (case, seed, max relative error) for every case and seed."""
    results = []
    for seed in seeds:
        for name, (f, x) in all_cases(np.random.default_rng(seed)).items():
            results.append((name, seed, T.grad_check(f, x)))
    return results
