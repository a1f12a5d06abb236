"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from selfvos import correspondence as C
from selfvos import propagation as P
from selfvos import tensor as T
from selfvos.config import RunConfig, from_ini, to_ini
from selfvos.data import load_frames, load_mask, save_mask, scan_dataset
from selfvos.encoder import STAGE_STRIDES, EncoderConfig, EmbeddingMap, encode_pyramid, init_params
from selfvos.gradcheck import TOLERANCE, run_suite
from selfvos.metrics import boundary_f, evaluate_dataset, jaccard
from selfvos.synth import SynthConfig, synth_generate
from selfvos.tensor import Tensor
from selfvos.trainer import Trainer, TrainConfig, load_checkpoint, load_training_clips, save_checkpoint

TRAIN_STEPS = 1500


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, detail


def unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def anchor_set(vectors, clip_ids):
    return C.AnchorSet(Tensor(vectors), np.zeros((len(vectors), 3), dtype=int), np.asarray(clip_ids), 1)


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(capsys):
    t0 = time.time()
    results = run_suite(range(10))
    elapsed = time.time() - t0
    worst = max(err for _, _, err in results)
    cases = {name for name, _, _ in results}
    composed = {"loss_cv", "loss_cv_infonce", "loss_st", "total_loss"} <= cases
    ok = worst < TOLERANCE and elapsed < 120 and composed
    report(capsys, 1, ok, f"{len(cases)} cases x 10 seeds, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


# 2 -------------------------------------------------------------------------

def brute_affinity(z, k, tau):
    out = np.zeros((len(z), len(k)))
    for i in range(len(z)):
        e = [math.exp(float(z[i] @ k[j]) / tau) for j in range(len(k))]
        for j in range(len(k)):
            out[i, j] = e[j] / sum(e)
    return out


def brute_pseudo(zh, clips, k, kclips, tau):
    out = []
    for i in range(len(zh)):
        best, best_j = -np.inf, -1
        for j in range(len(k)):
            if kclips[j] == clips[i] and float(zh[i] @ k[j]) / tau > best:
                best, best_j = float(zh[i] @ k[j]) / tau, j
        out.append(best_j)
    return np.array(out)


def test_criterion_2_equation_oracles(capsys):
    errs = {}
    eye = Tensor(np.eye(3))
    as_written = float(C.loss_cv(eye, eye, 1.0).data)
    infonce = float(C.loss_cv(eye, eye, 1.0, include_positive=True).data)
    errs["cv_as_written"] = abs(as_written - 3 * (math.log(2) - 1))
    errs["cv_infonce"] = abs(infonce - 3 * -math.log(math.e / (math.e + 2)))

    K, M = 7, 11
    q = Tensor(np.full((M, K), 1.0 / K).reshape(1, M, K))
    p = np.zeros((1, M), dtype=int)
    ident = C.ViewTransform.identity(M, 1)
    lst = float(C.loss_st(q, p, [(ident, ident)], [False], (M, 1), 1).data)
    errs["st_uniform"] = abs(lst - M * math.log(K))

    for seed in range(10):
        rng = np.random.default_rng(seed)
        z, k = unit(rng, 9, 5), unit(rng, 6, 5)
        kclips = np.array([0, 0, 0, 1, 1, 1])
        got = C.affinity(Tensor(z), anchor_set(k, kclips), 0.07).data
        errs[f"affinity_{seed}"] = float(np.max(np.abs(got - brute_affinity(z, k, 0.07))))
        fclips = rng.integers(0, 2, size=9)
        same = (C.pseudo_labels(z, fclips, anchor_set(k, kclips), 0.07) == brute_pseudo(z, fclips, k, kclips, 0.07)).all()
        errs[f"pseudo_{seed}"] = 0.0 if same else 1.0
    worst = max(errs.values())
    detail = (f"L_CV as-written {as_written:.6f} (quoted -0.9206), InfoNCE {infonce:.6f} (quoted 1.6542, closed form "
              f"{3 * math.log((math.e + 2) / math.e):.6f}), uniform L_ST {lst:.6f} = {M}ln{K}; max err {worst:.1e} (< 1e-5)")
    report(capsys, 2, worst < 1e-5, detail)


# 3 -------------------------------------------------------------------------

def test_criterion_3_structural_invariants(capsys):
    failures = []
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(scale=rng.uniform(0.1, 50), size=(8, 13))
        if np.max(np.abs(T.softmax(Tensor(x), axis=1).data.sum(axis=1) - 1)) > 1e-6:
            failures.append("softmax")
    for seed in range(20):
        r = np.random.default_rng(seed)
        k, zh = unit(r, 8, 4), unit(r, 30, 4)
        kclips = np.repeat([0, 1, 2, 3], 2)
        fclips = r.integers(0, 4, size=30)
        labels = [C.pseudo_labels(zh, fclips, anchor_set(k, kclips), tau) for tau in (0.01, 0.07, 1.0, 10.0)]
        if not (kclips[labels[0]] == fclips).all():
            failures.append("pseudo-label clip crossing")
        if any((lab != labels[0]).any() for lab in labels[1:]):
            failures.append("pseudo-label tau dependence")
    for seed in range(10):
        r = np.random.default_rng(seed)
        grids = [unit(r, 36, 8).reshape(6, 6, 8) for _ in range(6)]
        first = r.integers(0, 4, size=(24, 24))
        out = P.propagate_embeddings([EmbeddingMap("c", t, g, 4) for t, g in enumerate(grids)], first,
                                     P.PropagationConfig(k=5, radius=2, capacity=2), 4)
        if max(np.max(np.abs(m.sum(axis=0) - 1)) for m in out) > 1e-5:
            failures.append("propagated sums")
    enc = EncoderConfig()
    params = init_params(enc, dtype=np.float64)
    for H, W in ((64, 96), (128, 32), (32, 32)):
        with T.no_grad():
            maps = encode_pyramid(Tensor(np.zeros((1, 3, H, W))), enc, params)
        if [m.shape[2:] for m in maps] != [(H // s, W // s) for s in STAGE_STRIDES]:
            failures.append(f"ladder {H}x{W}")
    report(capsys, 3, not failures, "softmax rows, pseudo-label clip safety and tau-invariance, propagated sums, "
           f"resolution ladder /4 /8 /16 /32; failures: {sorted(set(failures)) or 'none'}")


# 4 -------------------------------------------------------------------------

def test_criterion_4_dense_attention_equivalence(capsys):
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        q = unit(rng, 64, 6).reshape(8, 8, 6)
        entries = []
        for _ in range(3):
            m = rng.random((3, 8, 8))
            entries.append((unit(rng, 64, 6).reshape(8, 8, 6), m / m.sum(axis=0)))
        buf = P.ContextBuffer(4)
        for t, (g, m) in enumerate(entries):
            buf.add(EmbeddingMap("c", t, g, 4), m)
        got = P.propagate_frame(EmbeddingMap("c", 9, q, 4), buf, P.PropagationConfig(k=3 * 64, radius=7, temperature=0.2))
        keys = np.concatenate([g.reshape(64, 6) for g, _ in entries])
        vals = np.concatenate([m.reshape(3, 64) for _, m in entries], axis=1)
        for cell in range(64):
            s = np.array([float(q.reshape(64, 6)[cell] @ keys[j]) / 0.2 for j in range(len(keys))])
            w = np.exp(s - s.max())
            w /= w.sum()
            dense = sum(w[j] * vals[:, j] for j in range(len(keys)))
            worst = max(worst, float(np.max(np.abs(got.reshape(3, 64)[:, cell] - dense / dense.sum()))))
    report(capsys, 4, worst < 1e-5, f"8x8 grids, full window, k=all: max |diff| {worst:.1e} (< 1e-5)")


# 5 -------------------------------------------------------------------------

def _evaluate(root, split, params, enc, pcfg):
    index = scan_dataset(root)
    preds, gts = {}, {}
    for rec in index.subset(split):
        gt = [load_mask(rec.masks[n]) for n in rec.frame_numbers]
        res = P.propagate_video(load_frames(rec), gt[0], params, enc, pcfg, rec.clip_id)
        preds[rec.clip_id], gts[rec.clip_id] = list(res.labels), gt
    return evaluate_dataset(preds, gts)


@pytest.mark.slow
def test_criterion_5_end_to_end_learning_signal(capsys, tmp_path):
    t0 = time.time()
    run = RunConfig.desk()
    run.synth = SynthConfig(clips=25, val_clips=5, size=64)
    root = synth_generate(run.synth, tmp_path / "synth")
    index = scan_dataset(root)
    assert len(index.subset("train")) == 20 and len(index.subset("val")) == 5
    train_cfg = TrainConfig.desk(max_steps=TRAIN_STEPS)
    _, clips = load_training_clips(index, "train", train_cfg.crop_size, train_cfg.frames_per_clip)
    trainer = Trainer(clips, run.encoder, train_cfg, run.loss)
    baseline = _evaluate(root, "val", init_params(run.encoder, seed=train_cfg.seed), run.encoder, run.propagation)
    for _ in trainer.run():
        pass
    trainer.save(tmp_path / "model.dtrk")
    ck = load_checkpoint(tmp_path / "model.dtrk")
    params = {k: Tensor(v) for k, v in ck.params.items()}
    trained = _evaluate(root, "val", params, run.encoder, run.propagation)
    elapsed = time.time() - t0
    with capsys.disabled():
        print("\n" + trained.table(), end="")
    ok = trained.JF_m >= 0.70 and baseline.JF_m <= 0.40 and elapsed < 1800 and trainer.step <= 2000
    report(capsys, 5, ok, f"trained JF_m {trained.JF_m:.3f} (>= 0.70) after {trainer.step} steps, random-init JF_m "
           f"{baseline.JF_m:.3f} (<= 0.40), {elapsed / 60:.1f} min (< 30)")


# 6 -------------------------------------------------------------------------

def _brute_boundary(m):
    H, W = m.shape
    return {(r, c) for r in range(H) for c in range(W) if m[r, c] and any(
        not (0 <= r + dr < H and 0 <= c + dc < W) or not m[r + dr, c + dc]
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)))}


def _brute_f(pred, gt, radius):
    bp, bg = _brute_boundary(pred), _brute_boundary(gt)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0

    def frac(a, b):
        return sum(min(math.hypot(r - r2, c - c2) for r2, c2 in b) <= radius for r, c in a) / len(a)

    prec, rec = frac(bp, bg), frac(bg, bp)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def test_criterion_6_metric_suite(capsys):
    pred = np.zeros((4, 4), bool)
    gt = np.zeros((4, 4), bool)
    pred[0:2, 0:2] = True
    gt[1:3, 0:2] = True
    fixture = jaccard(pred, gt) == 2 / 6
    worst = 0.0
    for seed in range(60):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(2, 33, size=2)
        a = rng.random((h, w)) < rng.uniform(0.2, 0.8)
        b = a.copy()
        flip = rng.random((h, w)) < 0.15
        b[flip] = ~b[flip]
        inter, union = np.sum(a & b), np.sum(a | b)
        worst = max(worst, abs(jaccard(a, b) - (inter / union if union else 1.0)))
        radius = int(rng.integers(0, 4))
        worst = max(worst, abs(boundary_f(a, b, tol_pixels=radius) - _brute_f(a, b, radius)))
        tol = 0.008 * math.hypot(h, w)
        worst = max(worst, abs(boundary_f(a, b) - _brute_f(a, b, math.ceil(tol))))
    report(capsys, 6, fixture and worst < 1e-6, f"2/6 fixture {'exact' if fixture else 'WRONG'}, "
           f"max |diff| vs brute force {worst:.1e} (< 1e-6) on 60 masks <= 32x32")


# 7 -------------------------------------------------------------------------

def test_criterion_7_determinism_and_persistence(capsys, tmp_path):
    checks = {}
    cfg = SynthConfig(clips=4, frames=6, size=32, val_clips=0)
    root = synth_generate(cfg, tmp_path / "d")
    index = scan_dataset(root)
    _, clips = load_training_clips(index, None, 32, 3)
    enc = EncoderConfig(stage_channels=[16, 32, 32, 32], stage_depths=[1, 1, 1, 1], embed_stage=1, proj_dim=16)

    def fresh():
        return Trainer(clips, enc, TrainConfig(crop_size=32, frames_per_clip=3, seed=5, max_steps=100), C.LossWeights())

    a = [r["total"] for r in fresh().run(20)]
    b = [r["total"] for r in fresh().run(20)]
    checks["loss sequence"] = a == b
    part = fresh()
    list(part.run(12))
    part.save(tmp_path / "mid.dtrk")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "mid.dtrk"), clips)
    checks["resume"] = [r["total"] for r in resumed.run(8)] == a[12:]
    first = (tmp_path / "mid.dtrk").read_bytes()
    save_checkpoint(tmp_path / "again.dtrk", load_checkpoint(tmp_path / "mid.dtrk"))
    checks["checkpoint bytes"] = (tmp_path / "again.dtrk").read_bytes() == first
    checks["config"] = all(from_ini(to_ini(c)) == c for c in (RunConfig(), RunConfig.desk()))
    again = scan_dataset(root)
    checks["index"] = [(c.clip_id, c.frames, c.masks) for c in again.clips] == [(c.clip_id, c.frames, c.masks)
                                                                                 for c in index.clips]
    rng = np.random.default_rng(0)
    ok = True
    for i in range(20):
        lab = rng.integers(0, 256, size=tuple(rng.integers(1, 40, size=2)))
        save_mask(tmp_path / f"m{i}.png", lab)
        ok &= bool((load_mask(tmp_path / f"m{i}.png") == lab).all())
    checks["mask"] = ok
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 7, not failed, f"bitwise loss sequence, resume 13-20, checkpoint/config/index/mask round-trips; "
           f"failures: {failed or 'none'}")
