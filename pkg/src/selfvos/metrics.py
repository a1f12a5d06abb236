"""Region (Jaccard) and boundary (F-measure) scores, and dataset reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataError

DEFAULT_BOUNDARY_TOL = 0.008


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def jaccard(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_map(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (image exterior counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def tolerance_pixels(shape, tol_fraction: float) -> int:
    return int(math.ceil(tol_fraction * math.hypot(*shape))) if tol_fraction > 0 else 0


def disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def boundary_f(pred, gt, tol_fraction: float = DEFAULT_BOUNDARY_TOL, tol_pixels: int | None = None) -> float:
    """Boundary F-measure with a disk-shaped matching tolerance.

    The tolerance radius is ``ceil(tol_fraction * diagonal)`` pixels unless
    ``tol_pixels`` is given.
    """
    pred, gt = _check_pair(pred, gt)
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    r = tolerance_pixels(pred.shape, tol_fraction) if tol_pixels is None else tol_pixels
    if r > 0:
        se = disk(r)
        gt_dil = ndimage.binary_dilation(bg, structure=se)
        pred_dil = ndimage.binary_dilation(bp, structure=se)
    else:
        gt_dil, pred_dil = bg, bp
    precision = (bp & gt_dil).sum() / n_p
    recall = (bg & pred_dil).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def recall_at(scores, threshold: float = 0.5) -> float:
    """Fraction of scores strictly above ``threshold``."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ContractError("recall of an empty score list")
    return float(np.mean(scores > threshold))


@dataclass
class EvalReport:
    sequences: dict[str, dict[str, float]] = field(default_factory=dict)
    J_m: float = 0.0
    J_r: float = 0.0
    F_m: float = 0.0
    F_r: float = 0.0
    JF_m: float = 0.0
    threshold: float = 0.5
    boundary_tol: float = DEFAULT_BOUNDARY_TOL

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        head = f"{'Sequence':<16}{'J&F_m':>8}{'J_m':>8}{'J_r':>8}{'F_m':>8}{'F_r':>8}"
        rows = [head, "-" * len(head)]
        for name, s in sorted(self.sequences.items()):
            jf = (s["J"] + s["F"]) / 2
            rows.append(f"{name:<16}{jf * 100:>8.1f}{s['J'] * 100:>8.1f}{'':>8}{s['F'] * 100:>8.1f}{'':>8}")
        rows.append("-" * len(head))
        rows.append(f"{'mean':<16}{self.JF_m * 100:>8.1f}{self.J_m * 100:>8.1f}{self.J_r * 100:>8.1f}"
                    f"{self.F_m * 100:>8.1f}{self.F_r * 100:>8.1f}")
        return "\n".join(rows) + "\n"


def score_frame(pred: np.ndarray, gt: np.ndarray, labels, tol_fraction: float) -> tuple[float, float]:
    """Per-label J and F averaged over ``labels``."""
    js, fs = [], []
    for lab in labels:
        p, g = pred == lab, gt == lab
        js.append(jaccard(p, g))
        fs.append(boundary_f(p, g, tol_fraction))
    return float(np.mean(js)), float(np.mean(fs))


def evaluate_sequence(pred, gt, tol_fraction: float = DEFAULT_BOUNDARY_TOL) -> tuple[float, float]:
    """Mean J and F over annotated frames 1..T-1.

    ``gt`` is a sequence of label maps with ``None`` for unannotated frames;
    objects are the non-zero labels of frame 0.
    """
    if gt[0] is None:
        raise DataError("frame 0 must be annotated")
    labels = [int(v) for v in np.unique(gt[0]) if v != 0]
    scored = [t for t in range(1, len(gt)) if gt[t] is not None]
    missing = [t for t in scored if t >= len(pred) or pred[t] is None]
    if missing:
        raise DataError(f"missing predictions for annotated frames {missing}")
    if not labels or not scored:
        return 1.0, 1.0
    js, fs = zip(*(score_frame(np.asarray(pred[t]), np.asarray(gt[t]), labels, tol_fraction) for t in scored))
    return float(np.mean(js)), float(np.mean(fs))


def evaluate_dataset(preds: dict, gts: dict, threshold: float = 0.5,
                     tol_fraction: float = DEFAULT_BOUNDARY_TOL) -> EvalReport:
    """Per-sequence means, then dataset means/recalls and their J&F mean."""
    if not gts:
        raise ContractError("no sequences to evaluate")
    absent = sorted(set(gts) - set(preds))
    if absent:
        raise DataError(f"no predictions for sequences {absent}")
    report = EvalReport(threshold=threshold, boundary_tol=tol_fraction)
    for name in sorted(gts):
        try:
            j, f = evaluate_sequence(preds[name], gts[name], tol_fraction)
        except DataError as exc:
            raise DataError(f"{name}: {exc}") from exc
        report.sequences[name] = {"J": j, "F": f}
    js = [s["J"] for s in report.sequences.values()]
    fs = [s["F"] for s in report.sequences.values()]
    report.J_m, report.F_m = float(np.mean(js)), float(np.mean(fs))
    report.J_r, report.F_r = recall_at(js, threshold), recall_at(fs, threshold)
    report.JF_m = (report.J_m + report.F_m) / 2
    return report
