"""Detection evaluation: greedy matching, miss-rate/FPPI and precision-recall
curves, and the log-average miss rate."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .geometry import BoundingBox, boxes_to_array, iou_matrix

MR_FPPI_RANGE = (1e-2, 1e0)
MR_POINTS = 9
MR_FLOOR = 1e-10


@dataclass
class ImageResult:
    """Scored detections ``(box, score)`` and gt boxes of one image."""

    detections: list
    gts: list
    image_id: str = ""


@dataclass
class MatchResult:
    # aligned with the input detection order
    tp: np.ndarray
    scores: np.ndarray
    gt_matched: np.ndarray
    # gt index matched by each detection, -1 for false positives
    matched_gt: np.ndarray

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def num_fp(self) -> int:
        return int((~self.tp).sum())

    @property
    def num_fn(self) -> int:
        return int((~self.gt_matched).sum())


def match_detections(detections: Sequence[tuple], gts: Sequence[BoundingBox],
                     iou_match: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order (ties by input index).

    Each detection takes the unmatched gt with the highest IoU >= iou_match,
    lower gt index on ties.
    """
    if not 0.0 < iou_match < 1.0:
        raise ValueError(f"iou_match must lie in (0, 1), got {iou_match}")
    n = len(detections)
    scores = np.array([float(d[1]) for d in detections], dtype=np.float64)
    ious = iou_matrix(boxes_to_array([d[0] for d in detections]), boxes_to_array(gts))
    tp = np.zeros(n, dtype=bool)
    matched_gt = np.full(n, -1)
    gt_matched = np.zeros(len(gts), dtype=bool)
    for i in np.lexsort((np.arange(n), -scores)):
        if not len(gts):
            break
        cand = np.where(gt_matched, -1.0, ious[i])
        j = int(np.argmax(cand))  # first index among equal maxima
        if cand[j] >= iou_match:
            gt_matched[j] = True
            tp[i] = True
            matched_gt[i] = j
    return MatchResult(tp, scores, gt_matched, matched_gt)


@dataclass
class EvalCurve:
    """Curve samples in ascending threshold order plus summary scalars."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    num_images: int
    num_gts: int
    log_average_miss_rate: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fppi", "miss_rate", "recall", "precision"])
        for row in zip(self.thresholds, self.fppi, self.miss_rate, self.recall, self.precision):
            w.writerow([f"{v:.10g}" for v in row])
        return buf.getvalue()


def _counts(results: Sequence[ImageResult], thresholds, iou_match):
    if len(results) == 0:
        raise DataError("evaluation needs at least one image")
    all_scores, all_tp = [], []
    num_gts = 0
    for r in results:
        m = match_detections(r.detections, r.gts, iou_match)
        all_scores.append(m.scores)
        all_tp.append(m.tp)
        num_gts += len(r.gts)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp_flags = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    if thresholds is None:
        thresholds = np.unique(scores) if len(scores) else np.array([1.0])
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    above = scores[None, :] >= thresholds[:, None]
    tp = (above & tp_flags[None, :]).sum(axis=1)
    fp = (above & ~tp_flags[None, :]).sum(axis=1)
    return thresholds, tp, fp, num_gts


def _curve(results, thresholds, iou_match) -> EvalCurve:
    thresholds, tp, fp, num_gts = _counts(results, thresholds, iou_match)
    n_img = len(results)
    fppi = fp / n_img
    if num_gts:
        recall = tp / num_gts
        miss = 1.0 - recall
    else:
        recall = miss = np.full(len(thresholds), np.nan)
    ndet = tp + fp
    precision = np.where(ndet > 0, tp / np.maximum(ndet, 1), 1.0)
    return EvalCurve(thresholds, tp, fp, fppi, miss, recall, precision, n_img, num_gts)


def mr_fppi_curve(results: Sequence[ImageResult], thresholds=None,
                  iou_match: float = 0.5) -> EvalCurve:
    """Miss rate and FPPI at each score threshold (default: every distinct score).

    The returned curve carries its log-average miss rate.
    """
    curve = _curve(results, thresholds, iou_match)
    if curve.num_gts == 0:
        raise DataError("no ground-truth boxes: miss rate is undefined")
    curve.log_average_miss_rate = log_average_miss_rate(curve)
    return curve


def pr_curve(results: Sequence[ImageResult], thresholds=None,
             iou_match: float = 0.5) -> EvalCurve:
    """Precision and recall at each score threshold; precision is 1 with no detections."""
    curve = _curve(results, thresholds, iou_match)
    if curve.num_gts == 0:
        raise DataError("no ground-truth boxes: recall is undefined")
    return curve


def reference_fppi(points: int = MR_POINTS, lo: float = MR_FPPI_RANGE[0],
                   hi: float = MR_FPPI_RANGE[1]) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), points)


def log_average_miss_rate(curve: EvalCurve, refs: Optional[np.ndarray] = None) -> float:
    """Geometric mean of the miss rate sampled at log-spaced FPPI references.

    For each reference the sample is the miss rate at the largest FPPI not
    exceeding it (lowest miss rate among equal FPPI); with no such point, the
    miss rate at the highest threshold.
    """
    if len(curve.thresholds) == 0:
        raise DataError("empty curve")
    refs = reference_fppi() if refs is None else refs
    fppi, miss = curve.fppi, curve.miss_rate
    fallback = float(miss[np.argmax(curve.thresholds)])
    samples = []
    for ref in refs:
        ok = np.where(fppi <= ref)[0]
        if len(ok) == 0:
            samples.append(fallback)
            continue
        best = fppi[ok].max()
        samples.append(float(miss[ok][fppi[ok] == best].min()))
    samples = np.maximum(np.asarray(samples), MR_FLOOR)
    return float(np.exp(np.mean(np.log(samples))))


def summary(curve: EvalCurve, default_threshold: Optional[float] = None) -> dict:
    """Scalar summary: MR, and FPPI / miss rate / precision / recall at a threshold."""
    out = {
        "num_images": curve.num_images,
        "num_gts": curve.num_gts,
        "log_average_miss_rate": curve.log_average_miss_rate,
    }
    if default_threshold is not None:
        ok = np.where(curve.thresholds >= default_threshold)[0]
        if len(ok):
            k = ok[0]
            out.update(fppi=float(curve.fppi[k]), miss_rate=float(curve.miss_rate[k]),
                       precision=float(curve.precision[k]), recall=float(curve.recall[k]))
        else:
            out.update(fppi=0.0, miss_rate=1.0, precision=1.0, recall=0.0)
    return out


def format_summary(values: dict) -> str:
    lines = []
    for k, v in values.items():
        lines.append(f"{k} = {v:.10g}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"
