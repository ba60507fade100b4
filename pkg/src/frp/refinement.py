"""Proposal selection rules: IoU assignment, negative reselection, classifier
filtering, split-proposal gating, and greedy NMS.

Scoring goes through a pluggable *scorer*: any callable
``scorer(image, boxes) -> array of scores in [0, 1]``, one per box, NaN for a
box it could not score. ``classifier.ClassifierScorer`` is the trained-network
implementation; tests use tabulated scorers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import (BoundingBox, areas_array, boxes_to_array, iou, iou_matrix)

log = logging.getLogger(__name__)

Scorer = Callable[[object, Sequence[BoundingBox]], np.ndarray]


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    objectness: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ConfigError(f"objectness {self.objectness} outside [0, 1]")


@dataclass(frozen=True)
class SfrpScores:
    whole: float
    left: float
    right: float

    def __post_init__(self):
        for v in (self.whole, self.left, self.right):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ConfigError(f"split scores must lie in [0, 1], got {self}")


@dataclass(frozen=True)
class FrpThresholds:
    """Selection thresholds: IoU assignment, negative reselection, classifier
    filter, whole-proposal score and half-proposal score."""

    eps_iou: float = 0.5
    eps_t: float = 0.5
    eps_c: float = 0.3
    eps: float = 0.5
    eps_s: float = 0.1

    def __post_init__(self):
        for name in ("eps_iou", "eps_t", "eps_c", "eps", "eps_s"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ConfigError(f"threshold {name}={v!r} must lie in [0, 1]")


@dataclass
class AssignmentResult:
    positives: list
    negatives: list
    # best IoU of each input proposal, in input order
    best_iou: list = field(default_factory=list)
    # index of the best-matching gt for each input proposal (-1 without gts)
    best_gt: list = field(default_factory=list)
    positive_index: list = field(default_factory=list)
    negative_index: list = field(default_factory=list)


def assign_by_iou(proposals: Sequence[Proposal], gts: Sequence[BoundingBox],
                  eps_iou: float) -> AssignmentResult:
    """Split proposals into positives (best IoU >= eps_iou) and negatives."""
    if not 0.0 < eps_iou < 1.0:
        raise ConfigError(f"eps_iou must lie in (0, 1), got {eps_iou}")
    ious = iou_matrix(boxes_to_array([p.box for p in proposals]), boxes_to_array(gts))
    res = AssignmentResult([], [])
    for i, p in enumerate(proposals):
        if len(gts):
            j = int(np.argmax(ious[i]))
            best = float(ious[i, j])
        else:
            j, best = -1, 0.0
        res.best_iou.append(best)
        res.best_gt.append(j)
        if best >= eps_iou:
            res.positives.append(p)
            res.positive_index.append(i)
        else:
            res.negatives.append(p)
            res.negative_index.append(i)
    return res


def score_proposals(proposals: Sequence[Proposal], scorer: Scorer, image) -> np.ndarray:
    if len(proposals) == 0:
        return np.zeros(0)
    scores = np.asarray(scorer(image, [p.box for p in proposals]), dtype=np.float64)
    if scores.shape != (len(proposals),):
        raise ConfigError(f"scorer returned {scores.shape}, expected ({len(proposals)},)")
    return scores


def _unscored(scores: np.ndarray, what: str) -> np.ndarray:
    bad = ~np.isfinite(scores)
    if bad.any():
        log.warning("%d proposal(s) could not be scored during %s; keeping them",
                    int(bad.sum()), what)
    return bad


def tfrp_keep_mask(scores: np.ndarray, eps_t: float) -> np.ndarray:
    return (scores < eps_t) | _unscored(scores, "negative reselection")


def tfrp_refine(negatives: Sequence[Proposal], scorer: Scorer, image,
                eps_t: float) -> list:
    """Drop negatives the classifier finds pedestrian-like (score >= eps_t).

    Dropped proposals leave the training set; they are not relabelled.
    """
    scores = score_proposals(negatives, scorer, image)
    keep = tfrp_keep_mask(scores, eps_t)
    return [p for p, k in zip(negatives, keep) if k]


def tfrp_training_set(positives: Sequence[Proposal],
                      refined_negatives: Sequence[Proposal]) -> list:
    """Merge positives and refined negatives into ``(proposal, label)`` pairs."""
    pos_set = set(positives)
    for p in refined_negatives:
        if p in pos_set:
            raise ValueError(f"proposal {p.box.as_tuple()} is both positive and negative")
    return [(p, 1) for p in positives] + [(p, 0) for p in refined_negatives]


def cfrp_filter(proposals: Sequence[Proposal], scorer: Scorer, image,
                eps_c: float) -> list:
    """Keep proposals whose classifier confidence reaches eps_c, in input order."""
    scores = score_proposals(proposals, scorer, image)
    keep = (scores >= eps_c) | _unscored(scores, "classifier filtering")
    return [p for p, k in zip(proposals, keep) if k]


def sfrp_decide(s: SfrpScores, eps: float, eps_s: float) -> bool:
    return bool(s.whole >= eps and s.left >= eps_s and s.right >= eps_s)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS over ``(N, 4)`` boxes; returns kept indices in visiting order.

    Visiting order is score descending, then smaller area, then input index. A
    box survives iff its IoU with every earlier survivor is below ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ConfigError(f"NMS threshold must lie in (0, 1), got {iou_thresh}")
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(n), areas_array(boxes), -np.asarray(scores)))
    return order[greedy_suppress(boxes[order], iou_thresh)]


def greedy_suppress(ordered_boxes: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy suppression over boxes already in priority order; returns kept positions."""
    n = len(ordered_boxes)
    ious = iou_matrix(ordered_boxes, ordered_boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for k in range(n):
        if suppressed[k]:
            continue
        keep.append(k)
        suppressed |= ious[k] >= iou_thresh
    return np.asarray(keep, dtype=int)


def nms(detections: Sequence[tuple], iou_thresh: float) -> list:
    """Greedy NMS over ``(box, score)`` pairs; returns the kept pairs."""
    if len(detections) == 0:
        if not 0.0 < iou_thresh < 1.0:
            raise ConfigError(f"NMS threshold must lie in (0, 1), got {iou_thresh}")
        return []
    boxes = boxes_to_array([d[0] for d in detections])
    scores = np.array([d[1] for d in detections], dtype=np.float64)
    return [detections[i] for i in nms_indices(boxes, scores, iou_thresh)]


def max_iou(box: BoundingBox, others: Sequence[BoundingBox]) -> float:
    return max((iou(box, o) for o in others), default=0.0)
