"""Toy two-stage detector: conv backbone, anchor proposal layer, RoI max
pooling, and a subnetwork with a classification head and a box-regression head.

Training plugs negative reselection into the RoI sampling step; inference
optionally runs the classifier filter before the subnetwork and the
split-proposal gate after it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn, weightio
from .classifier import ClassifierScorer, ClassifierWeights, normalize_image
from .errors import ConfigError, FormatError, GeometryError, TrainingError
from .geometry import BoundingBox, boxes_to_array, clip_to_image, iou_matrix, split_vertical
from .refinement import (FrpThresholds, Proposal, SfrpScores, assign_by_iou, cfrp_filter,
                         greedy_suppress, nms, sfrp_decide, tfrp_refine, tfrp_training_set)

log = logging.getLogger(__name__)

MAGIC = b"FRPD"
# exp() guard for log-scale deltas
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class AnchorConfig:
    # anchor heights in pixels; width = height / aspect
    scales: tuple = (36.0, 48.0, 64.0)
    aspect: float = 2.5

    @property
    def count(self) -> int:
        return len(self.scales)


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 1
    backbone_channels: tuple = (8, 16, 32)
    rpn_channels: int = 32
    pool_size: int = 4
    hidden: int = 64
    anchors: AnchorConfig = AnchorConfig()
    proposal_nms: float = 0.7
    detection_nms: float = 0.5
    min_box_size: float = 2.0
    pre_nms_top_n: int = 300
    bbox_std: tuple = (0.1, 0.1, 0.2, 0.2)

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)


@dataclass(frozen=True)
class InferenceMode:
    use_cfrp: bool = False
    use_sfrp: bool = False

    @classmethod
    def named(cls, name: str) -> "InferenceMode":
        modes = {"baseline": cls(False, False), "sfrp": cls(False, True),
                 "compact": cls(False, True), "cfrp": cls(True, False), "full": cls(True, True)}
        if name not in modes:
            raise ConfigError(f"unknown mode {name!r}; choose from {sorted(modes)}")
        return modes[name]


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    sfrp: Optional[SfrpScores] = None
    proposal: Optional[BoundingBox] = None


def param_shapes(cfg: DetectorConfig) -> dict:
    shapes = {}
    c = cfg.in_channels
    for i, width in enumerate(cfg.backbone_channels):
        shapes[f"backbone.conv{i}.w"] = (width, c, 3, 3)
        shapes[f"backbone.conv{i}.b"] = (width,)
        c = width
    a = cfg.anchors.count
    shapes["rpn.conv.w"] = (cfg.rpn_channels, c, 3, 3)
    shapes["rpn.conv.b"] = (cfg.rpn_channels,)
    shapes["rpn.cls.w"] = (cfg.rpn_channels, a)
    shapes["rpn.cls.b"] = (a,)
    shapes["rpn.reg.w"] = (cfg.rpn_channels, 4 * a)
    shapes["rpn.reg.b"] = (4 * a,)
    pooled = cfg.pool_size * cfg.pool_size * c
    shapes["head.fc.w"] = (pooled, cfg.hidden)
    shapes["head.fc.b"] = (cfg.hidden,)
    shapes["head.cls.w"] = (cfg.hidden, 1)
    shapes["head.cls.b"] = (1,)
    shapes["head.reg.w"] = (cfg.hidden, 4)
    shapes["head.reg.b"] = (4,)
    return shapes


HEAD_PARAMS = ("head.fc.w", "head.fc.b", "head.cls.w", "head.cls.b", "head.reg.w", "head.reg.b")


@dataclass
class DetectorWeights:
    config: DetectorConfig
    params: dict
    version: int = weightio.FORMAT_VERSION

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = set(shapes) ^ set(self.params)
            raise ConfigError(f"detector parameter names differ from config: {sorted(missing)}")
        for k, shape in shapes.items():
            v = self.params[k]
            if v.shape != shape:
                raise ConfigError(f"{k} has shape {v.shape}, expected {shape}")
            if not np.all(np.isfinite(v)):
                raise ConfigError(f"{k} has non-finite values")

    def copy(self) -> "DetectorWeights":
        return DetectorWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def equals(self, other: "DetectorWeights") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items())


def init_detector(cfg: DetectorConfig, rng: np.random.Generator) -> DetectorWeights:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif len(shape) == 4:
            params[name] = nn.he_init(rng, shape, shape[1] * 9)
        elif name in ("rpn.cls.w", "rpn.reg.w", "head.cls.w", "head.reg.w"):
            params[name] = rng.normal(0.0, 0.01, size=shape)
        else:
            params[name] = nn.he_init(rng, shape, shape[0])
    return DetectorWeights(cfg, params)


# --- backbone and proposal layer -------------------------------------------

def _image_batch(w: DetectorWeights, image) -> np.ndarray:
    img = normalize_image(image)
    if img.ndim != 3 or img.shape[2] != w.config.in_channels:
        raise ConfigError(f"image shape {img.shape} does not match detector input "
                          f"with {w.config.in_channels} channel(s)")
    s = w.config.stride
    if img.shape[0] % s or img.shape[1] % s:
        raise ConfigError(f"image size {img.shape[:2]} is not divisible by the stride {s}")
    return img[None]


def _backbone(w: DetectorWeights, image, keep_cache: bool):
    h = _image_batch(w, image)
    caches = []
    for i in range(len(w.config.backbone_channels)):
        h, c1 = nn.conv3x3_forward(h, w.params[f"backbone.conv{i}.w"], w.params[f"backbone.conv{i}.b"])
        h, c2 = nn.relu_forward(h)
        h, c3 = nn.maxpool2_forward(h, need_grad=keep_cache)
        caches.append((c1, c2, c3) if keep_cache else None)
    return h, caches


def _backbone_backward(w: DetectorWeights, dfeat, caches, grads):
    dh = dfeat
    for i in range(len(w.config.backbone_channels) - 1, -1, -1):
        c1, c2, c3 = caches[i]
        dh = nn.maxpool2_backward(dh, c3)
        dh = nn.relu_backward(dh, c2)
        dh, dw, db = nn.conv3x3_backward(dh, c1, need_dx=i > 0)
        grads[f"backbone.conv{i}.w"] = dw
        grads[f"backbone.conv{i}.b"] = db


def backbone_forward(w: DetectorWeights, image) -> np.ndarray:
    """Feature grid ``(H / stride, W / stride, C)`` of one image."""
    return _backbone(w, image, False)[0][0]


def _rpn(w: DetectorWeights, feats, keep_cache: bool):
    h, c1 = nn.conv3x3_forward(feats[None], w.params["rpn.conv.w"], w.params["rpn.conv.b"])
    h, c2 = nn.relu_forward(h)
    hh, ww, c = h.shape[1:]
    flat = h.reshape(-1, c)
    logits, c3 = nn.dense_forward(flat, w.params["rpn.cls.w"], w.params["rpn.cls.b"])
    deltas, c4 = nn.dense_forward(flat, w.params["rpn.reg.w"], w.params["rpn.reg.b"])
    # anchor order: cell row, cell column, anchor scale
    logits = logits.reshape(-1)
    deltas = deltas.reshape(-1, 4)
    return logits, deltas, ((c1, c2, c3, c4, h.shape) if keep_cache else None)


def _rpn_backward(w: DetectorWeights, dlogits, ddeltas, cache, grads):
    c1, c2, c3, c4, shape = cache
    a = w.config.anchors.count
    dflat1, grads["rpn.cls.w"], grads["rpn.cls.b"] = nn.dense_backward(dlogits.reshape(-1, a), c3)
    dflat2, grads["rpn.reg.w"], grads["rpn.reg.b"] = nn.dense_backward(ddeltas.reshape(-1, 4 * a), c4)
    dh = (dflat1 + dflat2).reshape(shape)
    dh = nn.relu_backward(dh, c2)
    dfeat, grads["rpn.conv.w"], grads["rpn.conv.b"] = nn.conv3x3_backward(dh, c1)
    return dfeat[0]


def make_anchors(cfg: DetectorConfig, feat_h: int, feat_w: int) -> np.ndarray:
    """``(feat_h * feat_w * A, 4)`` anchors centred on feature cells."""
    s = cfg.stride
    hs = np.asarray(cfg.anchors.scales, dtype=np.float64)
    ws = hs / cfg.anchors.aspect
    cy, cx = np.mgrid[0:feat_h, 0:feat_w] * s + s / 2.0
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = np.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], axis=-1)
    return boxes.reshape(-1, 4)


def encode_deltas(boxes: np.ndarray, targets: np.ndarray, stds=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Center/size regression targets mapping ``boxes`` onto ``targets``."""
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + 0.5 * bw, boxes[:, 1] + 0.5 * bh
    tw, th = targets[:, 2] - targets[:, 0], targets[:, 3] - targets[:, 1]
    tx, ty = targets[:, 0] + 0.5 * tw, targets[:, 1] + 0.5 * th
    d = np.stack([(tx - bx) / bw, (ty - by) / bh, np.log(tw / bw), np.log(th / bh)], axis=1)
    return d / np.asarray(stds)


def decode_deltas(boxes: np.ndarray, deltas: np.ndarray, stds=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    d = deltas * np.asarray(stds)
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + 0.5 * bw, boxes[:, 1] + 0.5 * bh
    cx, cy = bx + d[:, 0] * bw, by + d[:, 1] * bh
    w = bw * np.exp(np.minimum(d[:, 2], MAX_LOG_SCALE))
    h = bh * np.exp(np.minimum(d[:, 3], MAX_LOG_SCALE))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    # zero deltas must reproduce the input exactly
    zero = np.all(d == 0.0, axis=1)
    out[zero] = boxes[zero]
    return out


def _clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    return out


def proposals_from_outputs(cfg: DetectorConfig, logits, deltas, feat_shape, image_hw,
                           top_k: int) -> list:
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    height, width = image_hw
    anchors = make_anchors(cfg, feat_shape[0], feat_shape[1])
    boxes = _clip_array(decode_deltas(anchors, deltas), width, height)
    scores = nn.sigmoid(logits)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_box_size) & \
         ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_box_size)
    idx = np.where(ok)[0]
    # stable: equal objectness keeps anchor index order
    idx = idx[np.argsort(-scores[idx], kind="stable")][:cfg.pre_nms_top_n]
    kept = idx[greedy_suppress(boxes[idx], cfg.proposal_nms)][:top_k]
    return [Proposal(BoundingBox.from_array(boxes[i]), float(scores[i])) for i in kept]


def generate_proposals(w: DetectorWeights, feats: np.ndarray, image_hw, top_k: int) -> list:
    """Score anchors, decode and clip them, suppress at IoU 0.7, keep the top_k."""
    logits, deltas, _ = _rpn(w, feats, False)
    return proposals_from_outputs(w.config, logits, deltas, feats.shape[:2], image_hw, top_k)


# --- RoI pooling ------------------------------------------------------------

def _bin_ranges(a: float, b: float, bins: int, n: int) -> list:
    width = (b - a) / bins
    out = []
    for i in range(bins):
        s = math.floor(a + i * width)
        e = math.ceil(a + (i + 1) * width)
        # bins past the grid edge fall back to the nearest covered cell
        s = min(max(s, 0), n - 1)
        e = min(max(e, s + 1), n)
        out.append((s, e))
    return out


def roi_bins(box: BoundingBox, output_size: int, stride: float, grid_h: int, grid_w: int):
    fx1, fy1, fx2, fy2 = (v / stride for v in box.as_tuple())
    if fx2 <= 0 or fy2 <= 0 or fx1 >= grid_w or fy1 >= grid_h:
        raise GeometryError(f"box {box.as_tuple()} projects outside the {grid_w}x{grid_h} grid")
    return (_bin_ranges(fy1, fy2, output_size, grid_h), _bin_ranges(fx1, fx2, output_size, grid_w))


def roi_pool(feats: np.ndarray, box: BoundingBox, output_size: int = 4,
             stride: float = 8) -> np.ndarray:
    """Max-pool the projected box region into an ``output_size`` square grid."""
    gh, gw, c = feats.shape
    yr, xr = roi_bins(box, output_size, stride, gh, gw)
    out = np.empty((output_size, output_size, c))
    for i, (ys, ye) in enumerate(yr):
        rows = feats[ys:ye]
        for j, (xs, xe) in enumerate(xr):
            out[i, j] = rows[:, xs:xe].max(axis=(0, 1))
    return out


def _roi_pool_indexed(feats, box, output_size, stride):
    gh, gw, c = feats.shape
    yr, xr = roi_bins(box, output_size, stride, gh, gw)
    out = np.empty((output_size, output_size, c))
    idx = np.empty((output_size, output_size, c), dtype=np.int64)
    chan = np.arange(c)
    for i, (ys, ye) in enumerate(yr):
        for j, (xs, xe) in enumerate(xr):
            region = feats[ys:ye, xs:xe].reshape(-1, c)
            k = region.argmax(axis=0)
            out[i, j] = region[k, chan]
            bw = xe - xs
            idx[i, j] = (ys + k // bw) * gw + xs + k % bw
    return out, idx


def roi_pool_many(feats, boxes: Sequence[BoundingBox], output_size: int, stride: float):
    if not boxes:
        return np.zeros((0, output_size, output_size, feats.shape[2]))
    return np.stack([roi_pool(feats, b, output_size, stride) for b in boxes])


# --- subnetwork -------------------------------------------------------------

def _head(w: DetectorWeights, pooled, keep_cache: bool):
    x = pooled.reshape(len(pooled), -1)
    h, c1 = nn.dense_forward(x, w.params["head.fc.w"], w.params["head.fc.b"])
    h, c2 = nn.relu_forward(h)
    logits, c3 = nn.dense_forward(h, w.params["head.cls.w"], w.params["head.cls.b"])
    deltas, c4 = nn.dense_forward(h, w.params["head.reg.w"], w.params["head.reg.b"])
    return logits[:, 0], deltas, ((c1, c2, c3, c4, pooled.shape) if keep_cache else None)


def _head_backward(w, dlogits, ddeltas, cache, grads):
    c1, c2, c3, c4, shape = cache
    dh1, grads["head.cls.w"], grads["head.cls.b"] = nn.dense_backward(dlogits[:, None], c3)
    dh2, grads["head.reg.w"], grads["head.reg.b"] = nn.dense_backward(ddeltas, c4)
    dh = nn.relu_backward(dh1 + dh2, c2)
    dx, grads["head.fc.w"], grads["head.fc.b"] = nn.dense_backward(dh, c1)
    return dx.reshape(shape)


def subnetwork_forward(w: DetectorWeights, pooled: np.ndarray):
    """Classification scores ``(N,)`` in (0, 1) and regression deltas ``(N, 4)``."""
    pooled = np.asarray(pooled, dtype=np.float64)
    single = pooled.ndim == 3
    if single:
        pooled = pooled[None]
    p, c = w.config.pool_size, w.config.backbone_channels[-1]
    if pooled.shape[1:] != (p, p, c):
        raise ConfigError(f"pooled shape {pooled.shape[1:]} does not match head input {(p, p, c)}")
    logits, deltas, _ = _head(w, pooled, False)
    scores = nn.sigmoid(logits)
    if single:
        return float(scores[0]), deltas[0]
    return scores, deltas


# --- inference --------------------------------------------------------------

def as_scorer(classifier):
    if classifier is None or callable(classifier):
        return classifier
    if isinstance(classifier, ClassifierWeights):
        return ClassifierScorer(classifier)
    raise ConfigError(f"cannot use {type(classifier).__name__} as a proposal scorer")


def detect_candidates(w: DetectorWeights, classifier, image, mode: InferenceMode,
                      thresholds: FrpThresholds, top_k: int) -> list:
    """Detections surviving the score gates, before NMS, in proposal order."""
    cfg = w.config
    img = normalize_image(image)
    height, width = img.shape[:2]
    feats = backbone_forward(w, img)
    proposals = generate_proposals(w, feats, (height, width), top_k)
    if mode.use_cfrp and proposals:
        scorer = as_scorer(classifier)
        if scorer is None:
            raise ConfigError("classifier filtering requested without a classifier")
        proposals = cfrp_filter(proposals, scorer, img, thresholds.eps_c)
    if not proposals:
        return []
    boxes = [p.box for p in proposals]
    scores, deltas = subnetwork_forward(w, roi_pool_many(feats, boxes, cfg.pool_size, cfg.stride))
    if mode.use_sfrp:
        halves = [split_vertical(b) for b in boxes]
        left, _ = subnetwork_forward(
            w, roi_pool_many(feats, [h[0] for h in halves], cfg.pool_size, cfg.stride))
        right, _ = subnetwork_forward(
            w, roi_pool_many(feats, [h[1] for h in halves], cfg.pool_size, cfg.stride))
        split = [SfrpScores(float(s), float(l), float(r)) for s, l, r in zip(scores, left, right)]
        keep = [sfrp_decide(s, thresholds.eps, thresholds.eps_s) for s in split]
    else:
        split = [None] * len(boxes)
        keep = [float(s) >= thresholds.eps for s in scores]
    out = []
    decoded = decode_deltas(boxes_to_array(boxes), deltas, cfg.bbox_std)
    for i, k in enumerate(keep):
        if not k:
            continue
        try:
            box = clip_to_image(BoundingBox.from_array(decoded[i]), width, height)
        except GeometryError:
            box = None
        if box is None:
            continue
        out.append(Detection(box, float(scores[i]), split[i], boxes[i]))
    return out


def detect(w: DetectorWeights, classifier, image, mode: InferenceMode,
           thresholds: FrpThresholds, top_k: int = 50) -> list:
    """Full inference pipeline; detections sorted by descending score."""
    cands = detect_candidates(w, classifier, image, mode, thresholds, top_k)
    kept = nms([(d.box, d.score, d) for d in cands], w.config.detection_nms)
    return [k[2] for k in kept]


# --- training ---------------------------------------------------------------

@dataclass
class DetectorTrainConfig:
    epochs: int = 3
    # overrides epochs when set
    steps: Optional[int] = None
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    top_k_train: int = 64
    roi_batch: int = 64
    rpn_batch: int = 64
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    reg_weight: float = 1.0
    tfrp: bool = True


@dataclass
class TrainingBatch:
    """Everything the loss needs for one image, frozen so it can be re-evaluated."""

    anchor_index: np.ndarray
    anchor_label: np.ndarray
    anchor_target: np.ndarray  # regression targets for positive anchors
    rois: list
    roi_label: np.ndarray
    roi_target: np.ndarray     # (n_pos_rois, 4), scaled by bbox_std


def _rpn_targets(cfg: DetectorConfig, tcfg: DetectorTrainConfig, anchors, gts, rng):
    g = boxes_to_array(gts)
    n = len(anchors)
    labels = np.full(n, -1)
    if len(g):
        ious = iou_matrix(anchors, g)
        best = ious.max(axis=1)
        best_gt = ious.argmax(axis=1)
        labels[best < tcfg.rpn_neg_iou] = 0
        labels[best >= tcfg.rpn_pos_iou] = 1
        for j in range(len(g)):
            if ious[:, j].max() > 0:
                labels[ious[:, j] == ious[:, j].max()] = 1
    else:
        labels[:] = 0
        best_gt = np.zeros(n, dtype=int)
    pos = np.where(labels == 1)[0]
    neg = np.where(labels == 0)[0]
    pos = pos[rng.permutation(len(pos))][:tcfg.rpn_batch // 2]
    neg = neg[rng.permutation(len(neg))][:tcfg.rpn_batch - len(pos)]
    index = np.concatenate([pos, neg])
    label = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    target = encode_deltas(anchors[pos], g[best_gt[pos]]) if len(pos) else np.zeros((0, 4))
    return index, label, target


def sample_rois(proposals, gts, scorer, image, thresholds: FrpThresholds,
                tcfg: DetectorTrainConfig, bbox_std, rng, stats: Optional[dict] = None):
    """Sample the RoI mini-batch for one image.

    Proposals are split by IoU, at most a quarter of ``roi_batch`` positives are
    drawn, then negatives are visited in random order and (with TFRP on)
    reselected by the classifier until the negative quota is filled. The quota
    is three negatives per positive, at least 16, within ``roi_batch``.
    """
    assign = assign_by_iou(proposals, gts, thresholds.eps_iou)
    pos_order = rng.permutation(len(assign.positives))[:tcfg.roi_batch // 4]
    positives = [assign.positives[i] for i in pos_order]
    pos_gt = [assign.best_gt[assign.positive_index[i]] for i in pos_order]
    quota = min(tcfg.roi_batch - len(positives), max(3 * len(positives), 16))
    order = rng.permutation(len(assign.negatives))
    negatives = []
    start = 0
    removed = 0
    while len(negatives) < quota and start < len(order):
        chunk = [assign.negatives[i] for i in order[start:start + quota - len(negatives)]]
        start += len(chunk)
        if tcfg.tfrp:
            kept = tfrp_refine(chunk, scorer, image, thresholds.eps_t)
            removed += len(chunk) - len(kept)
            chunk = kept
        negatives.extend(chunk)
    if stats is not None:
        stats["tfrp_removed"] = stats.get("tfrp_removed", 0) + removed
    training = tfrp_training_set(positives, negatives)
    rois = [p.box for p, _ in training]
    labels = np.array([lab for _, lab in training], dtype=np.float64)
    if positives:
        g = boxes_to_array(gts)
        target = encode_deltas(boxes_to_array([p.box for p in positives]), g[pos_gt], bbox_std)
    else:
        target = np.zeros((0, 4))
    return rois, labels, target


def detector_loss(w: DetectorWeights, image, batch: TrainingBatch, reg_weight: float = 1.0,
                  need_grad: bool = True, parts: Optional[dict] = None):
    """Total loss for one image and its gradient with respect to every parameter.

    loss = BCE(anchors) + smooth-L1(positive anchors)
         + BCE(RoIs) + reg_weight * smooth-L1(positive RoIs)
    """
    cfg = w.config
    feats, bcache = _backbone(w, image, need_grad)
    feats = feats[0]
    logits, deltas, rcache = _rpn(w, feats, need_grad)
    grads = {}
    # proposal layer
    a_idx = batch.anchor_index
    loss_obj, dlog_sel = nn.bce_with_logits(logits[a_idx], batch.anchor_label)
    pos_a = a_idx[batch.anchor_label == 1]
    n_pos_a = max(len(pos_a), 1)
    loss_box, dbox = nn.smooth_l1(deltas[pos_a] - batch.anchor_target, beta=1.0 / 9.0)
    loss = loss_obj + loss_box / n_pos_a
    # subnetwork
    n_roi = len(batch.rois)
    if n_roi:
        pooled_idx = [_roi_pool_indexed(feats, b, cfg.pool_size, cfg.stride) for b in batch.rois]
        pooled = np.stack([p for p, _ in pooled_idx])
        h_logits, h_deltas, hcache = _head(w, pooled, True)
        loss_cls, dh_logits = nn.bce_with_logits(h_logits, batch.roi_label)
        pos_r = np.where(batch.roi_label == 1)[0]
        loss_reg, dreg = nn.smooth_l1(h_deltas[pos_r] - batch.roi_target, beta=1.0)
        n_pos_r = max(len(pos_r), 1)
        loss += loss_cls + reg_weight * loss_reg / n_pos_r
    if parts is not None:
        parts.update(rpn_cls=loss_obj, rpn_reg=loss_box / n_pos_a,
                     roi_cls=loss_cls if n_roi else 0.0,
                     roi_reg=loss_reg / n_pos_r if n_roi else 0.0)
    if not need_grad:
        return loss, None
    dlogits = np.zeros_like(logits)
    dlogits[a_idx] = dlog_sel
    ddeltas = np.zeros_like(deltas)
    ddeltas[pos_a] = dbox / n_pos_a
    dfeat = _rpn_backward(w, dlogits, ddeltas, rcache, grads)
    if n_roi:
        dh_deltas = np.zeros_like(h_deltas)
        dh_deltas[pos_r] = reg_weight * dreg / n_pos_r
        dpooled = _head_backward(w, dh_logits, dh_deltas, hcache, grads)
        gh, gw, c = feats.shape
        flat = dfeat.reshape(-1, c)
        idx = np.stack([i for _, i in pooled_idx])
        chan = np.broadcast_to(np.arange(c), idx.shape)
        np.add.at(flat, (idx.ravel(), chan.ravel()), dpooled.ravel())
        dfeat = flat.reshape(gh, gw, c)
    else:
        for k in HEAD_PARAMS:
            grads[k] = np.zeros_like(w.params[k])
    _backbone_backward(w, dfeat[None], bcache, grads)
    return loss, grads


def head_loss_and_gradient(w: DetectorWeights, pooled, labels, targets, reg_weight: float = 1.0):
    """Subnetwork loss on pre-pooled features; gradients for the head parameters."""
    pooled = np.asarray(pooled, dtype=np.float64)
    logits, deltas, cache = _head(w, pooled, True)
    loss_cls, dlogits = nn.bce_with_logits(logits, labels)
    pos = np.where(np.asarray(labels) == 1)[0]
    n_pos = max(len(pos), 1)
    loss_reg, dreg = nn.smooth_l1(deltas[pos] - targets, beta=1.0)
    ddeltas = np.zeros_like(deltas)
    ddeltas[pos] = reg_weight * dreg / n_pos
    grads = {}
    dpooled = _head_backward(w, dlogits, ddeltas, cache, grads)
    return loss_cls + reg_weight * loss_reg / n_pos, grads, dpooled


def build_batch(w: DetectorWeights, image, gts, scorer, thresholds: FrpThresholds,
                tcfg: DetectorTrainConfig, rng, stats: Optional[dict] = None) -> TrainingBatch:
    cfg = w.config
    img = normalize_image(image)
    height, width = img.shape[:2]
    feats = backbone_forward(w, img)
    logits, deltas, _ = _rpn(w, feats, False)
    anchors = make_anchors(cfg, feats.shape[0], feats.shape[1])
    a_idx, a_lab, a_tgt = _rpn_targets(cfg, tcfg, anchors, gts, rng)
    proposals = proposals_from_outputs(cfg, logits, deltas, feats.shape[:2], (height, width),
                                       tcfg.top_k_train)
    # gt boxes join the proposal pool so every image with pedestrians has positives
    proposals = proposals + [Proposal(g, 1.0) for g in gts]
    rois, labels, target = sample_rois(proposals, gts, scorer, img, thresholds, tcfg,
                                       cfg.bbox_std, rng, stats)
    return TrainingBatch(a_idx, a_lab, a_tgt, rois, labels, target)


def train_detector(dataset, classifier, thresholds: FrpThresholds, hyper: DetectorTrainConfig,
                   seed: int, config: Optional[DetectorConfig] = None,
                   init: Optional[DetectorWeights] = None,
                   history: Optional[list] = None) -> DetectorWeights:
    """SGD with momentum, one image per step, images reshuffled every epoch.

    ``dataset`` is a sequence of objects with ``.image`` and ``.gts``.
    ``history`` receives ``(step, loss)`` per step.
    """
    if not len(dataset):
        raise ConfigError("detector training needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    if init is None:
        cfg = config or DetectorConfig(in_channels=dataset[0].image.shape[2])
        w = init_detector(cfg, rng)
    else:
        w = init.copy()
    scorer = as_scorer(classifier) if hyper.tfrp else None
    if hyper.tfrp and scorer is None:
        raise ConfigError("negative reselection needs a pretrained classifier")
    n_steps = hyper.steps if hyper.steps is not None else hyper.epochs * len(dataset)
    velocity = {k: np.zeros_like(v) for k, v in w.params.items()}
    stats: dict = {}
    order = np.zeros(0, dtype=int)
    for step in range(n_steps):
        pos = step % len(dataset)
        if pos == 0:
            order = rng.permutation(len(dataset))
        item = dataset[order[pos]]
        batch = build_batch(w, item.image, item.gts, scorer, thresholds, hyper, rng, stats)
        loss, grads = detector_loss(w, item.image, batch, hyper.reg_weight)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite detector loss at step {step}", step=step)
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, hyper.grad_clip / norm) if norm > 0 else 1.0
        for k, p in w.params.items():
            g = grads[k] * scale
            if k.endswith(".w"):
                g = g + hyper.weight_decay * p
            velocity[k] = hyper.momentum * velocity[k] - hyper.learning_rate * g
            p += velocity[k]
        if history is not None:
            history.append((step, loss))
    if not all(np.all(np.isfinite(v)) for v in w.params.values()):
        raise TrainingError("non-finite detector weights after training", step=n_steps)
    log.info("detector training: %d steps, %d negatives removed by reselection",
             n_steps, stats.get("tfrp_removed", 0))
    w.stats = stats
    return w


# --- serialization ----------------------------------------------------------

_CFG_KEYS = ("in_channels", "rpn_channels", "pool_size", "hidden", "proposal_nms",
             "detection_nms", "min_box_size", "pre_nms_top_n")


def save_detector(w: DetectorWeights, path) -> None:
    cfg = w.config
    meta = {k: getattr(cfg, k) for k in _CFG_KEYS}
    meta["anchor_aspect"] = cfg.anchors.aspect
    for i, s in enumerate(cfg.anchors.scales):
        meta[f"anchor_scale{i}"] = s
    for i, s in enumerate(cfg.bbox_std):
        meta[f"bbox_std{i}"] = s
    records = []
    c = cfg.in_channels
    for i, width in enumerate(cfg.backbone_channels):
        records.append(weightio.LayerRecord(f"backbone.conv{i}", "conv", 3, 1, c, width,
                                            [w.params[f"backbone.conv{i}.w"],
                                             w.params[f"backbone.conv{i}.b"]]))
        records.append(weightio.LayerRecord(f"backbone.pool{i}", "pool", 2, 2, width, width))
        c = width
    a = cfg.anchors.count
    specs = [("rpn.conv", "conv", 3, c, cfg.rpn_channels),
             ("rpn.cls", "fc", 1, cfg.rpn_channels, a),
             ("rpn.reg", "fc", 1, cfg.rpn_channels, 4 * a),
             ("head.fc", "fc", cfg.pool_size, cfg.pool_size ** 2 * c, cfg.hidden),
             ("head.cls", "fc", 1, cfg.hidden, 1),
             ("head.reg", "fc", 1, cfg.hidden, 4)]
    for name, kind, f, cin, cout in specs:
        records.append(weightio.LayerRecord(name, kind, f, 1, cin, cout,
                                            [w.params[f"{name}.w"], w.params[f"{name}.b"]]))
    weightio.write_file(path, MAGIC, meta, records)


def load_detector(path) -> DetectorWeights:
    meta, records = weightio.read_file(path, MAGIC)
    try:
        backbone = tuple(r.out_channels for r in records
                         if r.name.startswith("backbone.conv"))
        n_scales = len([k for k in meta if k.startswith("anchor_scale")])
        anchors = AnchorConfig(tuple(meta[f"anchor_scale{i}"] for i in range(n_scales)),
                               meta["anchor_aspect"])
        cfg = DetectorConfig(
            in_channels=int(meta["in_channels"]), backbone_channels=backbone,
            rpn_channels=int(meta["rpn_channels"]), pool_size=int(meta["pool_size"]),
            hidden=int(meta["hidden"]), anchors=anchors,
            proposal_nms=meta["proposal_nms"], detection_nms=meta["detection_nms"],
            min_box_size=meta["min_box_size"], pre_nms_top_n=int(meta["pre_nms_top_n"]),
            bbox_std=tuple(meta[f"bbox_std{i}"] for i in range(4)))
        params = {}
        for r in records:
            if r.kind == "pool":
                continue
            if len(r.tensors) != 2:
                raise FormatError(f"layer {r.name} has {len(r.tensors)} tensors, expected 2")
            params[f"{r.name}.w"], params[f"{r.name}.b"] = r.tensors
        return DetectorWeights(cfg, params)
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"inconsistent detector weight file {path}: {exc}") from exc
