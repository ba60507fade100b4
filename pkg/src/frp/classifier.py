"""Small CNN pedestrian classifier F(x).

The default network is ``(conv3x3 + ReLU, maxpool2) x 4`` followed by one
fully-connected layer and a sigmoid: nine layers on a 64x64 input.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn, weightio
from .errors import ConfigError, DataError, FormatError, GeometryError, TrainingError
from .geometry import BoundingBox, clip_to_image

log = logging.getLogger(__name__)

PATCH_SIZE = 64
MAGIC = b"FRPC"
DEFAULT_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the classifier.

    For ``fc`` layers ``filter_size`` is the spatial side of the map the layer
    reads (a fully-connected layer is a filter covering its whole input).
    """

    kind: str
    filter_size: int
    stride: int
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind == "conv":
            if self.filter_size != 3 or self.stride != 1:
                raise ConfigError(f"conv layers must be 3x3 stride 1, got {self}")
        elif self.kind == "pool":
            if self.filter_size != 2 or self.stride != 2:
                raise ConfigError(f"pool layers must be 2x2 stride 2, got {self}")
        elif self.kind == "fc":
            if self.filter_size < 1 or self.stride != 1:
                raise ConfigError(f"bad fc layer {self}")
        else:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "fc") and (self.in_channels < 1 or self.out_channels < 1):
            raise ConfigError(f"{self.kind} layer needs positive channel counts, got {self}")


def default_specs(in_channels: int = 1, widths: Sequence[int] = DEFAULT_WIDTHS,
                  input_size: int = PATCH_SIZE) -> list[LayerSpec]:
    specs = []
    c, size = in_channels, input_size
    for width in widths:
        specs.append(LayerSpec("conv", 3, 1, c, width))
        specs.append(LayerSpec("pool", 2, 2))
        c, size = width, size // 2
    specs.append(LayerSpec("fc", size, 1, c * size * size, 1))
    return specs


def receptive_field(specs: Sequence[LayerSpec]) -> list[int]:
    """Receptive field of every layer, ``r_n = r_{n-1} + (f_n - 1) * prod(s_1..s_{n-1})``."""
    if not specs:
        raise ConfigError("receptive_field needs at least one layer")
    out = []
    r, jump = 1, 1
    for spec in specs:
        r = r + (spec.filter_size - 1) * jump
        jump *= spec.stride
        out.append(r)
    return out


@dataclass
class ClassifierWeights:
    specs: list
    # per layer: (W, b) for conv/fc, None for pool
    params: list
    input_size: int = PATCH_SIZE
    in_channels: int = 1
    version: int = weightio.FORMAT_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.specs) != len(self.params):
            raise ConfigError("specs and params have different lengths")
        c, size = self.in_channels, self.input_size
        for i, (spec, p) in enumerate(zip(self.specs, self.params)):
            if spec.kind == "conv":
                if spec.in_channels != c:
                    raise ConfigError(f"layer {i}: expects {spec.in_channels} channels, gets {c}")
                self._check(i, p, (spec.out_channels, c, 3, 3), (spec.out_channels,))
                c = spec.out_channels
            elif spec.kind == "pool":
                if p is not None:
                    raise ConfigError(f"layer {i}: pool layer carries parameters")
                if size < 2:
                    raise ConfigError(f"layer {i}: cannot pool a {size}x{size} map")
                size //= 2
            else:
                if spec.in_channels != c * size * size or spec.filter_size != size:
                    raise ConfigError(f"layer {i}: fc expects {spec.in_channels} inputs from a "
                                      f"{spec.filter_size}-wide map, gets {c}x{size}x{size}")
                self._check(i, p, (spec.in_channels, spec.out_channels), (spec.out_channels,))
                c, size = spec.out_channels, 1
        if self.specs[-1].kind != "fc" or self.specs[-1].out_channels != 1:
            raise ConfigError("last layer must be a fully-connected layer with one output")

    @staticmethod
    def _check(i, p, wshape, bshape):
        if p is None or len(p) != 2:
            raise ConfigError(f"layer {i}: missing parameters")
        w, b = p
        if w.shape != wshape or b.shape != bshape:
            raise ConfigError(f"layer {i}: parameter shapes {w.shape}/{b.shape}, "
                              f"expected {wshape}/{bshape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ConfigError(f"layer {i}: non-finite parameters")

    def num_params(self) -> int:
        return sum(w.size + b.size for p in self.params if p is not None for w, b in [p])

    def copy(self) -> "ClassifierWeights":
        params = [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params]
        return ClassifierWeights(list(self.specs), params, self.input_size, self.in_channels,
                                 self.version)

    def equals(self, other: "ClassifierWeights") -> bool:
        if (self.specs != other.specs or self.input_size != other.input_size
                or self.in_channels != other.in_channels):
            return False
        for p, q in zip(self.params, other.params):
            if (p is None) != (q is None):
                return False
            if p is not None and not (np.array_equal(p[0], q[0]) and np.array_equal(p[1], q[1])):
                return False
        return True


def init_weights(specs: Sequence[LayerSpec], rng: np.random.Generator,
                 input_size: int = PATCH_SIZE, in_channels: int = 1) -> ClassifierWeights:
    params = []
    for spec in specs:
        if spec.kind == "conv":
            fan_in = spec.in_channels * 9
            params.append((nn.he_init(rng, (spec.out_channels, spec.in_channels, 3, 3), fan_in),
                           np.zeros(spec.out_channels)))
        elif spec.kind == "fc":
            params.append((rng.normal(0.0, np.sqrt(1.0 / spec.in_channels),
                                      size=(spec.in_channels, spec.out_channels)),
                           np.zeros(spec.out_channels)))
        else:
            params.append(None)
    return ClassifierWeights(list(specs), params, input_size, in_channels)


def _as_batch(w: ClassifierWeights, patches) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3 and w.in_channels == 1 and x.shape[-1] != 1:
        x = x[..., None]  # (N, H, W) grayscale stack
    if x.ndim != 4:
        raise ConfigError(f"expected a patch batch (N, H, W, C), got shape {x.shape}")
    if x.shape[1:] != (w.input_size, w.input_size, w.in_channels):
        raise ConfigError(f"patch shape {x.shape[1:]} does not match classifier input "
                          f"{(w.input_size, w.input_size, w.in_channels)}")
    return x


def _forward(w: ClassifierWeights, x: np.ndarray, keep_cache: bool):
    caches = []
    h = x
    for spec, p in zip(w.specs, w.params):
        if spec.kind == "conv":
            h, c1 = nn.conv3x3_forward(h, p[0], p[1])
            h, c2 = nn.relu_forward(h)
            caches.append((c1, c2) if keep_cache else None)
        elif spec.kind == "pool":
            h, c = nn.maxpool2_forward(h, need_grad=keep_cache)
            caches.append(c)
        else:
            # fc input is the map flattened in (row, column, channel) order
            shape = h.shape
            h, c = nn.dense_forward(h.reshape(shape[0], -1), p[0], p[1])
            caches.append((c, shape) if keep_cache else None)
    return h[:, 0], caches


def forward_logits(w: ClassifierWeights, patches, batch_size: int = 64) -> np.ndarray:
    x = _as_batch(w, patches)
    out = [_forward(w, x[i:i + batch_size], False)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def forward_batch(w: ClassifierWeights, patches, batch_size: int = 64) -> np.ndarray:
    """Pedestrian confidence for a stack of patches, each in (0, 1)."""
    return nn.sigmoid(forward_logits(w, patches, batch_size))


def forward(w: ClassifierWeights, patch) -> float:
    p = np.asarray(patch, dtype=np.float64)
    return float(forward_batch(w, p[None])[0])


def loss_and_gradient(w: ClassifierWeights, patches, labels, scale: float = 1.0):
    """Mean binary cross-entropy (times ``scale``) and its gradient per layer.

    Gradients come back as a list aligned with ``w.params``: ``(dW, db)`` or None.
    """
    x = _as_batch(w, patches)
    if len(x) == 0:
        raise DataError("gradient needs a non-empty batch")
    logits, caches = _forward(w, x, True)
    loss, dlogit = nn.bce_with_logits(logits, labels)
    dh = (dlogit * scale)[:, None]
    grads = [None] * len(w.specs)
    for i in range(len(w.specs) - 1, -1, -1):
        spec = w.specs[i]
        if spec.kind == "fc":
            c, shape = caches[i]
            dh, dw, db = nn.dense_backward(dh, c)
            dh = dh.reshape(shape)
            grads[i] = (dw, db)
        elif spec.kind == "pool":
            dh = nn.maxpool2_backward(dh, caches[i])
        else:
            c1, c2 = caches[i]
            dh = nn.relu_backward(dh, c2)
            dh, dw, db = nn.conv3x3_backward(dh, c1, need_dx=i > 0)
            grads[i] = (dw, db)
    return loss * scale, grads


def gradient(w: ClassifierWeights, patches, labels, scale: float = 1.0):
    return loss_and_gradient(w, patches, labels, scale)[1]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 16


def train_classifier(patches, labels, config: TrainConfig, seed: int,
                     specs: Optional[Sequence[LayerSpec]] = None,
                     init: Optional[ClassifierWeights] = None,
                     history: Optional[list] = None) -> ClassifierWeights:
    """Plain minibatch SGD on binary cross-entropy; deterministic given ``seed``.

    ``history``, when given, receives the mean training loss of each epoch.
    """
    labels = np.asarray(labels, dtype=np.float64)
    patches = np.asarray(patches, dtype=np.float64)
    if not np.any(labels == 1.0) or not np.any(labels == 0.0):
        raise DataError("training needs at least one positive and one negative patch")
    if config.batch_size < 1 or config.epochs < 0 or not config.learning_rate > 0:
        raise ConfigError(f"invalid training config {config}")
    rng = np.random.default_rng(seed)
    if init is None:
        if patches.ndim == 3:
            in_ch, size = 1, patches.shape[1]
        else:
            in_ch, size = patches.shape[3], patches.shape[1]
        if specs is None:
            specs = default_specs(in_ch, input_size=size)
        w = init_weights(specs, rng, size, in_ch)
    else:
        w = init.copy()
    n = len(labels)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_gradient(w, patches[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite classifier loss in epoch {epoch}", step=epoch)
            total += loss * len(idx)
            for p, g in zip(w.params, grads):
                if p is not None:
                    for t, d in zip(p, g):
                        t -= config.learning_rate * d
        mean_loss = total / n
        if not all(np.all(np.isfinite(p[0])) for p in w.params if p is not None):
            raise TrainingError(f"non-finite classifier weights after epoch {epoch}", step=epoch)
        log.debug("classifier epoch %d loss %.5f", epoch, mean_loss)
        if history is not None:
            history.append(mean_loss)
    return w


def accuracy(w: ClassifierWeights, patches, labels) -> float:
    pred = forward_batch(w, patches) >= 0.5
    return float(np.mean(pred == (np.asarray(labels) == 1)))


# --- patch extraction -------------------------------------------------------

def normalize_image(image) -> np.ndarray:
    img = np.asarray(image)
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / 255.0
    else:
        img = np.clip(img.astype(np.float64), 0.0, 1.0)
    if img.ndim == 2:
        img = img[..., None]
    return img


def _resize_axis(a: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == out:
        return a
    # align-corners sampling: first and last output samples hit the source ends
    pos = np.arange(out) * ((n - 1) / (out - 1)) if n > 1 else np.zeros(out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def crop_window(box: BoundingBox, width: int, height: int):
    """Integer pixel window ``(r0, r1, c0, c1)`` covered by ``box`` after clipping."""
    clipped = clip_to_image(box, width, height)
    if clipped is None:
        raise GeometryError(f"box {box.as_tuple()} lies outside the {width}x{height} image")
    c0, c1 = int(math.floor(clipped.x1)), int(math.ceil(clipped.x2))
    r0, r1 = int(math.floor(clipped.y1)), int(math.ceil(clipped.y2))
    return r0, min(r1, height), c0, min(c1, width)


def extract_patch(image, box: BoundingBox, size: int = PATCH_SIZE) -> np.ndarray:
    """Crop ``box`` from ``image`` and resize it bilinearly to ``size x size x C``."""
    img = normalize_image(image)
    r0, r1, c0, c1 = crop_window(box, img.shape[1], img.shape[0])
    crop = img[r0:r1, c0:c1]
    return _resize_axis(_resize_axis(crop, size, 0), size, 1)


class ClassifierScorer:
    """Scorer backed by a trained classifier: crops each box and runs F on it.

    Boxes whose patch cannot be extracted get NaN, which the refinement rules
    treat as "unscored".
    """

    def __init__(self, weights: ClassifierWeights):
        self.weights = weights

    def __call__(self, image, boxes: Sequence[BoundingBox]) -> np.ndarray:
        scores = np.full(len(boxes), np.nan)
        img = normalize_image(image)
        patches, idx = [], []
        for i, b in enumerate(boxes):
            try:
                patches.append(extract_patch(img, b, self.weights.input_size))
            except GeometryError as exc:
                log.warning("patch extraction failed for box %s: %s", b.as_tuple(), exc)
                continue
            idx.append(i)
        if patches:
            scores[idx] = forward_batch(self.weights, np.stack(patches))
        return scores


# --- serialization ----------------------------------------------------------

def save_weights(w: ClassifierWeights, path) -> None:
    records = []
    for i, (spec, p) in enumerate(zip(w.specs, w.params)):
        tensors = [] if p is None else [p[0], p[1]]
        records.append(weightio.LayerRecord(f"layer{i}", spec.kind, spec.filter_size, spec.stride,
                                            spec.in_channels, spec.out_channels, tensors))
    meta = {"input_size": w.input_size, "in_channels": w.in_channels}
    weightio.write_file(path, MAGIC, meta, records)


def load_weights(path) -> ClassifierWeights:
    meta, records = weightio.read_file(path, MAGIC)
    try:
        specs = [LayerSpec(r.kind, r.filter_size, r.stride, r.in_channels, r.out_channels)
                 for r in records]
        params = []
        for r in records:
            if r.kind == "pool":
                if r.tensors:
                    raise FormatError(f"pool layer {r.name} carries tensors")
                params.append(None)
            else:
                if len(r.tensors) != 2:
                    raise FormatError(f"layer {r.name} has {len(r.tensors)} tensors, expected 2")
                params.append((r.tensors[0], r.tensors[1]))
        return ClassifierWeights(specs, params, int(meta["input_size"]), int(meta["in_channels"]))
    except (ConfigError, KeyError) as exc:
        raise FormatError(f"inconsistent classifier weight file {path}: {exc}") from exc
