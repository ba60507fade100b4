"""Synthetic pedestrian scenes, classifier patch sampling, and annotation files.

A pedestrian is drawn as head disc + torso + two legs. Distractors are
squares, horizontal bars and headless vertical bars; the vertical bar shares
the pedestrian's height and upright outline and is the deliberate source of
false positives.

On disk a dataset directory holds ``<id>.pgm`` (or ``.ppm``) images, ``<id>.txt``
annotations with one ``image_id x1 y1 x2 y2`` line per pedestrian, and a
``manifest.txt`` listing the ids in order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .classifier import PATCH_SIZE, extract_patch
from .errors import DataError, FormatError, GeometryError
from .geometry import BoundingBox, boxes_to_array, clip_to_image, iou, iou_matrix

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
DISTRACTOR_KINDS = ("square", "hbar", "vbar")
MAX_PLACEMENT_TRIES = 100


@dataclass
class AnnotatedImage:
    image: np.ndarray  # (H, W, C) float64 in [0, 1]
    gts: list
    id: str
    # synthetic scenes only; never written to annotation files
    distractors: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[..., None]
        h, w = self.image.shape[:2]
        for b in self.gts:
            if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                raise DataError(f"gt box {b.as_tuple()} outside {w}x{h} image {self.id}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class SceneConfig:
    width: int = 128
    height: int = 128
    channels: int = 1
    pedestrians: tuple = (1, 3)
    distractors: tuple = (1, 3)
    ped_height: tuple = (36.0, 64.0)
    # pedestrian height / width
    ped_aspect: float = 2.5
    distractor_kinds: tuple = DISTRACTOR_KINDS
    contrast: tuple = (0.25, 0.45)
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.channels <= 0:
            raise DataError("scene size and channel count must be positive")
        for name in ("pedestrians", "distractors", "ped_height", "contrast"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise DataError(f"bad range {name}={lo, hi}")
        if self.ped_height[0] <= 0 or self.ped_aspect <= 0 or self.noise < 0:
            raise DataError("pedestrian geometry and noise must be positive")
        if self.ped_height[1] > self.height:
            raise DataError("pedestrians taller than the image")
        for k in self.distractor_kinds:
            if k not in DISTRACTOR_KINDS:
                raise DataError(f"unknown distractor kind {k!r}")


def _rect_mask(xx, yy, x1, y1, x2, y2):
    return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)


def _pedestrian_mask(xx, yy, b: BoundingBox):
    w, h = b.width, b.height
    cx = b.x1 + w / 2
    r = 0.25 * w
    head = (xx - cx) ** 2 + (yy - (b.y1 + r)) ** 2 <= r * r
    torso = _rect_mask(xx, yy, cx - 0.3 * w, b.y1 + 2 * r, cx + 0.3 * w, b.y1 + 0.62 * h)
    leg_top = b.y1 + 0.58 * h
    left_leg = _rect_mask(xx, yy, b.x1, leg_top, b.x1 + 0.32 * w, b.y2)
    right_leg = _rect_mask(xx, yy, b.x2 - 0.32 * w, leg_top, b.x2, b.y2)
    return head | torso | left_leg | right_leg


def _background(cfg: SceneConfig, rng) -> np.ndarray:
    base = rng.uniform(0.3, 0.7)
    smooth = gaussian_filter(rng.normal(size=(cfg.height, cfg.width)), sigma=8.0, mode="wrap")
    smooth *= 0.08 / max(float(np.abs(smooth).max()), 1e-12)
    return base + smooth


def _paint(img, mask, rng, cfg: SceneConfig):
    level = float(img[..., 0][mask].mean()) if mask.any() else 0.5
    contrast = rng.uniform(*cfg.contrast)
    sign = 1.0 if level < 0.5 else -1.0
    if rng.random() < 0.25:
        sign = -sign
    img[mask] = np.clip(level + sign * contrast, 0.0, 1.0)


def _place(rng, cfg, w, h, existing_gts, existing_other, gt_limit, other_limit):
    for _ in range(MAX_PLACEMENT_TRIES):
        x1 = rng.uniform(0, cfg.width - w)
        y1 = rng.uniform(0, cfg.height - h)
        b = BoundingBox(x1, y1, x1 + w, y1 + h)
        if all(iou(b, g) <= gt_limit for g in existing_gts) and \
                all(iou(b, o) <= other_limit for o in existing_other):
            return b
    return None


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: str = "scene") -> AnnotatedImage:
    """Render one scene; deterministic given the state of ``rng``."""
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width] + 0.5
    img = np.repeat(_background(cfg, rng)[..., None], cfg.channels, axis=2)
    gts, distractors, masks = [], [], []
    n_ped = int(rng.integers(cfg.pedestrians[0], cfg.pedestrians[1] + 1))
    for _ in range(n_ped):
        h = rng.uniform(*cfg.ped_height)
        w = h / cfg.ped_aspect
        b = _place(rng, cfg, w, h, gts, [], 0.3, 1.0)
        if b is None:
            log.warning("%s: could not place pedestrian after %d tries", image_id,
                        MAX_PLACEMENT_TRIES)
            continue
        gts.append(b)
        masks.append(_pedestrian_mask(xx, yy, b))
    n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    for _ in range(n_dis if cfg.distractor_kinds else 0):
        kind = cfg.distractor_kinds[int(rng.integers(len(cfg.distractor_kinds)))]
        ph = rng.uniform(*cfg.ped_height)
        pw = ph / cfg.ped_aspect
        if kind == "vbar":
            w, h = pw * rng.uniform(0.5, 0.8), ph
        elif kind == "hbar":
            w, h = min(ph, cfg.width - 1.0), pw * rng.uniform(0.5, 0.8)
        else:
            w = h = min(pw * rng.uniform(1.0, 1.6), cfg.width - 1.0, cfg.height - 1.0)
        b = _place(rng, cfg, w, h, gts, distractors, 0.0, 0.3)
        if b is None:
            log.warning("%s: could not place %s distractor", image_id, kind)
            continue
        distractors.append(b)
        masks.append(_rect_mask(xx, yy, b.x1, b.y1, b.x2, b.y2))
    for m in masks:
        _paint(img, m, rng, cfg)
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    # quantise to 8 bits so an image survives a PGM round trip unchanged
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return AnnotatedImage(img, gts, image_id, distractors)


def scene_seed(cfg: SceneConfig, index: int) -> int:
    """Per-scene seed: configuration seed plus image index."""
    return cfg.seed + index


def generate_dataset(cfg: SceneConfig, n: int, first_index: int = 0,
                     prefix: str = "img") -> list:
    return [generate_scene(cfg, np.random.default_rng(scene_seed(cfg, i)), f"{prefix}{i:06d}")
            for i in range(first_index, first_index + n)]


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, 64, 64, C)
    labels: np.ndarray   # (N,) 1 pedestrian / 0 background
    boxes: list          # source box of each patch
    image_index: np.ndarray

    def __len__(self):
        return len(self.labels)


def _random_negative(rng, img: AnnotatedImage, ped_height, ped_aspect, hard_fraction):
    if img.distractors and rng.random() < hard_fraction:
        d = img.distractors[int(rng.integers(len(img.distractors)))]
        s = rng.uniform(0.85, 1.15)
        w, h = d.width * s, d.height * s
        cx = (d.x1 + d.x2) / 2 + rng.uniform(-0.1, 0.1) * w
        cy = (d.y1 + d.y2) / 2 + rng.uniform(-0.1, 0.1) * h
    else:
        h = min(rng.uniform(*ped_height), img.height)
        w = min(h / ped_aspect * rng.uniform(0.8, 1.25), img.width)
        cx = rng.uniform(w / 2, img.width - w / 2)
        cy = rng.uniform(h / 2, img.height - h / 2)
    x1 = min(max(cx - w / 2, 0.0), img.width - w)
    y1 = min(max(cy - h / 2, 0.0), img.height - h)
    return BoundingBox(max(x1, 0.0), max(y1, 0.0), min(x1 + w, img.width), min(y1 + h, img.height))


def _jitter(rng, g: BoundingBox, width: float, height: float) -> Optional[BoundingBox]:
    s = rng.uniform(0.85, 1.15, size=2)
    w, h = g.width * s[0], g.height * s[1]
    cx = (g.x1 + g.x2) / 2 + rng.uniform(-0.15, 0.15) * g.width
    cy = (g.y1 + g.y2) / 2 + rng.uniform(-0.15, 0.15) * g.height
    try:
        return clip_to_image(BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
                             width, height)
    except GeometryError:
        return None


def build_patch_dataset(images: Sequence[AnnotatedImage], negatives_per_image: int,
                        rng: np.random.Generator, hard_fraction: float = 0.5,
                        ped_height: tuple = (36.0, 64.0), ped_aspect: float = 2.5,
                        max_tries: int = 20, size: int = PATCH_SIZE,
                        jittered_positives: int = 0, min_positive_iou: float = 0.6) -> PatchSet:
    """Positive patches from every gt box; negatives from boxes with IoU < 0.2 to all gts.

    Each gt also yields ``jittered_positives`` shifted and rescaled copies with
    IoU >= ``min_positive_iou``, so the classifier accepts loosely aligned
    proposals. A ``hard_fraction`` share of negative draws is centred on a
    jittered distractor (when the image records any); the rest are uniform
    random boxes of pedestrian-like size.
    """
    if not any(img.gts for img in images):
        raise DataError("patch dataset needs at least one gt box")
    patches, labels, boxes, owner = [], [], [], []
    for k, img in enumerate(images):
        for g in img.gts:
            found = [g]
            for _ in range(jittered_positives):
                for _ in range(max_tries):
                    b = _jitter(rng, g, img.width, img.height)
                    if b is not None and iou(b, g) >= min_positive_iou:
                        found.append(b)
                        break
            for b in found:
                patches.append(extract_patch(img.image, b, size))
                labels.append(1)
                boxes.append(b)
                owner.append(k)
        for _ in range(negatives_per_image):
            for _ in range(max_tries):
                b = _random_negative(rng, img, ped_height, ped_aspect, hard_fraction)
                if all(iou(b, g) < 0.2 for g in img.gts):
                    patches.append(extract_patch(img.image, b, size))
                    labels.append(0)
                    boxes.append(b)
                    owner.append(k)
                    break
            else:
                log.warning("%s: no negative placed after %d tries", img.id, max_tries)
    return PatchSet(np.stack(patches), np.asarray(labels, dtype=np.float64), boxes,
                    np.asarray(owner))


# --- disk format ------------------------------------------------------------

def _image_path(directory: Path, image_id: str) -> Optional[Path]:
    for ext in (".pgm", ".ppm"):
        p = directory / f"{image_id}{ext}"
        if p.exists():
            return p
    return None


def save_image(path, image: np.ndarray) -> None:
    a = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.asarray(im)
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    a = a.astype(np.float64) / 255.0
    return a[..., None] if a.ndim == 2 else a


def format_box_line(image_id: str, b: BoundingBox) -> str:
    return f"{image_id} {b.x1:.4f} {b.y1:.4f} {b.x2:.4f} {b.y2:.4f}"


def save_annotations(directory, images: Sequence[AnnotatedImage]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for img in images:
        ext = ".pgm" if img.image.shape[2] == 1 else ".ppm"
        save_image(d / f"{img.id}{ext}", img.image)
        lines = [format_box_line(img.id, b) for b in img.gts]
        (d / f"{img.id}.txt").write_text("".join(line + "\n" for line in lines))
    (d / MANIFEST).write_text("".join(img.id + "\n" for img in images))


def parse_annotation_file(path, image_id: str, width: float, height: float) -> list:
    boxes = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields "
                              f"'image_id x1 y1 x2 y2', got {len(fields)}")
        if fields[0] != image_id:
            raise FormatError(f"{path}:{lineno}: image id {fields[0]!r} does not match {image_id!r}")
        try:
            x1, y1, x2, y2 = (float(v) for v in fields[1:])
            box = BoundingBox(x1, y1, x2, y2)
        except (ValueError, GeometryError) as exc:
            raise FormatError(f"{path}:{lineno}: bad box: {exc}") from exc
        tol = 1e-3
        if box.x1 < -tol or box.y1 < -tol or box.x2 > width + tol or box.y2 > height + tol:
            raise FormatError(f"{path}:{lineno}: box {box.as_tuple()} outside the "
                              f"{width}x{height} image")
        boxes.append(BoundingBox(max(box.x1, 0.0), max(box.y1, 0.0),
                                 min(box.x2, float(width)), min(box.y2, float(height))))
    return boxes


def list_ids(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"annotation directory {d} does not exist")
    manifest = d / MANIFEST
    if manifest.exists():
        return [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    return sorted(p.stem for p in d.glob("*.txt") if p.name != MANIFEST)


def load_annotations(directory) -> list:
    d = Path(directory)
    out = []
    for image_id in list_ids(d):
        img_path = _image_path(d, image_id)
        if img_path is None:
            raise DataError(f"missing image file for {image_id} in {d}")
        image = load_image(img_path)
        ann = d / f"{image_id}.txt"
        gts = parse_annotation_file(ann, image_id, image.shape[1], image.shape[0]) \
            if ann.exists() else []
        out.append(AnnotatedImage(image, gts, image_id))
    return out


def gt_overlap_ok(img: AnnotatedImage, limit: float = 0.3) -> bool:
    a = boxes_to_array(img.gts)
    m = iou_matrix(a, a)
    np.fill_diagonal(m, 0.0)
    return bool(np.all(m <= limit))

