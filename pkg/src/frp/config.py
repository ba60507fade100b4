"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Tuple-valued keys take comma
separated lists. ``dump`` writes every key, so a dumped file reloads to an
identical configuration.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .classifier import TrainConfig
from .dataset import SceneConfig
from .detector import DetectorTrainConfig, InferenceMode
from .errors import ConfigError, DataError
from .refinement import FrpThresholds

ENV_VAR = "FRP_CONFIG"


@dataclass
class RunConfig:
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    # selection thresholds
    eps_iou: float = 0.5
    eps_t: float = 0.5
    eps_c: float = 0.3
    eps: float = 0.5
    eps_s: float = 0.1
    # synthetic scenes
    width: int = 128
    height: int = 128
    channels: int = 1
    pedestrians: tuple = (1, 3)
    distractors: tuple = (1, 3)
    ped_height: tuple = (36.0, 64.0)
    ped_aspect: float = 2.5
    distractor_kinds: tuple = ("square", "hbar", "vbar")
    contrast: tuple = (0.25, 0.45)
    noise: float = 0.03
    n_images: int = 10
    n_train: int = 200
    n_test: int = 100
    # test scenes are drawn from seeds offset by this much
    test_offset: int = 100000
    # classifier
    clf_widths: tuple = (8, 16, 32, 64)
    clf_learning_rate: float = 0.1
    clf_epochs: int = 6
    clf_batch_size: int = 16
    clf_negatives_per_image: int = 6
    clf_jittered_positives: int = 2
    clf_positive_iou: float = 0.75
    clf_hard_fraction: float = 0.5
    # detector
    det_learning_rate: float = 0.01
    det_momentum: float = 0.9
    det_weight_decay: float = 1e-4
    det_epochs: int = 4
    det_top_k_train: int = 64
    det_roi_batch: int = 64
    det_rpn_batch: int = 64
    tfrp: bool = True
    # inference
    mode: str = "baseline"
    top_k: int = 50
    threads: int = 1
    # paths
    data_dir: str = "data"
    out_dir: str = "out"
    classifier_path: str = "classifier.frpc"
    detector_path: str = "detector.frpd"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.thresholds()
            self.scene()
        except (ConfigError, DataError) as exc:
            raise ConfigError(str(exc)) from exc
        InferenceMode.named(self.mode)
        positive = ("n_train", "n_test", "clf_epochs", "clf_batch_size", "det_top_k_train",
                    "det_roi_batch", "det_rpn_batch", "top_k", "threads")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("n_images", "det_epochs", "clf_negatives_per_image",
                     "clf_jittered_positives"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if not 0.0 < self.clf_positive_iou <= 1.0:
            raise ConfigError("clf_positive_iou must lie in (0, 1]")
        if not 0.0 <= self.clf_hard_fraction <= 1.0:
            raise ConfigError("clf_hard_fraction must lie in [0, 1]")
        if self.clf_learning_rate <= 0 or self.det_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.det_momentum < 1.0:
            raise ConfigError("det_momentum must lie in [0, 1)")
        for name in ("data_dir", "out_dir", "classifier_path", "detector_path"):
            v = getattr(self, name)
            if not v or "\n" in v or "\0" in v:
                raise ConfigError(f"{name} is not a usable path: {v!r}")

    def thresholds(self) -> FrpThresholds:
        return FrpThresholds(self.eps_iou, self.eps_t, self.eps_c, self.eps, self.eps_s)

    def scene(self, seed: Optional[int] = None) -> SceneConfig:
        return SceneConfig(self.width, self.height, self.channels, self.pedestrians,
                           self.distractors, self.ped_height, self.ped_aspect,
                           self.distractor_kinds, self.contrast, self.noise,
                           self.seed if seed is None else seed)

    def classifier_train(self) -> TrainConfig:
        return TrainConfig(self.clf_learning_rate, self.clf_epochs, self.clf_batch_size)

    def detector_train(self, tfrp: Optional[bool] = None) -> DetectorTrainConfig:
        return DetectorTrainConfig(
            epochs=self.det_epochs, learning_rate=self.det_learning_rate,
            momentum=self.det_momentum, weight_decay=self.det_weight_decay,
            top_k_train=self.det_top_k_train, roi_batch=self.det_roi_batch,
            rpn_batch=self.det_rpn_batch, tfrp=self.tfrp if tfrp is None else tfrp)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.dump())


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(kind, text: str, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    text = text.strip()
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(kind, t, key) for t in items)
    return _parse_scalar(type(default), text, key)


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def load(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Build a config from defaults, then ``path`` (or ``$FRP_CONFIG``), then overrides."""
    values = {}
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_text(text, str(path)))
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    return RunConfig(**values)
