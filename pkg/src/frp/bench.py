"""Ablation benchmark on synthetic scenes.

For each seed: generate train and test scenes, train the patch classifier, train
one detector without negative reselection and one with it, then evaluate

    baseline  plain detector, plain inference
    compact   reselection-trained detector + split-proposal gate
    full      reselection-trained detector + classifier filter + split gate

Wall time is measured round-robin across variants, image by image, so slow
drift in machine load hits every variant alike. The reselection-trained
detector is also timed in plain inference mode, to compare with the baseline.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import classifier as clf
from . import dataset, detector, metrics
from .config import RunConfig

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "compact", "full")
# timed alongside the variants; not part of the ablation table
TFRP_BASELINE = "tfrp_baseline"
# scene-seed spacing between benchmark seeds, so their image sets never overlap
SEED_STRIDE = 10_000_000


@dataclass
class VariantResult:
    seed: int
    variant: str
    log_average_miss_rate: float
    fppi: float
    miss_rate: float
    params: int
    ms_per_frame: float
    detections: str = field(repr=False, default="")


@dataclass
class SeedResult:
    seed: int
    variants: dict
    tfrp_baseline_ms: float
    classifier_accuracy: float
    tfrp_removed: int


def format_detections(image_id: str, dets) -> str:
    return "".join(f"{image_id} {d.score:.9f} {d.box.x1:.4f} {d.box.y1:.4f} "
                   f"{d.box.x2:.4f} {d.box.y2:.4f}\n" for d in dets)


def train_models(cfg: RunConfig, seed: int, train_images):
    patches = dataset.build_patch_dataset(
        train_images, cfg.clf_negatives_per_image, np.random.default_rng(seed),
        cfg.clf_hard_fraction, cfg.ped_height, cfg.ped_aspect,
        jittered_positives=cfg.clf_jittered_positives, min_positive_iou=cfg.clf_positive_iou)
    specs = clf.default_specs(cfg.channels, cfg.clf_widths)
    t0 = time.perf_counter()
    cw = clf.train_classifier(patches.patches, patches.labels, cfg.classifier_train(), seed,
                              specs=specs)
    log.info("seed %d: classifier trained on %d patches in %.1f s", seed, len(patches),
             time.perf_counter() - t0)
    th = cfg.thresholds()
    dcfg = detector.DetectorConfig(in_channels=cfg.channels)
    t0 = time.perf_counter()
    base = detector.train_detector(train_images, None, th, cfg.detector_train(False), seed, dcfg)
    tfrp = detector.train_detector(train_images, cw, th, cfg.detector_train(True), seed, dcfg)
    log.info("seed %d: detectors trained in %.1f s", seed, time.perf_counter() - t0)
    return cw, base, tfrp


def evaluate_variants(cfg: RunConfig, cw, base, tfrp, test_images, seed: int) -> SeedResult:
    th = cfg.thresholds()
    runs = {
        "baseline": (base, detector.InferenceMode.named("baseline")),
        "compact": (tfrp, detector.InferenceMode.named("compact")),
        "full": (tfrp, detector.InferenceMode.named("full")),
        TFRP_BASELINE: (tfrp, detector.InferenceMode.named("baseline")),
    }
    scorer = clf.ClassifierScorer(cw)
    # warm-up pass on the first image
    for w, mode in runs.values():
        detector.detect(w, scorer, test_images[0].image, mode, th, cfg.top_k)
    times = {k: [] for k in runs}
    dets = {k: [] for k in runs}
    for img in test_images:
        for name, (w, mode) in runs.items():
            t0 = time.perf_counter()
            out = detector.detect(w, scorer, img.image, mode, th, cfg.top_k)
            times[name].append(time.perf_counter() - t0)
            dets[name].append(out)
    results = {}
    for name in VARIANTS:
        per_image = [metrics.ImageResult([(d.box, d.score) for d in ds], img.gts, img.id)
                     for ds, img in zip(dets[name], test_images)]
        curve = metrics.mr_fppi_curve(per_image)
        summ = metrics.summary(curve, th.eps)
        w = runs[name][0]
        params = w.num_params() + (cw.num_params() if name == "full" else 0)
        text = "".join(format_detections(img.id, ds) for ds, img in zip(dets[name], test_images))
        results[name] = VariantResult(seed, name, curve.log_average_miss_rate, summ["fppi"],
                                      summ["miss_rate"], params,
                                      1000.0 * float(np.median(times[name])), text)
    return SeedResult(seed, results, 1000.0 * float(np.median(times[TFRP_BASELINE])), 0.0,
                      getattr(tfrp, "stats", {}).get("tfrp_removed", 0))


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    scene = cfg.scene(seed * SEED_STRIDE)
    train = dataset.generate_dataset(scene, cfg.n_train, prefix="train")
    test = dataset.generate_dataset(scene, cfg.n_test, first_index=cfg.test_offset, prefix="test")
    cw, base, tfrp = train_models(cfg, seed, train)
    res = evaluate_variants(cfg, cw, base, tfrp, test, seed)
    test_patches = dataset.build_patch_dataset(
        test, cfg.clf_negatives_per_image, np.random.default_rng(seed + 1),
        cfg.clf_hard_fraction, cfg.ped_height, cfg.ped_aspect)
    res.classifier_accuracy = clf.accuracy(cw, test_patches.patches, test_patches.labels)
    return res


@dataclass
class BenchResult:
    seeds: list

    def rows(self) -> list:
        return [s.variants[v] for s in self.seeds for v in VARIANTS]

    def median(self, variant: str, attr: str) -> float:
        return float(np.median([getattr(s.variants[variant], attr) for s in self.seeds]))

    def median_tfrp_baseline_ms(self) -> float:
        return float(np.median([s.tfrp_baseline_ms for s in self.seeds]))

    def table_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["seed", "variant", "mr", "fppi", "miss_rate", "params"]
        w.writerow(head + (["ms_per_frame"] if timing else []))
        for r in self.rows():
            row = [r.seed, r.variant, f"{r.log_average_miss_rate:.10g}", f"{r.fppi:.10g}",
                   f"{r.miss_rate:.10g}", r.params]
            w.writerow(row + ([f"{r.ms_per_frame:.3f}"] if timing else []))
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "median_mr", "median_fppi", "params", "median_ms_per_frame"])
        for v in VARIANTS:
            w.writerow([v, f"{self.median(v, 'log_average_miss_rate'):.10g}",
                        f"{self.median(v, 'fppi'):.10g}", int(self.median(v, "params")),
                        f"{self.median(v, 'ms_per_frame'):.3f}"])
        w.writerow([TFRP_BASELINE, "", "", "", f"{self.median_tfrp_baseline_ms():.3f}"])
        return buf.getvalue()


def run_bench(cfg: RunConfig, out_dir: Optional[Path] = None) -> BenchResult:
    result = BenchResult([])
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        res = run_seed(cfg, seed)
        log.info("seed %d done in %.1f s: %s", seed, time.perf_counter() - t0,
                 {v: round(r.log_average_miss_rate, 4) for v, r in res.variants.items()})
        result.seeds.append(res)
    if out_dir is not None:
        write_outputs(result, cfg, Path(out_dir))
    return result


def write_outputs(result: BenchResult, cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(result.table_csv())
    (out / "bench_summary.csv").write_text(result.summary_csv())
    cfg.save(out / "config.txt")
    for s in result.seeds:
        d = out / f"seed{s.seed}"
        d.mkdir(exist_ok=True)
        for v, r in s.variants.items():
            (d / f"detections_{v}.txt").write_text(r.detections)
