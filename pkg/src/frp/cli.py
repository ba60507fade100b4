"""Command-line entry point: ``frp <command> [options]``.

Every failure exits nonzero after printing one line to stderr of the form
``frp: error[<kind>]: <message>``. Exit codes: 1 usage or configuration,
2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, classifier, config, dataset, detector, metrics
from .errors import ConfigError, DataError, FormatError, FrpError
from .geometry import BoundingBox

log = logging.getLogger("frp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


# --- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: config.RunConfig, out_dir) -> Path:
    images = dataset.generate_dataset(cfg.scene(), cfg.n_images)
    out = Path(out_dir)
    try:
        dataset.save_annotations(out, images)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc.strerror or exc}") from exc
    log.info("wrote %d images to %s", len(images), out)
    return out


def cmd_train_classifier(cfg: config.RunConfig, data_dir, out_path) -> Path:
    images = dataset.load_annotations(data_dir)
    patches = dataset.build_patch_dataset(
        images, cfg.clf_negatives_per_image, np.random.default_rng(cfg.seed),
        cfg.clf_hard_fraction, cfg.ped_height, cfg.ped_aspect,
        jittered_positives=cfg.clf_jittered_positives, min_positive_iou=cfg.clf_positive_iou)
    specs = classifier.default_specs(images[0].image.shape[2], cfg.clf_widths)
    history: list = []
    w = classifier.train_classifier(patches.patches, patches.labels, cfg.classifier_train(),
                                    cfg.seed, specs=specs, history=history)
    log.info("classifier: %d patches, final loss %.4f, train accuracy %.4f", len(patches),
             history[-1] if history else float("nan"),
             classifier.accuracy(w, patches.patches, patches.labels))
    _write(lambda p: classifier.save_weights(w, p), out_path)
    return Path(out_path)


def cmd_train_detector(cfg: config.RunConfig, data_dir, classifier_path: Optional[str],
                       out_path, tfrp: bool) -> Path:
    images = dataset.load_annotations(data_dir)
    if not images:
        raise DataError(f"no images in {data_dir}")
    cw = classifier.load_weights(classifier_path) if tfrp else None
    history: list = []
    w = detector.train_detector(images, cw, cfg.thresholds(), cfg.detector_train(tfrp), cfg.seed,
                                detector.DetectorConfig(in_channels=images[0].image.shape[2]),
                                history=history)
    if history:
        log.info("detector: %d steps, loss %.4f -> %.4f", len(history), history[0][1],
                 history[-1][1])
    _write(lambda p: detector.save_detector(w, p), out_path)
    return Path(out_path)


def _image_inputs(paths: Sequence[str]) -> list:
    """``(image_id, image)`` pairs from image files and dataset directories."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            ids = dataset.list_ids(p)
            for image_id in ids:
                f = dataset._image_path(p, image_id)
                if f is None:
                    raise DataError(f"missing image file for {image_id} in {p}")
                out.append((image_id, dataset.load_image(f)))
        elif p.exists():
            out.append((p.stem, dataset.load_image(p)))
        else:
            raise DataError(f"no such image or directory: {p}")
    return out


def run_detection(cfg: config.RunConfig, w: detector.DetectorWeights, cw, inputs,
                  mode: detector.InferenceMode) -> str:
    scorer = classifier.ClassifierScorer(cw) if cw is not None else None
    th = cfg.thresholds()

    def one(item):
        image_id, image = item
        return bench.format_detections(image_id,
                                       detector.detect(w, scorer, image, mode, th, cfg.top_k))

    # map() keeps input order, so output does not depend on the thread count
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return "".join(pool.map(one, inputs))


def cmd_detect(cfg: config.RunConfig, weights_path, classifier_path: Optional[str],
               inputs: Sequence[str], out_path, mode_name: str) -> Path:
    mode = detector.InferenceMode.named(mode_name)
    w = detector.load_detector(weights_path)
    cw = classifier.load_weights(classifier_path) if classifier_path else None
    if mode.use_cfrp and cw is None:
        raise ConfigError(f"mode {mode_name!r} needs --classifier")
    text = run_detection(cfg, w, cw, _image_inputs(inputs), mode)
    _write(lambda p: Path(p).write_text(text), out_path)
    return Path(out_path)


def parse_detections(path) -> dict:
    """``image_id -> [(box, score), ...]`` from an ``image_id score x1 y1 x2 y2`` file."""
    out: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read detections {path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        f = line.split()
        if len(f) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields "
                              f"'image_id score x1 y1 x2 y2', got {len(f)}")
        try:
            score = float(f[1])
            box = BoundingBox(*(float(v) for v in f[2:]))
        except (ValueError, DataError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if not 0.0 <= score <= 1.0:
            raise FormatError(f"{path}:{lineno}: score {score} outside [0, 1]")
        out.setdefault(f[0], []).append((box, score))
    return out


def evaluate_files(detections_path, annotations_dir, default_threshold: float):
    dets = parse_detections(detections_path)
    images = dataset.load_annotations(annotations_dir)
    known = {img.id for img in images}
    unknown = sorted(set(dets) - known)
    if unknown:
        raise DataError(f"detections for unknown image ids: {', '.join(unknown[:5])}")
    results = [metrics.ImageResult(dets.get(img.id, []), img.gts, img.id) for img in images]
    curve = metrics.mr_fppi_curve(results)
    return curve, metrics.summary(curve, default_threshold)


def cmd_eval(cfg: config.RunConfig, detections_path, annotations_dir, out_dir) -> dict:
    curve, summ = evaluate_files(detections_path, annotations_dir, cfg.eps)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "curve.csv").write_text(curve.to_csv())
        (out / "summary.txt").write_text(metrics.format_summary(summ))
    except OSError as exc:
        raise DataError(f"cannot write evaluation output to {out}: {exc.strerror or exc}") from exc
    write_plots(curve, out)
    return summ


def write_plots(curve: metrics.EvalCurve, out: Path) -> None:
    """Static miss-rate/FPPI and precision/recall plots; failures only warn."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        fppi = np.maximum(curve.fppi, 1e-4)
        ax.loglog(fppi, np.maximum(curve.miss_rate, 1e-4), drawstyle="steps-post")
        ax.set_xlabel("false positives per image")
        ax.set_ylabel("miss rate")
        ax.set_title(f"log-average miss rate {curve.log_average_miss_rate:.4f}")
        ax.set_xlim(1e-3, 1.0)
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "mr_fppi.png", dpi=100)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(curve.recall, curve.precision, marker=".")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "pr.png", dpi=100)
        plt.close(fig)
    except Exception as exc:  # plots are a convenience
        log.warning("plotting failed, CSV output only: %s", exc)


def cmd_bench(cfg: config.RunConfig, out_dir) -> bench.BenchResult:
    result = bench.run_bench(cfg, Path(out_dir))
    sys.stdout.write(result.summary_csv())
    return result


def _write(writer, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        writer(path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from exc


# --- argument handling ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $FRP_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--threads", type=int, help="worker threads for per-image work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="frp", description="Pedestrian false-positive reduction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="render synthetic annotated scenes")
    s.add_argument("--out", required=True)
    s.add_argument("-n", "--num-images", type=int)

    s = sub.add_parser("train-classifier", parents=[common], help="train the patch classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-detector", parents=[common], help="train the toy detector")
    s.add_argument("--data", required=True)
    s.add_argument("--classifier")
    s.add_argument("--tfrp", choices=("on", "off"), default="on",
                   help="reselect negative proposals with the classifier (default on)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("detect", parents=[common], help="run detection on images")
    s.add_argument("--weights", required=True)
    s.add_argument("--classifier")
    s.add_argument("--mode", choices=("baseline", "sfrp", "compact", "full"))
    s.add_argument("--out", required=True)
    s.add_argument("inputs", nargs="+", help="image files or dataset directories")

    s = sub.add_parser("eval", parents=[common], help="score a detections file")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", parents=[common], help="run the ablation benchmark")
    s.add_argument("--out", required=True)

    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return p


def _effective_config(args) -> config.RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if getattr(args, "num_images", None) is not None:
        overrides["n_images"] = args.num_images
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "tfrp", None) is not None:
        overrides["tfrp"] = args.tfrp == "on"
    return config.load(args.config, overrides)


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    cfg = _effective_config(args)
    c = args.command
    if c == "gen-data":
        cmd_gen_data(cfg, args.out)
    elif c == "train-classifier":
        cmd_train_classifier(cfg, args.data, args.out)
    elif c == "train-detector":
        if cfg.tfrp and not args.classifier:
            raise ConfigError("--tfrp on needs --classifier")
        cmd_train_detector(cfg, args.data, args.classifier, args.out, cfg.tfrp)
    elif c == "detect":
        cmd_detect(cfg, args.weights, args.classifier, args.inputs, args.out, cfg.mode)
    elif c == "eval":
        sys.stdout.write(metrics.format_summary(cmd_eval(cfg, args.detections, args.annotations,
                                                         args.out)))
    elif c == "bench":
        cmd_bench(cfg, args.out)
    elif c == "show-config":
        sys.stdout.write(cfg.dump())
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except FrpError as exc:
        msg = " ".join(str(exc).split())
        print(f"frp: error[{exc.kind}]: {msg}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("frp: error[interrupted]: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
