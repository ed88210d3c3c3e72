"""``chmseg`` command line: train, predict, eval and synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io, synth
from .chm import chm_infer, chm_train, label_map
from .core import ChmConfig, ChmError, LabelMap, ProbabilityMap
from .edges import multiscale_infer, nms_thin
from .metrics import THRESHOLDS, binary_scores, boundary_benchmark, confusion, multiclass_scores, scores_from_counts

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
WORKERS_ENV = "CHM_WORKERS"


class UsageError(Exception):
    pass


def _workers(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def _map(fn, items, workers: int) -> list:
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# -- train ------------------------------------------------------------------


def cmd_train(manifest, config_file, out_dir, seed: int | None = None):
    """Train on the manifest's train split and write the model directory,
    including ``train_log.jsonl`` with per-level F-values and J1/J2."""
    data = io.load_manifest(manifest)
    config = io.load_config(config_file) if config_file else ChmConfig()
    overrides = {"class_count": data.class_count}
    if seed is not None:
        overrides["seed"] = seed
    config = ChmConfig.from_dict({**config.to_dict(), **overrides})
    if data.task == "edge":
        raise ChmError("training needs a label-task manifest")
    entries = data.split("train")
    if not entries:
        raise ChmError(f"{manifest}: no train entries")
    dataset = [io.load_entry(e, data.task, data.class_count) for e in entries]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    model = chm_train(dataset, config, np.random.default_rng(config.seed), records.append)
    io.save_model(model, out_dir)
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return model


# -- predict ----------------------------------------------------------------


def _prediction(model, image, multiscale: bool, nms: bool) -> ProbabilityMap:
    if (multiscale or nms) and model.multiclass:
        raise ChmError("--multiscale and --nms apply to binary models only")
    probs = multiscale_infer(model, image) if multiscale else chm_infer(model, image)
    return nms_thin(probs) if nms else probs


def prob_paths(out_dir: Path, stem: str, planes: int) -> list[Path]:
    if planes == 1:
        return [out_dir / f"{stem}_prob.png"]
    return [out_dir / f"{stem}_class{c}.png" for c in range(planes)]


def _write_prediction(model, probs: ProbabilityMap, out_dir: Path, stem: str, threshold: float, task: str):
    for c, path in enumerate(prob_paths(out_dir, stem, probs.planes)):
        io.save_probability_png(path, probs.plane(c))
    if task == "label":
        io.save_label_png(out_dir / f"{stem}_labels.png", label_map(model, probs, threshold))


def cmd_predict(model_dir, out_dir, image=None, manifest=None, multiscale=False, nms=False,
                threshold=0.5, workers=None, split="test"):
    """Write 16-bit probability PNGs (and label PNGs for label tasks) for one
    image or every entry of a manifest split. Returns the written stems."""
    if (image is None) == (manifest is None):
        raise UsageError("give exactly one of --image or --manifest")
    model = io.load_model(model_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if image is not None:
        jobs = [(Path(image).stem, Path(image), None)]
        task = "label"
    else:
        data = io.load_manifest(manifest, check_files=False)
        task = data.task
        entries = data.split(split)
        if not entries:
            raise ChmError(f"{manifest}: no {split} entries")
        jobs = [(e.stem, e.image, e.depth) for e in entries]
        missing = [p for _, im, d in jobs for p in (im, d) if p is not None and not p.exists()]
        if missing:
            raise ChmError(f"{manifest}: missing file {missing[0]}")

    def run(job):
        stem, path, depth = job
        probs = _prediction(model, io.load_image(path, depth), multiscale, nms)
        _write_prediction(model, probs, out_dir, stem, threshold, task)
        return stem

    return _map(run, jobs, _workers(workers))


# -- eval -------------------------------------------------------------------


def _read_probs(pred_dir: Path, stem: str, planes: int) -> np.ndarray:
    maps = []
    for path in prob_paths(pred_dir, stem, planes):
        if not path.exists():
            raise ChmError(f"missing prediction {path}")
        maps.append(io.read_pixels(path)[0])
    return np.stack(maps)


def _pixel_curve(probs: list, gts: list):
    p = np.concatenate([a.ravel() for a in probs])
    g = np.concatenate([a.ravel() for a in gts]) > 0
    rows = []
    for t in THRESHOLDS:
        c = confusion(p >= t, g, 2)
        s = scores_from_counts(c.tp, c.fp, c.fn, c.tn)
        rows.append((float(t), s.precision, s.recall, s.f_value))
    return rows


def _write_curve(path: Path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f_value"])
        for row in rows:
            writer.writerow([f"{row[0]:.2f}"] + [repr(float(v)) for v in row[1:]])


def cmd_eval(pred_dir, manifest, out_dir=None, threshold=0.5, split="test", figures=True, workers=None) -> dict:
    """Score predictions against the manifest's ``split`` entries.

    Label tasks report F-value, G-mean and accuracy (binary) or pixel and
    class-average accuracy (multiclass), pooled over all images; edge tasks
    report ODS/OIS/AP. Writes ``scores.json``, ``pr_curve.csv`` and, with
    ``figures``, PNG plots to ``out_dir`` (default: ``pred_dir``).
    """
    pred_dir = Path(pred_dir)
    out_dir = Path(out_dir) if out_dir else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    data = io.load_manifest(manifest)
    entries = data.split(split)
    if not entries:
        raise ChmError(f"{manifest}: no {split} entries")
    multiclass = data.task == "label" and data.class_count > 2
    planes = data.class_count if multiclass else 1

    def load(e):
        return _read_probs(pred_dir, e.stem, planes), io.load_labels(e.label, data.task, data.class_count)

    loaded = _map(load, entries, _workers(workers))
    report = {"task": data.task, "images": len(entries), "split": split}
    confusion_matrix = None
    if data.task == "edge":
        scores = boundary_benchmark([p[0] for p, _ in loaded], [a for _, a in loaded])
        report.update(ods=scores.ods, ois=scores.ois, ap=scores.ap, ods_threshold=scores.ods_threshold)
        rows = list(scores.curve.rows())
        curve = scores.curve
    elif multiclass:
        pred = np.concatenate([p.argmax(axis=0).ravel() for p, _ in loaded])
        gt = np.concatenate([lab.data.ravel() for _, lab in loaded])
        scores = multiclass_scores(pred, gt, data.class_count)
        confusion_matrix = scores.counts.matrix
        report.update(pixel_accuracy=scores.pixel_accuracy, class_average_accuracy=scores.class_average_accuracy,
                      confusion=confusion_matrix.tolist())
        rows = _pixel_curve([(p.argmax(axis=0) > 0).astype(float) for p, _ in loaded], [lab.data for _, lab in loaded])
        curve = None
    else:
        probs = [p[0] for p, _ in loaded]
        gts = [lab.data for _, lab in loaded]
        p_all = np.concatenate([a.ravel() for a in probs])
        g_all = np.concatenate([a.ravel() for a in gts])
        s = binary_scores(p_all, g_all, threshold)
        confusion_matrix = confusion(p_all >= threshold, g_all > 0, 2).matrix
        report.update(threshold=threshold, **s._asdict(), confusion=confusion_matrix.tolist())
        rows = _pixel_curve(probs, gts)
        curve = None
    (out_dir / "scores.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _write_curve(out_dir / "pr_curve.csv", rows)
    if figures:
        from . import plotting
        from .metrics import PrCurve

        if curve is None:
            arr = np.array(rows)
            curve = PrCurve(arr[:, 0], arr[:, 1], arr[:, 2])
        plotting.plot_pr_curve(curve, out_dir / "pr_curve.png")
        if confusion_matrix is not None:
            plotting.plot_confusion(confusion_matrix, out_dir / "confusion.png")
    return report


# -- synth ------------------------------------------------------------------


def cmd_synth(kind, out_dir, count=50, test_count=20, size=64, seed=0, classes=2):
    """Write a synthetic dataset and its manifest (``points.csv`` for xor-blobs)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "xor-blobs":
        points, labels = synth.generate(kind, count + test_count, size, seed)
        path = out_dir / "points.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "label", "split"])
            for k, ((x, y), lab) in enumerate(zip(points, labels)):
                writer.writerow([repr(float(x)), repr(float(y)), int(lab), "train" if k < count else "test"])
        return path
    if kind == "bars" and classes != 2:
        raise UsageError("bars datasets have two classes")
    pairs = synth.generate(kind, count + test_count, size, seed, classes)
    entries = []
    for k, (image, labels) in enumerate(pairs):
        split = "train" if k < count else "test"
        image_path = out_dir / f"{split}_{k:04d}.png"
        label_path = out_dir / f"{split}_{k:04d}_gt.png"
        io.save_gray_png(image_path, image)
        io.save_label_png(label_path, labels if classes > 2 else labels * 255)
        entries.append(io.Entry(image_path, label_path, split))
    manifest = io.DatasetManifest(entries, classes, "label", out_dir)
    path = out_dir / "manifest.json"
    io.save_manifest(manifest, path)
    return path


# -- entry point ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chmseg", description="Contextual hierarchical segmentation models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON config (a model manifest.json also works)")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("predict", help="write probability and label maps")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--multiscale", action="store_true")
    p.add_argument("--nms", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--workers", type=int, help=f"parallel images (default ${WORKERS_ENV} or 1)")

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", help="report directory (default: the predictions directory)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("kind", choices=synth.KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=50, help="training items")
    p.add_argument("--test-count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=2, choices=(2, 3))
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            model = cmd_train(args.manifest, args.config, args.out, args.seed)
            print(f"trained {model.trained_classifiers()} classifiers -> {args.out}")
        elif args.command == "predict":
            stems = cmd_predict(args.model, args.out, args.image, args.manifest, args.multiscale, args.nms,
                                args.threshold, args.workers, args.split)
            print(f"wrote {len(stems)} prediction(s) -> {args.out}")
        elif args.command == "eval":
            report = cmd_eval(args.predictions, args.manifest, args.out, args.threshold, args.split,
                              not args.no_figures, args.workers)
            print(json.dumps({k: v for k, v in report.items() if k != "confusion"}, indent=2))
        elif args.command == "synth":
            print(cmd_synth(args.kind, args.out, args.count, args.test_count, args.size, args.seed, args.classes))
    except UsageError as exc:
        print(f"chmseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChmError as exc:
        print(f"chmseg: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"chmseg: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def main():
    sys.exit(run())
