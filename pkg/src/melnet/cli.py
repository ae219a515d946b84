"""Command-line surface: convert, anchors, train, eval, predict, report.

Run configs are JSON documents with a fixed key set (unknown keys are
rejected, all paths are checked before any work starts); see the README for
the schema and the on-disk formats each command reads and writes.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .anchors import assign_to_scales, kmeans_iou, load_anchors, save_anchors
from .architecture import (
    ArchSpec,
    load_weights,
    reference_spec,
    spec_from_text,
    tiny_spec,
)
from .evaluation import detect_image, evaluate_samples
from .imageio import draw_detections, image_size, load_image, save_image
from .kitti import (
    CLASS_NAMES,
    ClassMap,
    convert_dataset,
    load_samples,
    parse_yolo_label_file,
    read_manifest,
)
from .report import default_summary_epochs, summary_table, write_charts
from .training import TrainingConfig, read_metric_csv, train_loop

_CONFIG_KEYS = {
    "manifest": str,
    "labels_dir": str,
    "anchors": str,
    "arch": str,
    "out_dir": str,
    "num_classes": int,
    "anchors_per_scale": int,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "input_size": int,
    "seed": int,
    "augment": bool,
    "lambda_box": float,
    "lambda_obj": float,
    "lambda_noobj": float,
    "lambda_cls": float,
    "conf_threshold": float,
    "nms_iou": float,
    "ignore_iou": float,
}
_CONFIG_REQUIRED = ("manifest", "labels_dir", "anchors", "arch", "out_dir", "epochs")


class CliError(Exception):
    pass


def _resolve_spec(arch: str, num_classes: int, anchors_per_scale: int,
                  input_size: int | None = None) -> ArchSpec:
    if arch == "reference":
        spec = reference_spec(num_classes, anchors_per_scale)
    elif arch == "tiny":
        spec = tiny_spec(num_classes, anchors_per_scale)
    else:
        path = Path(arch)
        if not path.exists():
            raise CliError(f"arch must be 'reference', 'tiny', or a spec file; {arch!r} not found")
        spec = spec_from_text(path.read_text())
    if input_size is not None and input_size != spec.input_size:
        spec = replace(spec, input_size=input_size)
    return spec


def load_run_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config must be a JSON object")
    for key, value in raw.items():
        if key not in _CONFIG_KEYS:
            raise CliError(f"{path}: unknown config key {key!r}")
        want = _CONFIG_KEYS[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or isinstance(value, bool) and want is not bool:
            raise CliError(f"{path}: key {key!r} must be {want.__name__}")
        raw[key] = value
    missing = [k for k in _CONFIG_REQUIRED if k not in raw]
    if missing:
        raise CliError(f"{path}: missing required config keys {missing}")
    for key in ("manifest", "labels_dir", "anchors"):
        if not Path(raw[key]).exists():
            raise CliError(f"{path}: {key} path {raw[key]!r} does not exist")
    if raw["arch"] not in ("reference", "tiny") and not Path(raw["arch"]).exists():
        raise CliError(f"{path}: arch {raw['arch']!r} is neither a preset nor a file")
    return raw


# -- subcommands ------------------------------------------------------------------


def cmd_convert(args) -> int:
    report = convert_dataset(args.kitti_root, args.out, fraction=args.fraction, seed=args.seed)
    print(f"converted {report.files} label files -> {Path(args.out) / 'labels'}")
    print(f"split manifest -> {Path(args.out) / 'split.txt'}")
    for name in CLASS_NAMES:
        print(f"  {name:16s} {report.boxes_per_class.get(name, 0)}")
    if report.dropped_degenerate:
        print(f"  dropped {report.dropped_degenerate} degenerate boxes")
    return 0


def cmd_anchors(args) -> int:
    if args.k < 1:
        raise CliError("--k must be at least 1")
    manifest = read_manifest(Path(args.data) / "split.txt")
    labels_dir = Path(args.data) / "labels"
    samples = []
    for item in manifest.subset("train"):
        label_path = labels_dir / (Path(item.image_path).stem + ".txt")
        img_w, img_h = image_size(item.image_path)
        scale = min(args.input_size / img_w, args.input_size / img_h)
        for box, _ in parse_yolo_label_file(label_path):
            samples.append((box.w * img_w * scale, box.h * img_h * scale))
    if not samples:
        raise CliError("no training boxes found to cluster")
    result = kmeans_iou(samples, args.k, seed=args.seed)
    save_anchors(args.out, result, args.k, args.seed)
    print(f"{args.k} anchors -> {args.out} (mean best-anchor IoU {result.mean_iou:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg_doc = load_run_config(args.config)
    cfg = TrainingConfig(
        learning_rate=cfg_doc.get("learning_rate", 1e-5),
        weight_decay=cfg_doc.get("weight_decay", 1e-4),
        batch_size=cfg_doc.get("batch_size", 4),
        epochs=cfg_doc["epochs"],
        input_size=cfg_doc.get("input_size", 640),
        seed=cfg_doc.get("seed", 0),
        lambda_box=cfg_doc.get("lambda_box", 5.0),
        lambda_obj=cfg_doc.get("lambda_obj", 1.0),
        lambda_noobj=cfg_doc.get("lambda_noobj", 0.5),
        lambda_cls=cfg_doc.get("lambda_cls", 1.0),
        conf_threshold=cfg_doc.get("conf_threshold", 0.001),
        nms_iou=cfg_doc.get("nms_iou", 0.5),
        ignore_iou=cfg_doc.get("ignore_iou", 0.5),
        augment=cfg_doc.get("augment", False),
    )
    spec = _resolve_spec(
        cfg_doc["arch"], cfg_doc.get("num_classes", 9),
        cfg_doc.get("anchors_per_scale", 3), cfg.input_size,
    )
    anchors = load_anchors(cfg_doc["anchors"])
    manifest = read_manifest(cfg_doc["manifest"])
    train_samples = load_samples(manifest.subset("train"), cfg_doc["labels_dir"])
    val_samples = load_samples(manifest.subset("val"), cfg_doc["labels_dir"])
    _, rows = train_loop(
        cfg, spec, anchors, train_samples, val_samples, cfg_doc["out_dir"],
        resume=args.resume, log=print,
    )
    print(f"metrics -> {Path(cfg_doc['out_dir']) / 'metrics.csv'} ({len(rows)} epochs)")
    return 0


def cmd_eval(args) -> int:
    spec = _resolve_spec(args.arch, args.num_classes, args.anchors_per_scale, args.input_size)
    net = load_weights(args.weights, spec)
    anchors = load_anchors(args.anchors)
    manifest = read_manifest(Path(args.data) / "split.txt")
    items = manifest.subset(args.split)
    if not items:
        raise CliError(f"split {args.split!r} has no items")
    samples = load_samples(items, Path(args.data) / "labels")
    result = evaluate_samples(
        net, samples, assign_to_scales(anchors), num_classes=spec.num_classes,
        input_size=spec.input_size, conf_threshold=args.conf, nms_iou=args.nms,
        batch_size=args.batch_size,
    )
    class_map = ClassMap()
    per_class = {}
    print(f"{'class':16s} AP@0.5")
    for cid in sorted(result.per_class_ap, key=lambda c: (result.per_class_ap[c] is None,
                                                          result.per_class_ap[c] or 0.0)):
        ap = result.per_class_ap[cid]
        name = class_map.name_of(cid) if cid < len(class_map) else str(cid)
        per_class[name] = ap
        print(f"{name:16s} {'n/a' if ap is None else f'{ap:.4f}'}")
    print(f"{'mAP':16s} {result.map:.4f}")
    doc = {
        "map": result.map,
        "per_class_ap": per_class,
        "class_acc": result.class_acc,
        "obj_acc": result.obj_acc,
        "noobj_acc": result.noobj_acc,
        "images": result.images,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"report -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    spec = _resolve_spec(args.arch, args.num_classes, args.anchors_per_scale, args.input_size)
    net = load_weights(args.weights, spec)
    anchors_by_scale = assign_to_scales(load_anchors(args.anchors))
    paths = []
    for entry in args.images:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(ext_p for ext_p in p.iterdir()
                                if ext_p.suffix.lower() in (".png", ".jpg", ".jpeg")))
        else:
            paths.append(p)
    if not paths:
        raise CliError("no input images")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    warnings = 0
    for path in paths:
        try:
            image = load_image(path)
        except Exception as exc:
            print(f"warning: skipping undecodable image {path}: {exc}", file=sys.stderr)
            warnings += 1
            continue
        dets = detect_image(net, image, anchors_by_scale, args.conf, args.nms)
        lines = [
            f"{d.class_id} {d.score:.6f} {d.box.xmin:.2f} {d.box.ymin:.2f} "
            f"{d.box.xmax:.2f} {d.box.ymax:.2f}"
            for d in dets
        ]
        (out_dir / (path.stem + ".txt")).write_text(
            "\n".join(lines) + ("\n" if lines else "")
        )
        if args.draw:
            save_image(out_dir / (path.stem + ".png"),
                       draw_detections(image, dets, list(CLASS_NAMES)))
        print(f"{path.name}: {len(dets)} detections")
    return 1 if warnings else 0


def cmd_report(args) -> int:
    rows = read_metric_csv(args.metrics_csv)
    if not rows:
        raise CliError(f"{args.metrics_csv} has no metric rows")
    out_dir = Path(args.out)
    written = write_charts(rows, out_dir)
    if args.eval_json:
        doc = json.loads(Path(args.eval_json).read_text())
        from .report import svg_bar_chart

        per_class = {k: v for k, v in doc["per_class_ap"].items() if v is not None}
        path = out_dir / "per_class_ap.svg"
        path.write_text(
            svg_bar_chart("Per-class AP@0.5", list(per_class), list(per_class.values()))
        )
        written.append(path)
    if args.summary_epochs:
        epochs = [int(tok) for tok in args.summary_epochs.split(",")]
    else:
        epochs = default_summary_epochs(rows)
    table = summary_table(rows, epochs)
    (out_dir / "summary.txt").write_text(table)
    print(table, end="")
    print(f"{len(written)} charts + summary.txt -> {out_dir}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melnet", description="Two-scale single-stage detector toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="KITTI labels to normalized box files + split")
    p.add_argument("--kitti-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_convert)

    p = sub.add_parser("anchors", help="cluster anchor priors from a converted dataset")
    p.add_argument("--data", required=True, help="converted dataset root")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-size", type=int, default=640)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_anchors)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="per-class AP and mAP on a converted dataset split")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--arch", default="reference")
    p.add_argument("--num-classes", type=int, default=9)
    p.add_argument("--anchors-per-scale", type=int, default=3)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--conf", type=float, default=0.001)
    p.add_argument("--nms", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("predict", help="detect objects in images")
    p.add_argument("--weights", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--arch", default="reference")
    p.add_argument("--num-classes", type=int, default=9)
    p.add_argument("--anchors-per-scale", type=int, default=3)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms", type=float, default=0.5)
    p.add_argument("--draw", action="store_true", help="also write annotated images")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_predict)

    p = sub.add_parser("report", help="SVG charts and summary table from a metric CSV")
    p.add_argument("--metrics-csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-json", default=None,
                   help="eval report for the per-class AP bar chart")
    p.add_argument("--summary-epochs", default=None,
                   help="comma-separated epochs for the summary table")
    p.set_defaults(run=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except (CliError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
