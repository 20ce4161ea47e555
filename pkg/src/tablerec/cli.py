"""Command-line surface: dataset generation, training, inference, evaluation.

Every subcommand writes its fully-resolved configuration next to its main
output, so a run can always be reproduced from its artifacts.

Exit codes: 0 success, 1 usage/config error, 2 data-format error,
3 runtime failure.  Errors print one machine-parseable line to stderr:
``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ConfigError, DataFormatError, RunConfig, load_run_config,
)
from .data import PROFILES, generate_samples, load_annotations, load_dataset, write_dataset
from .decoding import TableResult, draw_overlay, recognize_table
from .evaluation import evaluate_batch
from .model import load_checkpoint
from .training import train
from .vocab import ContentVocab, StructVocab


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tablerec",
                                     description="Image-based table recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic table dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--count", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, required=True, help="generator seed")
    g.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    g.add_argument("--split", default="train", help="split name stored per sample")

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", required=True, help="run config JSON file")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--val-data", default="", help="validation dataset directory")
    t.add_argument("--quiet", action="store_true")

    i = sub.add_parser("infer", help="recognize one table image (or a directory)")
    i.add_argument("--ckpt", required=True, help="checkpoint file")
    i.add_argument("--image", required=True, help="input PNG (or directory of PNGs)")
    i.add_argument("--out", default="", help="output JSONL (default: stdout)")
    i.add_argument("--overlay", action="store_true",
                   help="also write <image>.overlay.png with predicted boxes")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="predictions JSONL (TableResult records)")
    e.add_argument("--gt", required=True, help="ground-truth annotations JSONL")
    e.add_argument("--metric", choices=["teds", "teds-struct", "map", "all"], default="all")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out", default="", help="report JSON path (default: stdout)")
    return parser


def _write_resolved(run: RunConfig, target: Path, extra: dict) -> None:
    doc = run.to_dict()
    doc["invocation"] = extra
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _cmd_gen_data(args) -> int:
    profile = PROFILES[args.profile]
    samples = generate_samples(args.count, args.seed, profile, split=args.split)
    out = Path(args.out)
    write_dataset(samples, out)
    run = RunConfig()
    run.data = replace(run.data, profile=args.profile, gen_count=args.count,
                       gen_seed=args.seed)
    _write_resolved(run, out / "config.resolved.json",
                    {"command": "gen-data", "out": str(out), "count": args.count,
                     "seed": args.seed, "profile": args.profile, "split": args.split})
    print(json.dumps({"written": len(samples), "dir": str(out)}))
    return 0


def _cmd_train(args) -> int:
    run = load_run_config(args.config)
    train_samples, skipped = load_dataset(args.data)
    if not train_samples:
        raise DataFormatError(f"no usable samples in {args.data} ({skipped} skipped)")
    val_samples = []
    if args.val_data:
        val_samples, _ = load_dataset(args.val_data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_resolved(run, out.with_name(out.name + ".resolved.json"),
                    {"command": "train", "data": args.data, "val_data": args.val_data,
                     "out": str(out)})
    summary = train(run, train_samples, val_samples, out, quiet=args.quiet)
    print(json.dumps({"steps": summary["steps"], "checkpoint": summary["checkpoint"],
                      "best_val_teds_struct": summary["best_val_teds_struct"]}))
    return 0


def _load_image_for(config, path: Path) -> np.ndarray:
    from PIL import Image

    h, w, c = config.image_size
    img = Image.open(path)
    img = img.convert("L" if c == 1 else "RGB")
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)  # plain non-uniform resize
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _cmd_infer(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    svocab, cvocab = StructVocab(), ContentVocab()
    image_path = Path(args.image)
    if image_path.is_dir():
        paths = sorted(p for p in image_path.iterdir() if p.suffix.lower() == ".png")
        if not paths:
            raise DataFormatError(f"no PNG images in {image_path}")
    else:
        if not image_path.exists():
            raise DataFormatError(f"image not found: {image_path}")
        paths = [image_path]
    records = []
    for p in paths:
        image = _load_image_for(model.config, p)
        result = recognize_table(model, image, svocab, cvocab, filename=p.name)
        records.append(result.to_record())
        if args.overlay:
            overlay = draw_overlay(image, result)
            overlay.save(p.with_name(p.stem + ".overlay.png"))
    lines = "\n".join(json.dumps(r) for r in records) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(lines)
        run = RunConfig()
        run.model = model.config
        _write_resolved(run, out.with_name(out.name + ".resolved.json"),
                        {"command": "infer", "ckpt": args.ckpt, "image": args.image})
        print(json.dumps({"images": len(records), "out": str(out)}))
    else:
        sys.stdout.write(lines)
    return 0


def _cmd_eval(args) -> int:
    pred_path, gt_path = Path(args.pred), Path(args.gt)
    if not pred_path.exists():
        raise DataFormatError(f"prediction file not found: {pred_path}")
    if not gt_path.exists():
        raise DataFormatError(f"ground-truth file not found: {gt_path}")
    pred_records: dict[str, dict] = {}
    with open(pred_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pred_records[rec["filename"]] = rec
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataFormatError(f"{pred_path}:{line_no}: bad prediction record: {exc}")
    gts, skipped = load_annotations(gt_path)
    if not gts:
        raise DataFormatError(f"no usable annotations in {gt_path} ({skipped} skipped)")
    report = evaluate_batch(pred_records, gts, iou_threshold=args.iou)
    if args.metric != "all":
        keep = {"teds": "teds", "teds-struct": "teds_struct", "map": "map"}[args.metric]
        report = {k: v for k, v in report.items()
                  if k in (keep, "n_samples", "parse_failures", "iou_threshold", "per_sample")}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        run = RunConfig()
        run.eval = replace(run.eval, iou_threshold=args.iou)
        _write_resolved(run, out.with_name(out.name + ".resolved.json"),
                        {"command": "eval", "pred": args.pred, "gt": args.gt,
                         "metric": args.metric})
        print(json.dumps({"report": str(out)}))
    else:
        sys.stdout.write(text)
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: data-format: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures keep a stable exit code
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
