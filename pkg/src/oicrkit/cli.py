"""oicrkit command line: data generation, training, evaluation and ablations.

Each command prints its resolved configuration as one JSON line prefixed with
``config``. Failures print a single ``error kind=<name> message=<json string>``
line on stderr and exit with status 1; bad usage exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import ablation, plotting
from .evaluate import DetectConfig, NMS_THRESHOLD, detect, evaluate, export_pseudo_gt, metrics_csv
from .netcore import load_checkpoint, save_checkpoint
from .oicr import OicrConfig
from .synthdata import (SceneConfig, atomic_write_bytes, generate_dataset, load_config,
                        load_dataset, save_dataset)
from .trainer import TrainConfig, log_to_csv, train_run


def _emit_config(command: str, cfg: dict) -> None:
    print("config " + json.dumps({"command": command, **cfg}, sort_keys=True, default=str))


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _train_config(args, refinements: int | None = None) -> TrainConfig:
    k = args.K if refinements is None else refinements
    return TrainConfig(total_iterations=args.iters, base_lr=args.lr, hidden=args.hidden, seed=args.seed,
                       oicr=OicrConfig(k, args.iou_threshold, not args.unweighted))


def _detect_config(args, refinements: int) -> DetectConfig:
    k = refinements if args.K is None else args.K
    if k > refinements:
        raise ValueError(f"--K {k} exceeds the {refinements} branches in the checkpoint")
    return DetectConfig(refinements=k, nms_threshold=args.nms_threshold, use_midn=k == 0)


def held_out(data_dir):
    """Test split: same scene settings as the stored dataset, next seed."""
    cfg = load_config(data_dir)
    if cfg is None:
        raise ValueError(f"{data_dir} has no stored config; pass --test-data")
    return generate_dataset(replace(cfg, seed=cfg.seed + 1))


def cmd_gen_data(args) -> None:
    cfg = SceneConfig(images=args.images, part_bias=args.part_bias, seed=args.seed)
    _emit_config("gen-data", {"out": args.out, **asdict(cfg)})
    save_dataset(generate_dataset(cfg), Path(args.out), cfg)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    out = Path(args.out)
    _emit_config("train", {"data": args.data, "out": args.out, **asdict(cfg)})
    bags = load_dataset(args.data)
    params, rows = train_run(bags, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.ckpt")
    _write_text(out / "train_log.csv", log_to_csv(rows, cfg.oicr.refinements))
    if rows:
        plotting.loss_curve(rows, cfg.oicr.refinements, out / "loss_curve.png")


def cmd_eval(args) -> None:
    params = load_checkpoint(args.ckpt)
    det = _detect_config(args, params.dims.refinements)
    _emit_config("eval", {"data": args.data, "corloc_data": args.corloc_data or args.data,
                          "ckpt": args.ckpt, "out": args.out, "ap_mode": args.ap_mode, **asdict(det)})
    bags = load_dataset(args.data)
    corloc = load_dataset(args.corloc_data) if args.corloc_data else None
    report = evaluate(bags, params, det, args.ap_mode, corloc_dataset=corloc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "metrics.csv", metrics_csv(report))
    plotting.ap_bars(report, out / "ap.png")
    print(f"mAP {report.mean_ap:.4f} CorLoc {report.mean_corloc:.4f}")


def cmd_detect(args) -> None:
    params = load_checkpoint(args.ckpt)
    det = _detect_config(args, params.dims.refinements)
    _emit_config("detect", {"data": args.data, "ckpt": args.ckpt, "out": args.out,
                            "image_id": args.image_id, **asdict(det)})
    bags = load_dataset(args.data)
    if args.image_id is not None:
        bags = [b for b in bags if b.image_id == args.image_id]
        if not bags:
            raise ValueError(f"no image with id {args.image_id}")
    records = [{"image_id": d.image_id, "proposal_index": d.proposal_index,
                "class_index": d.detection.class_index, "box": list(d.detection.box.as_tuple()),
                "score": d.detection.score}
               for bag in bags for d in detect(bag, params, det)]
    _write_text(Path(args.out), json.dumps(records, indent=1))


def cmd_export_pseudo_gt(args) -> None:
    params = load_checkpoint(args.ckpt)
    det = _detect_config(args, params.dims.refinements)
    _emit_config("export-pseudo-gt", {"data": args.data, "ckpt": args.ckpt, "out": args.out,
                                      **asdict(det)})
    export_pseudo_gt(load_dataset(args.data), params, det, args.out)


def cmd_ablate(args) -> None:
    axes = args.axis or list(ablation.AXES)
    k = 3 if args.K is None else args.K
    cells = ablation.grid(axes, ablation.Cell(k, not args.unweighted, args.iou_threshold))
    seeds = list(range(args.seed, args.seed + args.seeds))
    # per-cell OICR settings replace these in ablation.run_cell
    base = _train_config(args, k)
    _emit_config("ablate", {"data": args.data, "test_data": args.test_data or "held-out", "out": args.out,
                            "axes": axes, "seeds": seeds, "workers": args.workers,
                            "cells": [asdict(c) for c in cells], **asdict(base)})
    train = load_dataset(args.data)
    test = load_dataset(args.test_data) if args.test_data else held_out(args.data)
    results = ablation.run_grid(train, test, cells, seeds, base, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "ablation.csv", ablation.results_csv(results))
    plotting.ablation_plot(results, out / "ablation.png")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "export-pseudo-gt": cmd_export_pseudo_gt,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oicrkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, model=False, detect=False):
        p.add_argument("--seed", type=int, default=7 if p.prog.endswith("gen-data") else 0)
        if model:
            p.add_argument("--K", type=int, default=3)
            p.add_argument("--iou-threshold", type=float, default=0.5)
            p.add_argument("--unweighted", action="store_true")
            p.add_argument("--iters", type=int, default=3500)
            p.add_argument("--lr", type=float, default=0.001)
            p.add_argument("--hidden", type=int, default=64)
        if detect:
            p.add_argument("--K", type=int, default=None, help="branches to average (default: all)")
            p.add_argument("--nms-threshold", type=float, default=NMS_THRESHOLD)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--part-bias", type=float, default=0.6)

    p = sub.add_parser("train", help="train a model, write checkpoint and loss log")
    common(p, model=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="mAP and CorLoc of a checkpoint")
    common(p, detect=True)
    p.add_argument("--data", required=True)
    p.add_argument("--corloc-data", default=None, help="CorLoc dataset (default: --data)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ap-mode", choices=("voc07", "area"), default="voc07")

    p = sub.add_parser("detect", help="write detections JSON")
    common(p, detect=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-id", type=int, default=None)

    p = sub.add_parser("export-pseudo-gt", help="write top-scoring proposal per present class")
    common(p, detect=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and score a grid of settings")
    common(p, model=True)
    p.set_defaults(K=None)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", default=None, help="mAP dataset (default: held-out split)")
    p.add_argument("--out", default=".")
    p.add_argument("--axis", action="append", choices=ablation.AXES)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        message = json.dumps(str(exc).replace("\n", " "))
        print(f"error kind={type(exc).__name__} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
