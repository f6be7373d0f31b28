"""Command line entry point: ``cvheat {gen,graph,forward,train,eval,ablate}``.

Every configuration key is also a flag (``--graph-mode contour``); flags
override values read from ``--config``. All outputs go under ``--out-dir``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from typing import List, Optional, Sequence

import numpy as np
import torch

from cvheat.config import ConfigError, PipelineConfig, coerce, parse_config, serialize_config
from cvheat.detection import format_ground_truth, parse_detections
from cvheat.events import EventParseError, EventTensor, format_events, parse_events, slice_stream
from cvheat.graphs import build_bundle, dump_bundle
from cvheat.heat import count_parameters
from cvheat.pipeline import (
    build_model,
    encode_slice,
    evaluate,
    format_metrics,
    load_model,
    run_pipeline,
    save_model,
    synthetic_splits,
    train,
)
from cvheat.synthetic import scene_stream

log = logging.getLogger("cvheat")

_CONFIG_KEYS = [f.name for f in fields(PipelineConfig)]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out-dir", default="out", help="directory for all outputs")
    group = p.add_argument_group("configuration overrides")
    for key in _CONFIG_KEYS:
        if key == "seed":
            continue
        group.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE")
    p.add_argument("--seed", type=int)


def build_config(args: argparse.Namespace) -> PipelineConfig:
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    return parse_config(text, **{k: str(v) for k, v in overrides.items()})


def _read_events(path: str, cfg: PipelineConfig) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_events(fh, cfg.resolution, cfg.resolution)


def _read_gt(path: Optional[str]):
    if not path:
        return []
    with open(path) as fh:
        return parse_detections(fh.read(), with_score=False)


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


# --------------------------------------------------------------------------- subcommands


def cmd_gen(args, cfg: PipelineConfig) -> int:
    n = args.scenes if args.scenes is not None else cfg.val_scenes
    events, gts = scene_stream(
        n, cfg.resolution, cfg.slice_interval, cfg.seed, cfg.max_objects, cfg.noise_rate, cfg.contour_density
    )
    _write(_out(args, "events.txt"), format_events(events))
    _write(_out(args, "gt.txt"), format_ground_truth(gts))
    _write(_out(args, "config.txt"), serialize_config(cfg))
    log.info("%d scenes, %d events, %d objects -> %s", n, len(events), len(gts), args.out_dir)
    return 0


def cmd_graph(args, cfg: PipelineConfig) -> int:
    slices = slice_stream(_read_events(args.events, cfg), cfg.slice_interval)
    wanted = range(len(slices)) if args.slice is None else [args.slice]
    for i in wanted:
        if not 0 <= i < len(slices):
            raise SystemExit(f"slice {i} out of range (stream has {len(slices)})")
        bundle = build_bundle(EventTensor(encode_slice(cfg, slices[i]).data), cfg.graph_config())
        _write(_out(args, f"graph_slice{i}.txt"), dump_bundle(bundle))
    return 0


def _model(args, cfg: PipelineConfig):
    return load_model(cfg, args.checkpoint) if args.checkpoint else build_model(cfg)


def cmd_forward(args, cfg: PipelineConfig) -> int:
    events = _read_events(args.events, cfg)
    _, metrics = run_pipeline(cfg, events, _read_gt(args.gt), _model(args, cfg), args.out_dir, heatmaps=True)
    if metrics:
        sys.stdout.write(format_metrics(metrics))
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    events = _read_events(args.events, cfg)
    _, metrics = run_pipeline(cfg, events, _read_gt(args.gt), _model(args, cfg), args.out_dir)
    sys.stdout.write(format_metrics(metrics))
    return 0


def _train_and_record(cfg: PipelineConfig, out_dir: str):
    train_samples, val_samples = synthetic_splits(cfg)
    result = train(cfg, train_samples, val_samples, dump_dir=out_dir)
    os.makedirs(out_dir, exist_ok=True)
    save_model(result.model, os.path.join(out_dir, "model.bin"))
    _write(os.path.join(out_dir, "loss_log.txt"), result.loss_log())
    _write(os.path.join(out_dir, "config.txt"), serialize_config(cfg))
    with open(os.path.join(out_dir, "val_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mAP", "mAP50", "mAP75"])
        for row in result.curve:
            w.writerow([row["step"], f"{row['mAP']:.6f}", f"{row['mAP50']:.6f}", f"{row['mAP75']:.6f}"])
    return result, val_samples


def cmd_train(args, cfg: PipelineConfig) -> int:
    result, val_samples = _train_and_record(cfg, args.out_dir)
    _, metrics = evaluate(result.model, val_samples)
    _write(_out(args, "metrics.txt"), format_metrics(metrics))
    sys.stdout.write(format_metrics(metrics))
    return 0


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    if args.axis not in _CONFIG_KEYS:
        raise SystemExit(f"unknown config key {args.axis!r}")
    values: List[str] = args.values.split("|")
    rows = []
    for raw in values:
        run_cfg = cfg.replace(**{args.axis: coerce(args.axis, raw)})
        run_cfg.validate()
        tag = f"{args.axis}={raw}".replace(" ", "").replace(",", "-")
        run_dir = os.path.join(args.out_dir, tag)
        if args.train:
            result, val_samples = _train_and_record(run_cfg, run_dir)
            model = result.model
        else:
            _, val_samples = synthetic_splits(run_cfg.replace(train_scenes=0, hflip=False))
            model = build_model(run_cfg)
        _, metrics = evaluate(model, val_samples)
        rows.append([raw, count_parameters(model), f"{metrics['mAP']:.6f}", f"{metrics['mAP50']:.6f}", f"{metrics['mAP75']:.6f}"])
        log.info("%s: mAP50 %.4f", tag, metrics["mAP50"])
    with open(_out(args, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "params", "mAP", "mAP50", "mAP75"])
        w.writerows(rows)
    return 0


# --------------------------------------------------------------------------- parser


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvheat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic event stream and its ground truth")
    p.add_argument("--scenes", type=int, help="number of scenes (one per slice); default val_scenes")
    _add_config_flags(p)

    p = sub.add_parser("graph", help="dump the graph bundle of each slice")
    p.add_argument("--events", required=True)
    p.add_argument("--slice", type=int, help="only this slice index")
    _add_config_flags(p)

    for name, helptext in (("forward", "run the model and write detections plus stage heat maps"),
                           ("eval", "detect and score against ground truth")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--events", required=True)
        p.add_argument("--gt", required=name == "eval", help="ground-truth file (image class x1 y1 x2 y2)")
        p.add_argument("--checkpoint", help="model.bin from 'train'; untrained weights otherwise")
        _add_config_flags(p)

    p = sub.add_parser("train", help="train on seeded synthetic scenes")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="sweep one config key and write ablation.csv")
    p.add_argument("--axis", required=True, help="config key to sweep")
    p.add_argument("--values", required=True, help="values separated by '|', e.g. 'none|all' or '1,1,2,1|2,2,6,2'")
    p.add_argument("--no-train", dest="train", action="store_false", help="score untrained models only")
    _add_config_flags(p)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "graph": cmd_graph,
    "forward": cmd_forward,
    "eval": cmd_eval,
    "train": cmd_train,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    torch.manual_seed(cfg.seed)
    try:
        return COMMANDS[args.command](args, cfg)
    except (EventParseError, ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
