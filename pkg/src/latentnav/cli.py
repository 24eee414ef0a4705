"""Command-line entry point: gen-data, train-codec, train, eval, bench-codec,
experiment, report, stats. Errors leave as machine-readable JSON on stderr
with a nonzero exit code."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import gridworld as gw
from .config import PipelineConfig, apply_overrides
from .data import load_dataset
from .errors import LatentNavError
from .evaluation import svg_bar_chart
from .experiments import (
    bench_codec,
    build_codec,
    evaluate_policy,
    gen_dataset,
    run_experiment,
    train_policy,
)
from .training import parse_mode


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_train_codec(args) -> int:
    cfg = _load_config(args)
    codec, path = build_codec(cfg, args.out)
    _emit({"codec": str(path), "sha256": codec_mod.codec_hash(codec), "usage_nonzero": int((codec.usage > 0).sum())})
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    codec = codec_mod.load_codec(args.codec)
    path, stats = gen_dataset(cfg, codec, args.out)
    if args.png_samples:
        world = gw.generate_world(cfg.data.seed, cfg.world)
        rng = np.random.default_rng(cfg.data.seed)
        task = gw.generate_task(world, rng)
        obs = gw.render(world, task.start)
        out = Path(args.out)
        for name, img in zip(("left", "front", "right"), obs.views()):
            gw.save_image_png(img, out / f"sample_{name}.png", upscale=8)
    _emit({"dataset": str(path), "stats": stats})
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    updates = {}
    if args.recipe:
        updates["recipe"] = args.recipe
    if args.modes:
        updates["enabled_modes"] = tuple(parse_mode(m) for m in args.modes.split(","))
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.steps is not None:
        updates["steps"] = args.steps
    tc = replace(cfg.train, **updates) if updates else cfg.train
    ckpt, info = train_policy(cfg, args.dataset, args.out, tc, tag=args.tag)
    _emit(info)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    codec = codec_mod.load_codec(args.codec)
    mode = parse_mode(args.mode)
    result = evaluate_policy(
        cfg, args.checkpoint, codec, mode, out_dir=args.out, seed_shift=args.seed_shift, tag=args.tag
    )
    _emit(result)
    return 0


def cmd_bench_codec(args) -> int:
    cfg = _load_config(args)
    codec = codec_mod.load_codec(args.codec)
    rows = bench_codec(cfg, codec, args.out)
    _emit({"rows": rows, "csv": str(Path(args.out) / "codec_benchmark.csv")})
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = run_experiment(args.name, cfg, args.out, seeds=seeds)
    _emit({"experiment": args.name, "rows": len(rows), "out": str(args.out)})
    return 0


def cmd_stats(args) -> int:
    samples, header = load_dataset(args.dataset)
    hist_lens = [len(s.history) for s in samples]
    action_hist: dict[str, int] = {}
    for s in samples:
        for a in s.actions:
            action_hist[a] = action_hist.get(a, 0) + 1
    _emit(
        {
            "header": header,
            "samples": len(samples),
            "augmented": sum(1 for s in samples if s.augmented),
            "mean_history_len": float(np.mean(hist_lens)) if hist_lens else 0.0,
            "action_hist": action_hist,
            "trace_len_mean": float(np.mean([len(s.t_cot) for s in samples])) if samples else 0.0,
        }
    )
    return 0


def cmd_report(args) -> int:
    path = Path(args.csv)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        _emit({"rows": 0})
        return 0
    metric = args.metric
    groups: dict[str, list[float]] = {}
    for row in rows:
        key = row.get(args.group, "?")
        if row.get(metric, "") != "":
            groups.setdefault(key, []).append(float(row[metric]))
    table = [(k, float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()]
    width = max(len(k) for k, *_ in table)
    print(f"{'group'.ljust(width)}  {metric+'_mean':>12}  {metric+'_std':>12}  n")
    for k, mean, std, n in table:
        print(f"{k.ljust(width)}  {mean:12.4f}  {std:12.4f}  {n}")
    svg_path = path.with_suffix(f".{metric}.svg")
    svg_bar_chart([t[0] for t in table], {metric: [t[1] for t in table]}, f"{path.stem}: {metric}", svg_path)
    print(f"chart: {svg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", help="pipeline config JSON file (defaults used if omitted)")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted config override, e.g. train.lr=0.1")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-codec", help="train the image codec on rendered views")
    common(p)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("gen-data", help="generate the sliced training dataset")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--png-samples", action="store_true", help="export sample view PNGs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the token policy")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--recipe", choices=["mixture", "aligned"])
    p.add_argument("--modes", help="comma-separated mode names, e.g. non-cot,v-cot")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tag", default="model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="online evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--mode", default="non-cot")
    p.add_argument("--seed-shift", type=int, default=0)
    p.add_argument("--tag", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-codec", help="compression-ratio / MSE table")
    common(p)
    p.add_argument("--codec", required=True)
    p.set_defaults(func=cmd_bench_codec)

    p = sub.add_parser("experiment", help="run a scripted experiment recipe")
    p.add_argument("name", choices=["mode-combos", "alignment-ablation", "explicit-vs-implicit", "efficiency", "scale-sweep"])
    common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="summarize an experiment CSV and render a chart")
    p.add_argument("--csv", required=True)
    p.add_argument("--metric", default="isr")
    p.add_argument("--group", default="label")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LatentNavError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
