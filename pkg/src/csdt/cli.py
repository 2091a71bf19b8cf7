"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import experiment, metrics
from .experiment import ConfigError, ExperimentConfig, StageError
from .network import CheckpointError, NetworkConfig, save_checkpoint
from .synthgen import DatasetConfig, build_dataset, load_manifest, parse_rate
from .trainer import TrainConfig, TrainData, infer, pretrain_static_teacher, train_from_manifest

log = logging.getLogger("csdt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _train_config(args) -> TrainConfig:
    """TrainConfig from ``--config`` plus command-line overrides."""
    d = _load_json(args.config) if getattr(args, "config", None) else {}
    if "train" in d:  # an experiment config works too
        d = d["train"]
    overrides = {
        "seed": getattr(args, "seed", None),
        "max_iterations": getattr(args, "iters", None) if args.cmd == "train" else None,
        "pretrain_iterations": getattr(args, "iters", None) if args.cmd == "pretrain" else None,
        "label_rate": getattr(args, "label_rate", None),
        "pl_strategy": getattr(args, "pl_strategy", None),
        "learning_rate": getattr(args, "lr", None) if args.cmd == "train" else None,
        "pretrain_learning_rate": getattr(args, "lr", None) if args.cmd == "pretrain" else None,
        "batch_labeled": getattr(args, "batch", None),
        "batch_unlabeled": getattr(args, "batch", None),
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    net = dict(d.get("network") or {})
    for key, attr in (("base_channels", "base_channels"), ("depths", "depths")):
        v = getattr(args, attr, None)
        if v is not None:
            net[key] = v
    d["network"] = net
    try:
        cfg = TrainConfig.from_dict(d)
        if getattr(args, "ablate", None):
            cfg = cfg.apply_ablations(args.ablate)
        if cfg.label_rate is not None:
            parse_rate(cfg.label_rate)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    try:
        cfg = DatasetConfig(
            out=args.out,
            train_count=args.train,
            val_count=args.val,
            test_per_light=args.test_per_light,
            labeling_rate=args.label_rate,
            seed=args.seed,
            image_size=tuple(args.size),
            force=args.force,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    man = build_dataset(cfg)
    print(f"{args.out}: {len(man['splits']['labeled'])} labeled, {len(man['splits']['unlabeled'])} unlabeled, "
          f"{len(man['splits']['val'])} val")


def cmd_pretrain(args):
    cfg = _train_config(args)
    data = TrainData.from_manifest(load_manifest(args.data), cfg.label_rate)
    out = Path(args.out)
    log_path = out.with_suffix(".jsonl")
    model = pretrain_static_teacher(data, cfg, log_path)
    save_checkpoint(out, model, {"role": "ST", "iterations": cfg.pretrain_iterations, "seed": cfg.seed})
    print(out)


def cmd_train(args):
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    res = train_from_manifest(args.data, cfg, out, st_checkpoint=args.st, resume=args.resume)
    print(json.dumps({"final_val_dice": res.final_val_dice, "best_val_dice": res.best_val_dice,
                      "checkpoints": res.checkpoints}, indent=1))


def cmd_infer(args):
    src = Path(args.images)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise ConfigError(f"no .png images under {src}")
    imgs = np.stack([np.asarray(Image.open(f).convert("L"), dtype=np.float32) / 255.0 for f in files])
    probs = infer(args.ckpt, imgs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, p in zip(files, probs):
        Image.fromarray(np.round(p * 255).astype(np.uint8)).save(out / f"{f.stem}_prob.png")
        Image.fromarray((p > args.threshold).astype(np.uint8) * 255).save(out / f"{f.stem}_mask.png")
    print(f"{len(files)} images -> {out}")


def cmd_eval(args):
    manifest = load_manifest(args.data)
    splits = args.split or None
    report = metrics.evaluate_split(args.ckpt, manifest, splits, per_light=args.per_light)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    experiment._write_csv(out.with_suffix(".csv"), metrics.report_rows(report))
    print(report.table())


def _run_dirs(root):
    root = Path(root)
    if (root / "config.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "config.json").exists())


def cmd_report(args):
    dirs = _run_dirs(args.runs)
    if not dirs:
        raise ConfigError(f"no run directories under {args.runs}")
    out = Path(args.out)
    written = []
    for d in dirs:
        written += experiment.stage_report(d, out / d.name if len(dirs) > 1 else out)
    rows, best = experiment.compare_runs(dirs)
    written += experiment.write_comparison(rows, best, out / "summary.csv", out if len(dirs) > 1 else None, dirs)
    print(experiment.format_comparison(rows, best))
    for p in written:
        print(p)


def _experiment_from_args(args) -> ExperimentConfig:
    d = _load_json(args.config) if args.config else {}
    for key in ("name", "out_root", "seed", "data", "mdpc_count"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.ablate:
        d["ablate"] = sorted(set(d.get("ablate", [])) | set(args.ablate))
    train = dict(d.get("train", {}))
    for key, v in (("teacher_mode", args.teacher_mode), ("pl_strategy", args.pl_strategy),
                   ("max_iterations", args.iters)):
        if v is not None:
            train[key] = v
    d["train"] = train
    return ExperimentConfig.from_dict(d)


def _run_one(exp_dict, stages):
    exp = ExperimentConfig.from_dict(exp_dict)
    return str(experiment.run_experiment(exp, stages))


def cmd_run(args):
    base = _experiment_from_args(args)
    stages = args.stages.split(",") if args.stages else experiment.STAGES
    bad = set(stages) - set(experiment.STAGES)
    if bad:
        raise ConfigError(f"unknown stage(s) {sorted(bad)}")
    exps = [base]
    if args.label_rates:
        rates = args.label_rates.split(",")
        exps = []
        for r in rates:
            d = base.to_dict()
            d["name"] = f"{base.name}_r{r.replace('/', '-')}"
            d["train"]["label_rate"] = r
            if not base.data:
                # the generated dataset must carry at least the largest requested rate
                d["dataset"] = {**d["dataset"], "labeling_rate": str(max(parse_rate(x) for x in rates))}
            exps.append(ExperimentConfig.from_dict(d))
    if args.parallel > 1 and len(exps) > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            dirs = list(pool.map(_run_one, [e.to_dict() for e in exps], [stages] * len(exps)))
    else:
        dirs = [str(experiment.run_experiment(e, stages)) for e in exps]
    if len(dirs) > 1 and "eval" in stages:
        rows, best = experiment.compare_runs(dirs)
        print(experiment.format_comparison(rows, best))
        experiment.write_comparison(rows, best, Path(base.out_root) / f"{base.name}_compare.csv")
    for d in dirs:
        print(d)


def cmd_compare(args):
    dirs = [d for r in args.runs for d in _run_dirs(r)] if len(args.runs) == 1 else [Path(r) for r in args.runs]
    rows, best = experiment.compare_runs(dirs, baseline=args.baseline, pooled_fa=args.fa_pooled)
    print(experiment.format_comparison(rows, best))
    experiment.write_comparison(rows, best, args.csv, args.plots, dirs)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csdt", description="Semi-supervised stripe target segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=1000)
    g.add_argument("--val", type=int, default=100)
    g.add_argument("--test-per-light", type=int, default=100)
    g.add_argument("--label-rate", default="1/4")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen)

    def net_args(q):
        q.add_argument("--config", help="JSON file mirroring TrainConfig")
        q.add_argument("--seed", type=int)
        q.add_argument("--batch", type=int, help="labeled and unlabeled batch size")
        q.add_argument("--lr", type=float, help="learning rate of this phase")
        q.add_argument("--base-channels", type=int)
        q.add_argument("--depths", type=int)

    pt = sub.add_parser("pretrain", help="train the static teacher on labeled images")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True, help="checkpoint path (.npz)")
    pt.add_argument("--iters", type=int)
    pt.add_argument("--label-rate")
    net_args(pt)
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="semi-supervised training")
    t.add_argument("--data", required=True)
    t.add_argument("--st", help="static teacher checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--label-rate")
    t.add_argument("--ablate", action="append", choices=["st", "dt", "lu", "lc"], default=[])
    t.add_argument("--pl-strategy", help="apl | intersection | union | switch:N")
    t.add_argument("--iters", type=int)
    t.add_argument("--resume", action="store_true")
    net_args(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict masks for a directory of PNG images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--images", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="test-set metrics for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report .json (a .csv is written next to it)")
    e.add_argument("--per-light", action="store_true", help="break results down by stray-light kind")
    e.add_argument("--split", action="append", help="restrict to these splits (repeatable)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="plots and a summary table for run directories")
    r.add_argument("--runs", required=True, help="a run directory or a directory of runs")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("run", help="gen -> pretrain -> train -> eval -> report in a run directory")
    x.add_argument("--config", help="experiment JSON")
    x.add_argument("--name")
    x.add_argument("--out-root")
    x.add_argument("--seed", type=int)
    x.add_argument("--data", help="use an existing dataset instead of generating one")
    x.add_argument("--teacher-mode", choices=["dual", "st", "dt", "none"])
    x.add_argument("--ablate", action="append", choices=["st", "dt", "lu", "lc"], default=[])
    x.add_argument("--pl-strategy")
    x.add_argument("--mdpc-count", type=int)
    x.add_argument("--iters", type=int)
    x.add_argument("--label-rates", help="comma-separated, one run per rate, e.g. 1/4,1/8,1/16")
    x.add_argument("--stages", help="comma-separated subset of " + ",".join(experiment.STAGES))
    x.add_argument("--parallel", type=int, default=1, help="worker processes for a rate matrix")
    x.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="aligned metric table across runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--baseline", help="run name for delta columns (run - baseline)")
    c.add_argument("--csv")
    c.add_argument("--plots")
    c.add_argument("--fa-pooled", action="store_true", help="pool false-alarm pixels in the mean row")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileExistsError, FileNotFoundError, CheckpointError, FloatingPointError, RuntimeError, OSError,
            ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
