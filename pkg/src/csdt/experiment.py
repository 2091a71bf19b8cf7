"""Experiment configs, run directories and the gen -> pretrain -> train -> eval -> report pipeline.

A run directory holds everything needed to replay it::

    runs/<name>/config.json        resolved experiment config
    runs/<name>/data/              generated dataset (unless an external one is used)
    runs/<name>/checkpoints/       st.npz, dt_final.npz, dt_best.npz, s_final.npz, state.pt
    runs/<name>/logs/              pretrain.jsonl, metrics.jsonl, val.jsonl, decisions.jsonl
    runs/<name>/report.json        test metrics of the dynamic teacher
    runs/<name>/report.csv
    runs/<name>/plots/
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import metrics, plotting
from .metrics import MetricReport
from .network import load_checkpoint, save_checkpoint
from .synthgen import DatasetConfig, build_dataset, load_manifest
from .trainer import TrainConfig, TrainData, pretrain_static_teacher, train

log = logging.getLogger(__name__)

STAGES = ("gen", "pretrain", "train", "eval", "report")
MDPC_RATES = (1, 2, 4, 8)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    name: str = "run"
    out_root: str = "runs"
    seed: int = 0
    data: str | None = None  # existing dataset; generated inside the run dir when None
    dataset: dict = field(default_factory=dict)  # DatasetConfig overrides for generation
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: list[str] = field(default_factory=list)
    mdpc_count: int | None = None
    eval_checkpoint: str = "dt_final"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.ablate = sorted(set(self.ablate))
        if self.mdpc_count is not None and not 1 <= self.mdpc_count <= len(MDPC_RATES):
            raise ConfigError(f"mdpc_count must be in 1..{len(MDPC_RATES)}, got {self.mdpc_count}")
        if self.eval_checkpoint not in ("dt_final", "dt_best"):
            raise ConfigError(f"eval_checkpoint must be dt_final or dt_best, got {self.eval_checkpoint!r}")
        unknown = set(self.dataset) - {f.name for f in fields(DatasetConfig)}
        if unknown:
            raise ConfigError(f"unknown dataset option(s) {sorted(unknown)}")
        self.resolved_train()  # surface ablation errors early

    @property
    def run_dir(self) -> Path:
        return Path(self.out_root) / self.name

    def dataset_config(self) -> DatasetConfig:
        d = {"seed": self.seed, **self.dataset, "out": str(self.run_dir / "data")}
        return DatasetConfig(**d)

    def data_dir(self) -> Path:
        return Path(self.data) if self.data else self.run_dir / "data"

    def resolved_train(self) -> TrainConfig:
        """TrainConfig with seed, ablations and MDPC count applied."""
        try:
            cfg = self.train.apply_ablations(self.ablate)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.seed = self.seed
        if self.mdpc_count is not None:
            cfg.network = copy.deepcopy(cfg.network)
            cfg.network.dilation_rates = list(MDPC_RATES[: self.mdpc_count])
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment option(s) {sorted(unknown)}")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)


# --------------------------------------------------------------------------
# stages


def _write_csv(path, rows):
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def stage_gen(exp: ExperimentConfig) -> Path:
    root = exp.data_dir()
    if (root / "manifest.json").exists():
        load_manifest(root)  # validates
        return root
    if exp.data:
        raise FileNotFoundError(f"no manifest.json under {root}")
    build_dataset(exp.dataset_config())
    return root


def _needs_static_teacher(cfg: TrainConfig) -> bool:
    return cfg.uses_st or cfg.student_init == "static"


def stage_pretrain(exp: ExperimentConfig, data: TrainData) -> Path | None:
    cfg = exp.resolved_train()
    if not _needs_static_teacher(cfg):
        return None
    path = exp.run_dir / "checkpoints" / "st.npz"
    if path.exists():
        return path
    (exp.run_dir / "logs").mkdir(parents=True, exist_ok=True)
    model = pretrain_static_teacher(data, cfg, exp.run_dir / "logs" / "pretrain.jsonl")
    return save_checkpoint(path, model, {"role": "ST", "iterations": cfg.pretrain_iterations, "seed": cfg.seed})


def train_done(run_dir: Path, cfg: TrainConfig) -> bool:
    p = Path(run_dir) / "checkpoints" / "dt_final.npz"
    if not p.exists():
        return False
    try:
        _, meta = load_checkpoint(p)
    except Exception:
        return False
    return meta.get("t") == cfg.max_iterations


def stage_train(exp: ExperimentConfig, data: TrainData, st_path: Path | None):
    cfg = exp.resolved_train()
    if train_done(exp.run_dir, cfg):
        return None
    st = load_checkpoint(st_path)[0] if st_path else None
    return train(data, cfg, exp.run_dir, st, resume=True)


def stage_eval(exp: ExperimentConfig) -> MetricReport:
    manifest = load_manifest(exp.data_dir())
    ckpt = exp.run_dir / "checkpoints" / f"{exp.eval_checkpoint}.npz"
    report = metrics.evaluate_split(ckpt, manifest, per_light=True)
    report.meta.update(run=exp.name, checkpoint=ckpt.name)
    (exp.run_dir / "report.json").write_text(report.to_json())
    _write_csv(exp.run_dir / "report.csv", metrics.report_rows(report))
    return report


def stage_report(run_dir, out_dir=None) -> list[Path]:
    """Loss and validation curves for one run, plus its metric bars."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    recs = plotting.read_jsonl(run_dir / "logs" / "metrics.jsonl")
    if recs:
        written.append(plotting.plot_losses(recs, out / "losses.png", title=run_dir.name))
    curves = {"DT": plotting.read_jsonl(run_dir / "logs" / "val.jsonl")}
    pre = [r for r in plotting.read_jsonl(run_dir / "logs" / "pretrain.jsonl") if "val_dice" in r]
    if pre:
        curves = {"ST pretraining": pre, **curves}
    if any(curves.values()):
        written.append(plotting.plot_val_curves(curves, out / "val_dice.png", title=run_dir.name))
    report_path = run_dir / "report.json"
    if report_path.exists():
        rep = MetricReport.from_dict(json.loads(report_path.read_text()))
        rows = {run_dir.name: _report_categories(rep)}
        written.append(plotting.plot_metric_bars(rows, out / "metrics.png", title=run_dir.name))
    return written


def _report_categories(rep: MetricReport) -> dict:
    d = {k: asdict(v) for k, v in rep.categories.items()}
    d["overall"] = asdict(rep.overall)
    return d


def run_experiment(exp: ExperimentConfig, stages=STAGES) -> Path:
    """Execute the requested stages in order; completed stages are skipped."""
    run_dir = exp.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        old = json.loads(cfg_path.read_text())
        if old != json.loads(json.dumps(exp.to_dict(), sort_keys=True)):
            raise ConfigError(f"{cfg_path} holds a different config; use a new run name")
    else:
        exp.save(cfg_path)

    data = st_path = None
    for stage in STAGES:
        if stage not in stages:
            continue
        try:
            log.info("[%s] %s", exp.name, stage)
            if stage == "gen":
                stage_gen(exp)
            elif stage == "pretrain":
                data = data or TrainData.from_manifest(load_manifest(exp.data_dir()), exp.train.label_rate)
                st_path = stage_pretrain(exp, data)
            elif stage == "train":
                data = data or TrainData.from_manifest(load_manifest(exp.data_dir()), exp.train.label_rate)
                if st_path is None and _needs_static_teacher(exp.resolved_train()):
                    st_path = run_dir / "checkpoints" / "st.npz"
                    if not st_path.exists():
                        raise FileNotFoundError(f"{st_path} missing; run the pretrain stage first")
                stage_train(exp, data, st_path)
            elif stage == "eval":
                stage_eval(exp)
            elif stage == "report":
                stage_report(run_dir)
        except ConfigError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
    return run_dir


# --------------------------------------------------------------------------
# comparison


COLUMNS = (("dice", True), ("miou", True), ("pd", True), ("fa", False))  # (metric, higher is better)


@dataclass
class RunSummary:
    name: str
    status: str
    report: MetricReport | None = None


def summarize_run(run_dir) -> RunSummary:
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").exists():
        return RunSummary(run_dir.name, "incomplete: no config.json")
    missing = [s for s, p in (("train", "checkpoints/dt_final.npz"), ("eval", "report.json")) if not (run_dir / p).exists()]
    if missing:
        return RunSummary(run_dir.name, "incomplete: missing " + ", ".join(missing))
    rep = MetricReport.from_dict(json.loads((run_dir / "report.json").read_text()))
    return RunSummary(run_dir.name, "ok", rep)


def compare_runs(run_dirs, baseline: str | None = None, pooled_fa: bool = False):
    """Rows for an aligned comparison table.

    Returns ``(rows, best)`` where ``rows`` is a list of dicts and ``best``
    maps each metric column to the name of the winning run. With a baseline,
    ``d_<metric>`` columns hold ``run - baseline``.
    """
    summaries = [summarize_run(d) for d in run_dirs]
    if not summaries:
        raise ConfigError("no runs to compare")
    done = {s.name: s for s in summaries if s.report is not None}
    if baseline is not None and baseline not in done:
        raise ConfigError(f"baseline {baseline!r} is not a completed run")
    rows = []
    for s in summaries:
        row = {"run": s.name, "status": s.status}
        if s.report is not None:
            for key, _ in COLUMNS:
                row[key] = getattr(s.report.overall, key)
            if baseline is not None:
                base = done[baseline].report.overall
                for key, _ in COLUMNS:
                    row[f"d_{key}"] = row[key] - getattr(base, key)
        rows.append(row)
    if len(done) > 1:
        mean = metrics.average_reports([s.report for s in done.values()], pooled_fa=pooled_fa)
        rows.append({"run": "mean", "status": "pooled Fa" if pooled_fa else "mean Fa",
                     **{k: getattr(mean, k) for k, _ in COLUMNS}})
    best = {}
    for key, higher in COLUMNS:
        cands = [r for r in rows if key in r and r["run"] != "mean"]
        if cands:
            pick = max if higher else min
            best[key] = pick(cands, key=lambda r: r[key])["run"]
    return rows, best


def format_comparison(rows, best) -> str:
    keys = [k for k, _ in COLUMNS]
    deltas = [f"d_{k}" for k in keys if any(f"d_{k}" in r for r in rows)]
    width = max(8, *(len(r["run"]) for r in rows))
    head = f"{'run':<{width}} " + " ".join(f"{k:>9}" for k in keys + deltas) + "  status"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = []
        for k in keys + deltas:
            if k not in r:
                cells.append(f"{'-':>9}")
                continue
            mark = "*" if best.get(k) == r["run"] else " "
            cells.append(f"{r[k]:8.2f}{mark}")
        lines.append(f"{r['run']:<{width}} " + " ".join(cells) + f"  {r['status']}")
    lines.append("* best per column (Fa: lowest)")
    return "\n".join(lines)


def write_comparison(rows, best, csv_path=None, plot_dir=None, run_dirs=()):
    out = []
    if csv_path:
        keys = ["run", "status"] + [k for k, _ in COLUMNS]
        keys += [k for k in (f"d_{c}" for c, _ in COLUMNS) if any(k in r for r in rows)]
        full = [{k: r.get(k, "") for k in keys} | {"best": ",".join(c for c, n in best.items() if n == r["run"])} for r in rows]
        out.append(_write_csv(csv_path, full))
    if plot_dir:
        plot_dir = Path(plot_dir)
        plot_dir.mkdir(parents=True, exist_ok=True)
        bars, curves = {}, {}
        for d in map(Path, run_dirs):
            s = summarize_run(d)
            if s.report is not None:
                bars[s.name] = _report_categories(s.report)
            val = plotting.read_jsonl(d / "logs" / "val.jsonl")
            if val:
                curves[d.name] = val
        if bars:
            out.append(plotting.plot_metric_bars(bars, plot_dir / "compare_metrics.png"))
        if curves:
            out.append(plotting.plot_val_curves(curves, plot_dir / "compare_val_dice.png"))
    return out
