"""Experiment runner: train methods per split seed, evaluate RMSE on target tasks.

Outputs written under ``output_dir``:

* ``results.csv``        task x method RMSE (mean over seeds) plus an Average row
* ``results_raw.csv``    one row per (seed, method, task)
* ``timing.csv``         wall-clock seconds for training and per-target testing
* ``history_<method>_<seed>.csv`` per-epoch losses of trained methods
* ``checkpoints/``       trained parameters, reused when the training inputs match
* ``manifest.json``      configuration, hash, version and split record
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import time
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .baselines import (
    BASE_KINDS,
    FRAMEWORKS,
    BaseNet,
    DSForecaster,
    Forecaster,
    MAMLForecaster,
    NetForecaster,
    OursForecaster,
    PreForecaster,
    train_di,
    train_maml,
)
from .data import SeriesSet, read_prepared, split_tasks, task_seed
from .errors import ConfigError, DataError, FewShotError, TaskTooSmallError
from .ffn import load_archive
from .model import ForecastModel, ModelConfig
from .trainer import TrainConfig, train, write_history

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "FEWSHOT_UCR_ROOT"
METHODS = (
    ("ours",)
    + tuple(f"{fw}-{kind}" for kind in BASE_KINDS for fw in FRAMEWORKS)
    + ("pre",)
)
SWEEP_AXES = ("n_training_tasks", "test_support_size")


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    training_task_counts: list[int] = Field(default_factory=list)
    test_support_sizes: list[int] = Field(default_factory=lambda: [1, 3, 5, 10])


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset_root: str | None = None
    prepared_dir: str = "prepared"
    output_dir: str = "runs/default"
    methods: list[str] = Field(default_factory=lambda: ["ours", "di-lstm", "pre"])
    seeds: list[int] = Field(default_factory=lambda: [0])
    data_seed: int = 0
    tasks: list[str] | None = None
    max_tasks: int | None = Field(None, ge=3)
    split_sizes: list[int] | None = None
    test_support_size: int = Field(3, ge=1)
    train: TrainConfig = Field(default_factory=TrainConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v):
        unknown = [m for m in v if m not in METHODS]
        if unknown or not v:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        return v

    @field_validator("seeds")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    def identity(self) -> dict:
        """Everything that determines results (the output location does not)."""
        return self.model_dump(mode="json", exclude={"output_dir"})

    def hash(self) -> str:
        return _digest(self.identity())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _set_dotted(target: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        target = target.setdefault(p, {})
    target[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    """Read a YAML config and apply ``dotted.key -> value`` overrides."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    if raw.get("dataset_root") is None and os.environ.get(DATA_ROOT_ENV):
        raw["dataset_root"] = os.environ[DATA_ROOT_ENV]
    try:
        return ExperimentConfig(**raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------- results


@dataclass
class ResultTable:
    """RMSE records; cells average over the seeds in which a task was a target."""

    methods: list[str]
    records: list[dict] = field(default_factory=list)

    @property
    def tasks(self) -> list[str]:
        return sorted({r["task"] for r in self.records})

    @property
    def seeds(self) -> list[int]:
        return sorted({r["seed"] for r in self.records})

    def cells(self) -> dict[str, dict[str, float]]:
        acc: dict[tuple[str, str], list[float]] = defaultdict(list)
        for r in sorted(self.records, key=lambda r: (r["task"], r["method"], r["seed"])):
            acc[(r["task"], r["method"])].append(r["rmse"])
        out: dict[str, dict[str, float]] = defaultdict(dict)
        for (task, method), vals in acc.items():
            out[task][method] = float(np.mean(vals))
        return dict(out)

    def mean_row(self) -> dict[str, float]:
        cells = self.cells()
        row = {}
        for m in self.methods:
            vals = [cells[t][m] for t in self.tasks if m in cells.get(t, {})]
            if vals:
                row[m] = float(np.mean(vals))
        return row

    def seed_means(self) -> dict[int, dict[str, float]]:
        acc: dict[tuple[int, str], list[float]] = defaultdict(list)
        for r in sorted(self.records, key=lambda r: (r["seed"], r["method"], r["task"])):
            acc[(r["seed"], r["method"])].append(r["rmse"])
        out: dict[int, dict[str, float]] = defaultdict(dict)
        for (seed, method), vals in acc.items():
            out[seed][method] = float(np.mean(vals))
        return dict(out)

    def write_csv(self, path: str | Path) -> Path:
        cells = self.cells()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", *self.methods])
            for task in self.tasks:
                w.writerow([task, *(_fmt(cells[task].get(m)) for m in self.methods)])
            mean = self.mean_row()
            w.writerow(["Average", *(_fmt(mean.get(m)) for m in self.methods)])
        return Path(path)

    def write_raw_csv(self, path: str | Path) -> Path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "method", "task", "rmse"])
            for r in sorted(self.records, key=lambda r: (r["seed"], r["method"], r["task"])):
                w.writerow([r["seed"], r["method"], r["task"], repr(r["rmse"])])
        return Path(path)

    @classmethod
    def read_raw_csv(cls, path: str | Path, methods: Sequence[str] | None = None) -> ResultTable:
        with open(path, newline="") as fh:
            records = [
                {"seed": int(r["seed"]), "method": r["method"], "task": r["task"], "rmse": float(r["rmse"])}
                for r in csv.DictReader(fh)
            ]
        present = {r["method"] for r in records}
        if methods is None:
            methods = [m for m in METHODS if m in present]
        return cls(list(methods), records)

    def to_text(self, digits: int = 3) -> str:
        cells = self.cells()
        width = max([len("Average"), *map(len, self.tasks)])
        lines = [" ".join([f"{'task':<{width}}", *(f"{m:>11}" for m in self.methods)])]
        for task in self.tasks:
            vals = [cells[task].get(m) for m in self.methods]
            lines.append(" ".join([f"{task:<{width}}", *(_cell(v, digits) for v in vals)]))
        mean = self.mean_row()
        lines.append(" ".join([f"{'Average':<{width}}", *(_cell(mean.get(m), digits) for m in self.methods)]))
        if any(m.startswith("maml-") for m in self.methods):
            lines.append("(maml-* columns use first-order meta-gradients)")
        return "\n".join(lines)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)


def _cell(v: float | None, digits: int) -> str:
    return f"{'-':>11}" if v is None else f"{v:>11.{digits}f}"


# ------------------------------------------------------------ evaluation


def target_partition(task: SeriesSet, n_support: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded per (task, seed): every method sees the same support and queries."""
    if len(task) < n_support + 1:
        raise TaskTooSmallError(f"task {task.name} has {len(task)} series; need > {n_support}")
    perm = np.random.default_rng(task_seed(task.name, seed)).permutation(len(task))
    return [int(i) for i in perm[:n_support]], [int(i) for i in perm[n_support:]]


def rmse_of(preds: Sequence[np.ndarray], series: Sequence[np.ndarray]) -> float:
    errs = []
    for p, s in zip(preds, series):
        s = np.asarray(s, dtype=np.float64)
        errs.append(p - s[len(s) - len(p) :])
    return math.sqrt(float(np.mean(np.concatenate(errs) ** 2)))


def evaluate_task(forecaster: Forecaster, task: SeriesSet, n_support: int, seed: int) -> float:
    """Pooled next-step RMSE over every query series and predicted timestep."""
    s_rows, q_rows = target_partition(task, n_support, seed)
    fitted = forecaster.prepare([task.values[i] for i in s_rows])
    queries = [task.values[i] for i in q_rows]
    return rmse_of(fitted.predict_many(queries), queries)


def emit_traces(forecaster: Forecaster, task: SeriesSet, indices: Sequence[int]) -> list[dict]:
    """Rows ``task, series, t, true, predicted`` (1-based ``t``) for a prepared forecaster."""
    rows = []
    for i in indices:
        if not 0 <= i < len(task):
            raise IndexError(f"series index {i} out of range for task {task.name} ({len(task)} series)")
        series = task.values[i]
        pred = forecaster.predict_series(series)
        offset = len(series) - len(pred)
        for j, p in enumerate(pred):
            t = offset + j
            rows.append({"task": task.name, "series": i, "t": t + 1, "true": float(series[t]), "predicted": float(p)})
    return rows


def write_rows(path: str | Path, rows: Sequence[Mapping], fields: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


# -------------------------------------------------------------- training


def select_tasks(cfg: ExperimentConfig) -> dict[str, SeriesSet]:
    tasks = read_prepared(cfg.prepared_dir, cfg.tasks)
    if cfg.max_tasks is not None and len(tasks) > cfg.max_tasks:
        names = sorted(tasks)
        keep = np.random.default_rng(cfg.data_seed).choice(len(names), cfg.max_tasks, replace=False)
        tasks = {names[i]: tasks[names[i]] for i in sorted(keep)}
    return tasks


@dataclass
class Trained:
    forecaster: Forecaster
    train_seconds: float | None
    history: list[dict] | None = None


def _training_key(method: str, seed: int, cfg: ExperimentConfig, train_names, val_names) -> str:
    return _digest({
        "method": method,
        "seed": seed,
        "train": cfg.train.model_dump(mode="json"),
        "model": cfg.model.model_dump(mode="json") if method == "ours" else None,
        "training_tasks": list(train_names),
        "validation_tasks": list(val_names),
        "prepared": str(Path(cfg.prepared_dir).resolve()),
    })


def train_method(
    method: str,
    train_tasks: Sequence[SeriesSet],
    val_tasks: Sequence[SeriesSet],
    cfg: ExperimentConfig,
    seed: int,
    out_dir: Path | None = None,
) -> Trained:
    """Build the forecaster for ``method``; trained ones reuse matching checkpoints."""
    tcfg = cfg.train.model_copy(update={"seed": seed})
    if method == "pre":
        return Trained(PreForecaster(), None)
    framework, _, kind = method.partition("-")
    if framework == "ds":
        return Trained(DSForecaster(kind, tcfg, seed), None)

    key = _training_key(method, seed, cfg, [t.name for t in train_tasks], [t.name for t in val_tasks])
    ckpt = out_dir / "checkpoints" / f"{method}_seed{seed}.npz" if out_dir else None
    loader = ForecastModel.load if method == "ours" else BaseNet.load
    if ckpt is not None and ckpt.exists():
        try:
            obj = loader(ckpt)
            meta = load_archive(ckpt)[1].get("extra", {})
            if meta.get("key") == key:
                log.info("reusing checkpoint %s", ckpt)
                return Trained(_wrap(method, obj, tcfg, seed), meta.get("train_seconds"))
        except (ValueError, OSError, KeyError) as exc:
            log.warning("ignoring unreadable checkpoint %s: %s", ckpt, exc)

    start = time.perf_counter()
    if method == "ours":
        obj, history = train(train_tasks, val_tasks, tcfg, cfg.model)
    elif framework == "di":
        obj, history = train_di(kind, train_tasks, val_tasks, tcfg)
    elif framework == "maml":
        obj, history = train_maml(kind, train_tasks, val_tasks, tcfg)
    else:
        raise ConfigError(f"unknown method {method!r}")
    seconds = time.perf_counter() - start
    if out_dir is not None:
        obj.save(ckpt, extra={"key": key, "train_seconds": seconds, "method": method, "seed": seed})
        write_history(out_dir / f"history_{method}_{seed}.csv", history)
    return Trained(_wrap(method, obj, tcfg, seed), seconds, history)


def _wrap(method: str, obj, tcfg: TrainConfig, seed: int) -> Forecaster:
    if method == "ours":
        return OursForecaster(obj)
    if method.startswith("maml-"):
        return MAMLForecaster(obj, tcfg, seed)
    return NetForecaster(obj, method)


# ------------------------------------------------------------ experiments


def _git_commit() -> str | None:
    try:
        res = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if res.returncode != 0:
        return None
    return res.stdout.strip() or None


def write_manifest(out: Path, cfg: ExperimentConfig, extra: dict) -> Path:
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg.hash(),
        "version": __version__,
        "commit": _git_commit(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def config_from_manifest(path: str | Path, output_dir: str | None = None) -> ExperimentConfig:
    manifest = json.loads(Path(path).read_text())
    raw = manifest["config"]
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return ExperimentConfig(**raw)


def _split(names, seed, cfg: ExperimentConfig, tasks: Mapping[str, SeriesSet]):
    split = split_tasks(names, seed, cfg.split_sizes)
    pick = lambda ns: [tasks[n] for n in ns]  # noqa: E731
    return split, pick(split.training), pick(split.validation), pick(split.target)


def run_experiment(cfg: ExperimentConfig) -> ResultTable:
    tasks = select_tasks(cfg)
    names = sorted(tasks)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ResultTable(list(cfg.methods))
    timing: list[dict] = []
    failures: list[dict] = []
    errors: list[FewShotError] = []
    splits: dict[str, dict] = {}
    for seed in cfg.seeds:
        seed_records, seed_timing = [], []
        try:
            split, tr, va, tg = _split(names, seed, cfg, tasks)
            splits[str(seed)] = split.as_dict()
            for method in cfg.methods:
                trained = train_method(method, tr, va, cfg, seed, out)
                if trained.train_seconds is not None:
                    seed_timing.append({"seed": seed, "method": method, "phase": "train", "task": "",
                                        "seconds": trained.train_seconds})
                for task in tg:
                    t0 = time.perf_counter()
                    rmse = evaluate_task(trained.forecaster, task, cfg.test_support_size, seed)
                    seed_timing.append({"seed": seed, "method": method, "phase": "test", "task": task.name,
                                        "seconds": time.perf_counter() - t0})
                    seed_records.append({"seed": seed, "method": method, "task": task.name, "rmse": rmse})
                    log.info("seed %d %-12s %-28s RMSE %.4f", seed, method, task.name, rmse)
        except ConfigError:
            raise
        except FewShotError as exc:
            log.error("seed %d aborted: %s", seed, exc)
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            errors.append(exc)
            continue
        table.records.extend(seed_records)
        timing.extend(seed_timing)
    table.write_csv(out / "results.csv")
    table.write_raw_csv(out / "results_raw.csv")
    write_rows(out / "timing.csv", timing, ["seed", "method", "phase", "task", "seconds"])
    write_manifest(out, cfg, {"kind": "experiment", "splits": splits, "failures": failures,
                              "outputs": ["results.csv", "results_raw.csv", "timing.csv"]})
    if errors and not table.records:
        # nothing survived; surface the first failure so callers see its category
        raise errors[0]
    return table


def timing_summary(rows: Sequence[Mapping]) -> dict[str, dict[str, float]]:
    """Mean training seconds per run and mean test seconds per target task."""
    acc: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in rows:
        acc[(r["method"], r["phase"])].append(float(r["seconds"]))
    out: dict[str, dict[str, float]] = defaultdict(dict)
    for (method, phase), vals in acc.items():
        out[method][phase] = float(np.mean(vals))
    return dict(out)


def sweep(cfg: ExperimentConfig, axis: Literal["n_training_tasks", "test_support_size"]) -> list[dict]:
    """Mean target RMSE per (axis value, method); writes ``sweep_<axis>.csv``.

    The support-size axis trains each method once per seed (at the configured
    training support size) and evaluates every test size; the task-count axis
    retrains on the first ``k`` training tasks of each split.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    tasks = select_tasks(cfg)
    names = sorted(tasks)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    acc: dict[tuple[int, str], list[float]] = defaultdict(list)
    if axis == "test_support_size":
        values = cfg.sweep.test_support_sizes
        for seed in cfg.seeds:
            _, tr, va, tg = _split(names, seed, cfg, tasks)
            for method in cfg.methods:
                trained = train_method(method, tr, va, cfg, seed, out)
                for k in values:
                    for task in tg:
                        acc[(k, method)].append(evaluate_task(trained.forecaster, task, k, seed))
    else:
        values = cfg.sweep.training_task_counts
        if not values:
            raise ConfigError("sweep.training_task_counts is empty")
        for count in values:
            for seed in cfg.seeds:
                _, tr, va, tg = _split(names, seed, cfg, tasks)
                if count > len(tr):
                    raise ConfigError(f"{count} training tasks requested, split has {len(tr)}")
                for method in cfg.methods:
                    trained = train_method(method, tr[:count], va, cfg, seed, out)
                    for task in tg:
                        acc[(count, method)].append(
                            evaluate_task(trained.forecaster, task, cfg.test_support_size, seed)
                        )
    rows = [
        {"axis_value": v, "method": m, "mean_rmse": float(np.mean(acc[(v, m)]))}
        for v in values
        for m in cfg.methods
    ]
    write_rows(out / f"sweep_{axis}.csv", rows, ["axis_value", "method", "mean_rmse"])
    write_manifest(out, cfg, {"kind": f"sweep:{axis}", "outputs": [f"sweep_{axis}.csv"]})
    return rows


TRACE_FIELDS = ("task", "series", "t", "true", "predicted")


def run_traces(
    cfg: ExperimentConfig, method: str, task_name: str, seed: int, indices: Sequence[int] | None = None
) -> Path:
    """Trace ``method`` on a task using the seed's test support; defaults to three query series."""
    tasks = select_tasks(cfg)
    if task_name not in tasks:
        raise ConfigError(f"task {task_name!r} is not in the prepared dataset")
    _, tr, va, _ = _split(sorted(tasks), seed, cfg, tasks)
    out = Path(cfg.output_dir)
    trained = train_method(method, tr, va, cfg, seed, out)
    task = tasks[task_name]
    s_rows, q_rows = target_partition(task, cfg.test_support_size, seed)
    fitted = trained.forecaster.prepare([task.values[i] for i in s_rows])
    rows = emit_traces(fitted, task, q_rows[:3] if indices is None else indices)
    return write_rows(out / f"traces_{method}_{task_name}_seed{seed}.csv", rows, TRACE_FIELDS)


def report(output_dir: str | Path) -> str:
    """Rebuild ``results.csv`` from the raw records and render a text summary."""
    out = Path(output_dir)
    raw = out / "results_raw.csv"
    if not raw.exists():
        raise DataError(f"no results_raw.csv under {out}; run evaluate first")
    methods = None
    manifest = out / "manifest.json"
    if manifest.exists():
        methods = json.loads(manifest.read_text())["config"]["methods"]
    table = ResultTable.read_raw_csv(raw, methods)
    table.write_csv(out / "results.csv")
    parts = [f"RMSE over {len(table.tasks)} target tasks, seeds {table.seeds}", table.to_text()]
    per_seed = table.seed_means()
    if len(per_seed) > 1:
        parts.append("per-seed means")
        for seed, row in sorted(per_seed.items()):
            parts.append(f"  seed {seed}: " + "  ".join(f"{m}={row[m]:.4f}" for m in table.methods if m in row))
    timing = out / "timing.csv"
    if timing.exists():
        with open(timing, newline="") as fh:
            summary = timing_summary(list(csv.DictReader(fh)))
        if summary:
            parts.append("seconds: train (per run) / test (per target task)")
            for m in table.methods:
                s = summary.get(m, {})
                tr = f"{s['train']:.2f}" if "train" in s else "-"
                te = f"{s['test']:.4f}" if "test" in s else "-"
                parts.append(f"  {m:<12} {tr:>10} {te:>10}")
    return "\n".join(parts)


def train_methods(cfg: ExperimentConfig) -> dict[tuple[str, int], float | None]:
    """Train (or reuse) every configured method for every seed; returns train seconds."""
    tasks = select_tasks(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seconds = {}
    for seed in cfg.seeds:
        _, tr, va, _ = _split(sorted(tasks), seed, cfg, tasks)
        for method in cfg.methods:
            seconds[(method, seed)] = train_method(method, tr, va, cfg, seed, out).train_seconds
    return seconds
