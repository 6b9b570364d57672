"""UCR archive ingestion and task preparation.

A UCR task ships as ``<root>/<Name>/<Name>_TRAIN.tsv`` and ``_TEST.tsv``:
one series per row, first column the class label, ``NaN`` for missing
values. For forecasting the label is dropped and both files are pooled.

Preparation keeps tasks with no missing values, every series at least 100
long and at least 50 series; then truncates to the first 100 values,
subsamples 50 series (seeded) and normalizes with the pooled mean and
standard deviation of the task's own 50 x 100 values.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateTaskError, IngestionError

log = logging.getLogger(__name__)

SERIES_PER_TASK = 50
SERIES_LENGTH = 100
SPLIT_RATIOS = (55, 10, 25)
NORMALIZATION_TOL = 1e-9


@dataclass
class RawTask:
    name: str
    series: list[np.ndarray]
    provenance: list[str] = field(default_factory=list)

    def has_missing(self) -> bool:
        return any(np.isnan(s).any() for s in self.series)

    def min_length(self) -> int:
        return min((len(s) for s in self.series), default=0)


@dataclass
class SeriesSet:
    """A prepared task: equal-length normalized series, one per row."""

    name: str
    values: np.ndarray
    mean: float = 0.0
    std: float = 1.0
    source_rows: list[int] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"task {self.name}: values must be [series x time], got {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def series(self) -> list[np.ndarray]:
        return list(self.values)

    def validate(
        self, n_series: int = SERIES_PER_TASK, length: int = SERIES_LENGTH, tol: float = NORMALIZATION_TOL
    ) -> None:
        if self.values.shape != (n_series, length):
            raise DataError(f"task {self.name}: shape {self.values.shape}, expected {(n_series, length)}")
        m, v = float(self.values.mean()), float(self.values.var())
        if abs(m) > tol or abs(v - 1.0) > tol:
            raise DataError(f"task {self.name}: pooled mean {m:.3g} / variance {v:.12g} not 0 / 1")


@dataclass
class Split:
    training: list[str]
    validation: list[str]
    target: list[str]
    seed: int

    def as_dict(self) -> dict:
        return {"training": self.training, "validation": self.validation, "target": self.target, "seed": self.seed}


# ------------------------------------------------------------------ loading


def _parse_line(line: str) -> list[str]:
    if "\t" in line:
        return line.split("\t")
    if "," in line:
        return line.split(",")
    return line.split()


def load_task(path: str | Path, name: str | None = None) -> RawTask:
    """Parse one UCR-format file; the first column (class label) is dropped."""
    path = Path(path)
    series = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = _parse_line(line)
            try:
                values = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: unparsable value ({exc})") from exc
            if np.isinf(values).any():
                raise IngestionError(f"{path}:{lineno}: infinite value")
            series.append(values)
    if not series:
        raise IngestionError(f"{path}: no series found")
    return RawTask(name or path.stem, series, [str(path)])


def load_ucr_task(root: str | Path, name: str) -> RawTask:
    """Pool ``<name>_TRAIN.tsv`` and ``<name>_TEST.tsv`` (whichever exist)."""
    folder = Path(root) / name
    parts = [folder / f"{name}_{part}.tsv" for part in ("TRAIN", "TEST")]
    parts = [p for p in parts if p.exists()]
    if not parts:
        raise IngestionError(f"no {name}_TRAIN.tsv / {name}_TEST.tsv under {folder}")
    series, provenance = [], []
    for p in parts:
        raw = load_task(p)
        series.extend(raw.series)
        provenance.extend(raw.provenance)
    return RawTask(name, series, provenance)


def list_ucr_tasks(root: str | Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"archive root {root} is not a directory")
    return sorted(
        d.name for d in root.iterdir()
        if d.is_dir() and any((d / f"{d.name}_{p}.tsv").exists() for p in ("TRAIN", "TEST"))
    )


def load_archive(root: str | Path, names: Iterable[str] | None = None) -> list[RawTask]:
    names = list_ucr_tasks(root) if names is None else sorted(names)
    return [load_ucr_task(root, n) for n in names]


# ------------------------------------------------------------ preprocessing


def filter_tasks(
    raw: Iterable[RawTask], min_length: int = SERIES_LENGTH, min_series: int = SERIES_PER_TASK
) -> list[RawTask]:
    kept = []
    for task in raw:
        if task.has_missing():
            log.info("dropping %s: missing values", task.name)
        elif task.min_length() < min_length:
            log.info("dropping %s: series shorter than %d", task.name, min_length)
        elif len(task.series) < min_series:
            log.info("dropping %s: %d series < %d", task.name, len(task.series), min_series)
        else:
            kept.append(task)
    return kept


def task_seed(name: str, seed: int) -> list[int]:
    """Per-(task, seed) generator seed, independent of task order."""
    return [seed, zlib.crc32(name.encode())]


def normalize(name: str, values: np.ndarray) -> tuple[np.ndarray, float, float]:
    mu = float(values.mean())
    sd = float(values.std())
    if not sd > 0.0:
        raise DegenerateTaskError(f"task {name} has zero variance; cannot normalize")
    return (values - mu) / sd, mu, sd


def prepare_task(
    raw: RawTask, seed: int = 0, n_series: int = SERIES_PER_TASK, length: int = SERIES_LENGTH
) -> SeriesSet:
    if len(raw.series) < n_series:
        raise DataError(f"task {raw.name}: {len(raw.series)} series < {n_series}")
    if raw.min_length() < length:
        raise DataError(f"task {raw.name}: a series is shorter than {length}")
    if raw.has_missing():
        raise DataError(f"task {raw.name} contains missing values")
    rng = np.random.default_rng(task_seed(raw.name, seed))
    rows = np.sort(rng.choice(len(raw.series), size=n_series, replace=False))
    values = np.stack([raw.series[i][:length] for i in rows])
    values, mu, sd = normalize(raw.name, values)
    task = SeriesSet(raw.name, values, mu, sd, [int(r) for r in rows])
    task.validate(n_series, length)
    return task


def proportional_sizes(n: int, ratios: Sequence[int] = SPLIT_RATIOS) -> tuple[int, ...]:
    """Split ``n`` items in proportion to ``ratios`` by largest remainder.

    Ties in the remainder go to the later group; every group gets at least
    one item. 90 tasks give 55/10/25, 15 give 9/2/4, 9 give 5/1/3.
    """
    if n < len(ratios):
        raise ConfigError(f"cannot split {n} tasks into {len(ratios)} non-empty groups")
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), -i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        while sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return tuple(sizes)


def split_tasks(names: Sequence[str], seed: int, sizes: Sequence[int] | None = SPLIT_RATIOS) -> Split:
    """Seeded shuffle of the task names, then a train/validation/target cut.

    ``sizes`` are absolute counts that must add up to ``len(names)``; pass
    ``None`` to derive them proportionally from the 55/10/25 ratios.
    """
    names = sorted(names)
    if len(set(names)) != len(names):
        raise DataError("duplicate task names")
    if sizes is None:
        sizes = proportional_sizes(len(names))
    if len(sizes) != 3 or sum(sizes) != len(names):
        raise ConfigError(f"split sizes {tuple(sizes)} do not add up to {len(names)} tasks")
    perm = np.random.default_rng(seed).permutation(len(names))
    shuffled = [names[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(shuffled[:a], shuffled[a:b], shuffled[b:], seed)


# ------------------------------------------------------- prepared datasets

MANIFEST_NAME = "manifest.json"


def write_prepared(out_dir: str | Path, tasks: Sequence[SeriesSet], info: dict | None = None) -> Path:
    """One CSV per task (rows = series) plus a JSON manifest."""
    out = Path(out_dir)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    records = []
    for task in sorted(tasks, key=lambda t: t.name):
        np.savetxt(out / "tasks" / f"{task.name}.csv", task.values, delimiter=",", fmt="%.17g")
        records.append({
            "name": task.name,
            "shape": list(task.values.shape),
            "mean": task.mean,
            "std": task.std,
            "source_rows": task.source_rows,
        })
    manifest = dict(info or {})
    manifest["tasks"] = records
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_prepared(prepared_dir: str | Path, names: Iterable[str] | None = None) -> dict[str, SeriesSet]:
    root = Path(prepared_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no prepared dataset at {root} (missing {MANIFEST_NAME})")
    manifest = json.loads(manifest_path.read_text())
    wanted = None if names is None else set(names)
    tasks = {}
    for rec in manifest["tasks"]:
        if wanted is not None and rec["name"] not in wanted:
            continue
        values = np.loadtxt(root / "tasks" / f"{rec['name']}.csv", delimiter=",", ndmin=2)
        tasks[rec["name"]] = SeriesSet(rec["name"], values, rec["mean"], rec["std"], rec.get("source_rows"))
    if wanted is not None and wanted - tasks.keys():
        raise DataError(f"tasks not in prepared dataset: {sorted(wanted - tasks.keys())}")
    return tasks


def file_checksums(paths: Iterable[str | Path]) -> dict[str, str]:
    """SHA-256 of each source file, keyed by path."""
    out = {}
    for p in sorted(str(p) for p in paths):
        out[p] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
    return out


def prepare_archive(
    root: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    names: Iterable[str] | None = None,
    n_series: int = SERIES_PER_TASK,
    length: int = SERIES_LENGTH,
) -> list[SeriesSet]:
    raw = load_archive(root, names)
    kept = filter_tasks(raw, min_length=length, min_series=n_series)
    if not kept:
        raise DataError(f"no task under {root} has {n_series} complete series of length >= {length}")
    tasks = [prepare_task(r, seed, n_series, length) for r in kept]
    info = {
        "source": str(root),
        "seed": seed,
        "n_series": n_series,
        "length": length,
        "n_raw_tasks": len(raw),
        "dropped": sorted({r.name for r in raw} - {r.name for r in kept}),
        "checksums": file_checksums(p for r in kept for p in r.provenance),
    }
    if len(tasks) >= 3:
        info["split"] = split_tasks([t.name for t in tasks], seed, None).as_dict()
    write_prepared(out_dir, tasks, info)
    return tasks
