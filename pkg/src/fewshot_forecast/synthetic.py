"""Synthetic task families for tests and offline demos.

Each task is one dynamics family with task-specific parameters; series
within a task share the dynamics but differ in noise and phase.

The AR(1) family uses an oscillating coefficient in [-0.9, -0.5]: a
normalized AR(1) series has irreducible next-step variance ``1 - phi**2``,
so small coefficients leave nothing to learn, and a negative one keeps
persistence clearly suboptimal.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SeriesSet, normalize

FAMILIES = ("ar1", "sine")


def ar1_series(phi: float, noise: float, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    x = np.empty((n, length))
    x[:, 0] = rng.normal(0.0, noise / np.sqrt(max(1.0 - phi * phi, 1e-3)), n)
    for t in range(1, length):
        x[:, t] = phi * x[:, t - 1] + rng.normal(0.0, noise, n)
    return x


def sine_series(period: float, noise: float, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(length)
    phase = rng.uniform(0.0, 2 * np.pi, (n, 1))
    amp = rng.uniform(0.8, 1.2, (n, 1))
    return amp * np.sin(2 * np.pi * t / period + phase) + rng.normal(0.0, noise, (n, length))


def make_task(
    name: str, family: str, rng: np.random.Generator, n_series: int = 50, length: int = 100
) -> SeriesSet:
    if family == "ar1":
        values = ar1_series(rng.uniform(-0.9, -0.5), 1.0, n_series, length, rng)
    elif family == "sine":
        values = sine_series(rng.uniform(8.0, 30.0), rng.uniform(0.05, 0.3), n_series, length, rng)
    else:
        raise ValueError(f"unknown family {family!r}")
    values, mu, sd = normalize(name, values)
    return SeriesSet(name, values, mu, sd)


def make_corpus(
    n_tasks: int, seed: int = 0, n_series: int = 50, length: int = 100, prefix: str = "synth"
) -> list[SeriesSet]:
    """Tasks alternate between the AR(1) and sinusoid families."""
    rng = np.random.default_rng(seed)
    return [
        make_task(f"{prefix}{i:03d}", FAMILIES[i % len(FAMILIES)], rng, n_series, length)
        for i in range(n_tasks)
    ]


def write_ucr_archive(root: str | Path, tasks: list[SeriesSet], test_fraction: float = 0.5) -> Path:
    """Write tasks in UCR layout (label column 0, TRAIN/TEST halves)."""
    root = Path(root)
    for task in tasks:
        folder = root / task.name
        folder.mkdir(parents=True, exist_ok=True)
        n_train = int(round(len(task) * (1.0 - test_fraction)))
        for part, rows in (("TRAIN", task.values[:n_train]), ("TEST", task.values[n_train:])):
            labelled = np.column_stack([np.ones(len(rows)), rows])
            np.savetxt(folder / f"{task.name}_{part}.tsv", labelled, delimiter="\t", fmt="%.17g")
    return root
