"""Episodic meta-training with validation early stopping.

One epoch is ``episodes_per_epoch`` iterations (default: the number of
training tasks). Each iteration samples a task uniformly, samples a
support set and a disjoint query set from it, and takes one Adam step on
the query loss. After every epoch the mean loss over a fixed set of
validation episodes (one per validation task) decides early stopping.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import autodiff as ad
from .autodiff import Tensor
from .data import SeriesSet
from .errors import ConfigError, NonFiniteLossError, TaskTooSmallError
from .model import ForecastModel, ModelConfig

log = logging.getLogger(__name__)

# generator stream tags, combined with the seed
_TRAIN_STREAM = 1
_VAL_STREAM = 2

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "wall_clock_s")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    support_size: int = Field(3, ge=1)
    query_size: int = Field(47, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    max_epochs: int = Field(500, ge=1)
    patience: int = Field(20, ge=0)
    episodes_per_epoch: int | None = Field(None, ge=1)
    clip: float = Field(5.0, ge=0.0, description="global gradient-norm clip; 0 disables")
    seed: int = 0
    # MAML inner loop
    inner_lr: float = Field(1e-3, ge=0.0)
    inner_epochs: int = Field(5, ge=0)
    inner_batch_size: int | None = Field(None, ge=1)
    # domain-specific fitting on the support set
    ds_epochs: int = Field(500, ge=1)
    ds_linear_solver: Literal["lstsq", "adam"] = "lstsq"

    @model_validator(mode="after")
    def _patience_within_budget(self):
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        return self


@dataclass
class Episode:
    task: str
    support: list[np.ndarray]
    query: list[np.ndarray]
    support_rows: list[int]
    query_rows: list[int]


def sample_episode(task: SeriesSet, n_support: int, n_query: int, rng: np.random.Generator) -> Episode:
    """Uniform support draw, then queries from the remaining series."""
    n = len(task)
    if n < n_support + n_query:
        raise TaskTooSmallError(f"task {task.name} has {n} series, episode needs {n_support + n_query}")
    perm = rng.permutation(n)
    s_rows = [int(i) for i in perm[:n_support]]
    q_rows = [int(i) for i in perm[n_support : n_support + n_query]]
    return Episode(task.name, [task.values[i] for i in s_rows], [task.values[i] for i in q_rows], s_rows, q_rows)


def episode_loss(
    model: ForecastModel, ep: Episode, dropout: float = 0.0, rng: np.random.Generator | None = None
) -> Tensor:
    enc = model.encode_support(ep.support)
    return model.batch_loss(ep.query, enc, dropout, rng)


def validation_episodes(tasks: Sequence[SeriesSet], cfg: TrainConfig) -> list[Episode]:
    """One fixed episode per validation task; queries shrink to fit small tasks."""
    rng = np.random.default_rng([cfg.seed, _VAL_STREAM])
    episodes = []
    for task in tasks:
        n_query = min(cfg.query_size, len(task) - cfg.support_size)
        if n_query < 1:
            raise TaskTooSmallError(f"validation task {task.name} is too small for support {cfg.support_size}")
        episodes.append(sample_episode(task, cfg.support_size, n_query, rng))
    return episodes


StepFn = Callable[[Episode, np.random.Generator], tuple[float, Mapping[str, np.ndarray | None]]]
ValidateFn = Callable[[Sequence[Episode]], float]


def run_episodic(
    params: Mapping[str, Tensor],
    train_tasks: Sequence[SeriesSet],
    val_tasks: Sequence[SeriesSet],
    cfg: TrainConfig,
    step: StepFn,
    validate: ValidateFn,
    label: str = "train",
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Generic epoch / early-stopping loop shared by every episodic learner.

    ``step`` computes the loss of one episode and returns it with the
    gradients to apply to ``params``. Returns the best parameter snapshot and
    the per-epoch history.
    """
    if not train_tasks or not val_tasks:
        raise ConfigError("training needs at least one training and one validation task")
    for task in train_tasks:
        if len(task) < cfg.support_size + cfg.query_size:
            raise TaskTooSmallError(
                f"training task {task.name} has {len(task)} series < {cfg.support_size}+{cfg.query_size}"
            )
    val_eps = validation_episodes(val_tasks, cfg)
    per_epoch = cfg.episodes_per_epoch or len(train_tasks)
    master = np.random.default_rng([cfg.seed, _TRAIN_STREAM])
    opt = ad.Adam(params, lr=cfg.lr)
    best_val = math.inf
    best_state = {k: p.data.copy() for k, p in params.items()}
    since_best = 0
    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for _ in range(per_epoch):
            ep_seed = int(master.integers(2**63 - 1))
            rng = np.random.default_rng(ep_seed)
            task = train_tasks[int(rng.integers(len(train_tasks)))]
            ep = sample_episode(task, cfg.support_size, cfg.query_size, rng)
            loss, grads = step(ep, rng)
            if not math.isfinite(loss):
                raise NonFiniteLossError(
                    f"{label}: non-finite loss at epoch {epoch}, task {ep.task}, episode seed {ep_seed}"
                )
            grads, _ = ad.clip_gradients(grads, cfg.clip)
            opt.step(grads)
            losses.append(loss)
        val = validate(val_eps)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"{label}: non-finite validation loss at epoch {epoch}")
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val,
            "wall_clock_s": time.perf_counter() - start,
        })
        if val < best_val:
            best_val = val
            best_state = {k: p.data.copy() for k, p in params.items()}
            since_best = 0
        else:
            since_best += 1
        log.debug("%s epoch %d train %.5f val %.5f", label, epoch, history[-1]["train_loss"], val)
        if since_best >= cfg.patience:
            break
    log.info("%s: %d epochs, best val %.5f", label, len(history), best_val)
    return best_state, history


def write_history(path: str | Path, history: Sequence[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
    return path


def train(
    train_tasks: Sequence[SeriesSet],
    val_tasks: Sequence[SeriesSet],
    cfg: TrainConfig,
    model_config: ModelConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[ForecastModel, list[dict]]:
    """Meta-train the attention model; returns the best-validation model.

    With ``out_dir`` the best and last checkpoints and ``history.csv`` are
    written there.
    """
    model = ForecastModel.initialize(model_config, seed=cfg.seed)

    def step(ep: Episode, rng: np.random.Generator):
        ad.zero_grad(model.params)
        loss = episode_loss(model, ep, cfg.dropout, rng)
        ad.backward(loss)
        return loss.item(), {k: p.grad for k, p in model.params.items()}

    def validate(episodes: Sequence[Episode]) -> float:
        with ad.no_grad():
            return float(np.mean([episode_loss(model, ep).item() for ep in episodes]))

    best, history = run_episodic(model.params, train_tasks, val_tasks, cfg, step, validate, "ours")
    last = model.clone()
    model.load_state(best)
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out / "best.npz")
        last.save(out / "last.npz")
        write_history(out / "history.csv", history)
    return model, history
