"""Comparison methods: persistence (Pre) and {MAML, DI, DS} x {LSTM, NN, Linear}.

Every method is exposed as a forecaster: ``prepare(support)`` returns a
forecaster ready for the target task (a no-op for Pre and DI, a fit for DS,
an inner finetune for MAML) whose ``predict_series`` yields predictions for
``t = 2..T``.

MAML is first-order: the query-loss gradient at the adapted parameters is
applied to the initial parameters. The inner optimizer is Adam, fresh per
episode and persistent across its inner epochs.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import EncodedSupport
from .data import SeriesSet
from .errors import ConfigError, InsufficientHistoryError, NonFiniteLossError, ShapeError
from .ffn import copy_params, init_mlp, load_archive, mlp_forward, mlp_layers, save_archive
from .model import ForecastModel, group_by_length
from .recurrent import LstmParams, run_lstm
from .trainer import Episode, TrainConfig, run_episodic

BASE_KINDS = ("lstm", "nn", "linear")
FRAMEWORKS = ("maml", "di", "ds")
ARCHIVE_PREFIX = "baseline-"

_DS_STREAM = 3
_VAL_INNER_STREAM = 4


class Forecaster(Protocol):
    name: str

    def prepare(self, support: Sequence[np.ndarray]) -> Forecaster: ...

    def predict_series(self, series: Sequence[float]) -> np.ndarray: ...

    def predict_many(self, series: Sequence[np.ndarray]) -> list[np.ndarray]: ...


# ------------------------------------------------------------------- Pre


def pre_predict(series: Sequence[float]) -> np.ndarray:
    """Persistence: the prediction for ``x_t`` is ``x_{t-1}``."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 1 or len(arr) < 2:
        raise InsufficientHistoryError("persistence needs a series of length >= 2")
    return arr[:-1].copy()


class PreForecaster:
    name = "pre"

    def prepare(self, support):
        return self

    def predict_series(self, series):
        return pre_predict(series)

    def predict_many(self, series):
        return [pre_predict(s) for s in series]


# ------------------------------------------------------------ base models


class BaseNet:
    """LSTM, NN or Linear next-value model over a scalar history.

    LSTM: 32-unit LSTM whose hidden state feeds a three-layer ReLU head.
    NN: three-layer ReLU network on the previous value only.
    Linear: ``w * x_{t-1} + b``.
    """

    def __init__(self, kind: str, params: dict[str, Tensor], hidden: int = 32):
        if kind not in BASE_KINDS:
            raise ConfigError(f"unknown base model {kind!r}; choose from {BASE_KINDS}")
        self.kind = kind
        self.params = params
        self.hidden = hidden

    @classmethod
    def initialize(cls, kind: str, seed: int = 0, hidden: int = 32) -> BaseNet:
        rng = np.random.default_rng(seed)
        if kind == "lstm":
            params = LstmParams.init(hidden, rng).named("lstm")
            params |= init_mlp([hidden, hidden, hidden, 1], rng, "head")
        elif kind == "nn":
            params = init_mlp([1, hidden, hidden, 1], rng, "head")
        elif kind == "linear":
            params = init_mlp([1, 1], rng, "head")
        else:
            raise ConfigError(f"unknown base model {kind!r}; choose from {BASE_KINDS}")
        return cls(kind, params, hidden)

    @property
    def dropout_inputs(self) -> tuple[int, ...]:
        # only learned representations are dropped, never the raw lagged value
        return {"lstm": (0, 1), "nn": (1,), "linear": ()}[self.kind]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> BaseNet:
        return BaseNet(self.kind, copy_params(self.params), self.hidden)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=np.float64)

    def _rows(self, values: np.ndarray) -> tuple[Tensor, np.ndarray]:
        length = values.shape[1]
        targets = values[:, 1:].T.reshape(-1, 1)
        if self.kind == "lstm":
            states = run_lstm(LstmParams.from_named(self.params, "lstm"), values[:, : length - 1])
            return ad.concat(states, axis=0), targets
        return Tensor(values[:, : length - 1].T.reshape(-1, 1)), targets

    def _forward(self, x: Tensor, dropout: float = 0.0, rng=None) -> Tensor:
        return mlp_forward(mlp_layers(self.params, "head"), x, dropout, rng, self.dropout_inputs)

    def loss(self, series: Sequence[np.ndarray], dropout: float = 0.0, rng=None) -> Tensor:
        """Mean over series of each series' mean squared next-step error."""
        if len(series) == 0:
            raise ShapeError("no series to fit")
        total = None
        for length, idx in group_by_length(series):
            if length < 2:
                raise InsufficientHistoryError("series of length < 2 yield no predictions")
            x, targets = self._rows(np.stack([series[i] for i in idx]))
            term = ad.mul(ad.mse(self._forward(x, dropout, rng), Tensor(targets)), len(idx) / len(series))
            total = term if total is None else ad.add(total, term)
        return total

    def predict_many(self, series: Sequence[np.ndarray]) -> list[np.ndarray]:
        out: list[np.ndarray | None] = [None] * len(series)
        with ad.no_grad():
            for length, idx in group_by_length(series):
                if length < 2:
                    raise InsufficientHistoryError("series of length < 2 yield no predictions")
                x, _ = self._rows(np.stack([series[i] for i in idx]))
                pred = self._forward(x).data.reshape(-1, len(idx))
                for j, i in enumerate(idx):
                    out[i] = pred[:, j].copy()
        return out

    def predict_series(self, series: Sequence[float]) -> np.ndarray:
        return self.predict_many([np.asarray(series, dtype=np.float64)])[0]

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {"kind": ARCHIVE_PREFIX + self.kind, "hidden": self.hidden}
        if extra:
            meta["extra"] = extra
        return save_archive(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> BaseNet:
        params, meta = load_archive(path)
        kind = str(meta.get("kind", ""))
        if not kind.startswith(ARCHIVE_PREFIX):
            raise ValueError(f"{path} is not a baseline archive (kind {kind!r})")
        return cls(kind[len(ARCHIVE_PREFIX) :], params, meta["hidden"])


def _step_on(net: BaseNet, series, cfg: TrainConfig, opt: ad.Adam, rng, what: str) -> float:
    ad.zero_grad(net.params)
    loss = net.loss(series, cfg.dropout, rng)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{what}: non-finite loss")
    ad.backward(loss)
    ad.clip_grad_norm(net.params, cfg.clip)
    opt.step()
    return value


# -------------------------------------------------------------------- DI


def train_di(
    kind: str, train_tasks: Sequence[SeriesSet], val_tasks: Sequence[SeriesSet], cfg: TrainConfig
) -> tuple[BaseNet, list[dict]]:
    """Domain-independent model: one Adam step per sampled query set, pooled over tasks."""
    net = BaseNet.initialize(kind, seed=cfg.seed)

    def step(ep: Episode, rng):
        ad.zero_grad(net.params)
        loss = net.loss(ep.query, cfg.dropout, rng)
        ad.backward(loss)
        return loss.item(), {k: p.grad for k, p in net.params.items()}

    def validate(episodes):
        with ad.no_grad():
            return float(np.mean([net.loss(ep.query).item() for ep in episodes]))

    best, history = run_episodic(net.params, train_tasks, val_tasks, cfg, step, validate, f"di-{kind}")
    net.load_state(best)
    return net, history


# -------------------------------------------------------------------- DS


def fit_linear_lstsq(support: Sequence[np.ndarray]) -> tuple[float, float]:
    """Least-squares ``(slope, intercept)`` of ``x_t`` on ``x_{t-1}`` pooled over the support."""
    prev = np.concatenate([np.asarray(s, dtype=np.float64)[:-1] for s in support])
    nxt = np.concatenate([np.asarray(s, dtype=np.float64)[1:] for s in support])
    if prev.size == 0:
        raise InsufficientHistoryError("support has no next-step pairs")
    design = np.column_stack([prev, np.ones_like(prev)])
    (slope, intercept), *_ = np.linalg.lstsq(design, nxt, rcond=None)
    return float(slope), float(intercept)


def train_ds(kind: str, support: Sequence[np.ndarray], cfg: TrainConfig, seed: int | None = None) -> BaseNet:
    """Fit from a fresh initialization on the support series only."""
    if len(support) == 0:
        raise ShapeError("domain-specific fit needs a non-empty support set")
    seed = cfg.seed if seed is None else seed
    net = BaseNet.initialize(kind, seed=seed)
    if kind == "linear" and cfg.ds_linear_solver == "lstsq":
        slope, intercept = fit_linear_lstsq(support)
        net.params["head.0.w"].data = np.array([[slope]])
        net.params["head.0.b"].data = np.array([intercept])
        return net
    rng = np.random.default_rng([seed, _DS_STREAM])
    opt = ad.Adam(net.params, lr=cfg.lr)
    for _ in range(cfg.ds_epochs):
        _step_on(net, support, cfg, opt, rng, f"ds-{kind}")
    return net


# ------------------------------------------------------------------ MAML


def finetune(net: BaseNet, support: Sequence[np.ndarray], cfg: TrainConfig, rng) -> tuple[BaseNet, int]:
    """Inner loop: Adam on the support loss for ``inner_epochs`` epochs.

    Returns the adapted copy and the number of optimizer steps taken.
    """
    adapted = net.clone()
    opt = ad.Adam(adapted.params, lr=cfg.inner_lr)
    batch = cfg.inner_batch_size or len(support)
    steps = 0
    for _ in range(cfg.inner_epochs):
        order = rng.permutation(len(support)) if batch < len(support) else np.arange(len(support))
        for start in range(0, len(support), batch):
            chunk = [support[i] for i in order[start : start + batch]]
            _step_on(adapted, chunk, cfg, opt, rng, f"maml-{net.kind} inner loop")
            steps += 1
    return adapted, steps


def maml_adapt(net: BaseNet, support: Sequence[np.ndarray], cfg: TrainConfig, rng) -> BaseNet:
    return finetune(net, support, cfg, rng)[0]


def train_maml(
    kind: str, train_tasks: Sequence[SeriesSet], val_tasks: Sequence[SeriesSet], cfg: TrainConfig
) -> tuple[BaseNet, list[dict]]:
    """First-order MAML over initial parameters."""
    net = BaseNet.initialize(kind, seed=cfg.seed)

    def step(ep: Episode, rng):
        # a spawned child leaves the episode stream untouched, so with a zero
        # inner rate the query pass consumes exactly what DI's would
        adapted, _ = finetune(net, ep.support, cfg, rng.spawn(1)[0])
        ad.zero_grad(adapted.params)
        loss = adapted.loss(ep.query, cfg.dropout, rng)
        ad.backward(loss)
        return loss.item(), {k: p.grad for k, p in adapted.params.items()}

    def validate(episodes):
        losses = []
        for i, ep in enumerate(episodes):
            adapted = maml_adapt(net, ep.support, cfg, np.random.default_rng([cfg.seed, _VAL_INNER_STREAM, i]))
            with ad.no_grad():
                losses.append(adapted.loss(ep.query).item())
        return float(np.mean(losses))

    best, history = run_episodic(net.params, train_tasks, val_tasks, cfg, step, validate, f"maml-{kind}")
    net.load_state(best)
    return net, history


# ------------------------------------------------------------ forecasters


class NetForecaster:
    """A fitted base model; ``prepare`` is a no-op (DI, or after DS / MAML)."""

    def __init__(self, net: BaseNet, name: str):
        self.net = net
        self.name = name

    def prepare(self, support):
        return self

    def predict_series(self, series):
        return self.net.predict_series(series)

    def predict_many(self, series):
        return self.net.predict_many(series)


class DSForecaster:
    def __init__(self, kind: str, cfg: TrainConfig, seed: int = 0):
        self.kind = kind
        self.cfg = cfg
        self.seed = seed
        self.name = f"ds-{kind}"

    def prepare(self, support):
        return NetForecaster(train_ds(self.kind, list(support), self.cfg, self.seed), self.name)

    def predict_series(self, series):
        raise RuntimeError("call prepare(support) first")

    predict_many = predict_series


class MAMLForecaster:
    def __init__(self, net: BaseNet, cfg: TrainConfig, seed: int = 0):
        self.net = net
        self.cfg = cfg
        self.seed = seed
        self.name = f"maml-{net.kind}"

    def prepare(self, support):
        rng = np.random.default_rng([self.seed, _DS_STREAM])
        return NetForecaster(maml_adapt(self.net, list(support), self.cfg, rng), self.name)

    def predict_series(self, series):
        raise RuntimeError("call prepare(support) first")

    predict_many = predict_series


class OursForecaster:
    name = "ours"

    def __init__(self, model: ForecastModel, enc: EncodedSupport | None = None):
        self.model = model
        self.enc = enc

    def prepare(self, support):
        with ad.no_grad():
            return OursForecaster(self.model, self.model.encode_support(list(support)))

    def _enc(self) -> EncodedSupport:
        if self.enc is None:
            raise RuntimeError("call prepare(support) first")
        return self.enc

    def predict_series(self, series):
        with ad.no_grad():
            return self.model.forecast_series(series, self._enc()).data.copy()

    def predict_many(self, series):
        return self.model.predict_many(series, self._enc())
