"""The attention-over-support forecaster.

A bidirectional LSTM encodes every timestep of every support series; an
LSTM encodes the query prefix into ``z``; attention over all support states
gives ``a``; a three-layer ReLU network maps ``[a, z]`` to the next value.

Predictions start at ``t = 2`` (the query encoder needs one observation)
unless ``include_t1`` is set, in which case ``x_1`` is predicted from the
zero state ``z_0``.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .attention import AttentionParams, EncodedSupport, attend, attend_rows
from .autodiff import Tensor
from .errors import EmptySupportError, InsufficientHistoryError, ShapeError
from .ffn import copy_params, init_mlp, load_archive, mlp_forward, mlp_layers, save_archive
from .recurrent import LstmParams, encode_bidirectional_rows, run_lstm

ARCHIVE_KIND = "fewshot-attention"
HEAD_DROPOUT_INPUTS = (0, 1)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    support_hidden: int = Field(32, ge=1, description="hidden units of each support LSTM direction")
    query_hidden: int = Field(32, ge=1)
    attention_dim: int = Field(32, ge=1)
    value_dim: int = Field(32, ge=1)
    head_hidden: int = Field(32, ge=1)
    scale_scores: bool = False
    include_t1: bool = False


def group_by_length(series: Sequence[np.ndarray]) -> list[tuple[int, list[int]]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(series):
        groups[len(s)].append(i)
    return sorted(groups.items())


class ForecastModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        c = config
        kh = 2 * c.support_hidden
        expected = {
            "attention.q": (c.attention_dim, c.query_hidden),
            "attention.k": (c.attention_dim, kh),
            "attention.v": (c.value_dim, kh),
            "head.0.w": (c.head_hidden, c.value_dim + c.query_hidden),
            "head.2.w": (1, c.head_hidden),
        }
        for name, shape in expected.items():
            if name not in params or params[name].shape != shape:
                got = params[name].shape if name in params else None
                raise ShapeError(f"parameter {name}: expected {shape}, got {got}")

    @classmethod
    def initialize(cls, config: ModelConfig | None = None, seed: int = 0) -> ForecastModel:
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        c = config
        params: dict[str, Tensor] = {}
        params |= LstmParams.init(c.support_hidden, rng).named("support_fwd")
        params |= LstmParams.init(c.support_hidden, rng).named("support_bwd")
        params |= LstmParams.init(c.query_hidden, rng).named("query")
        params |= AttentionParams.init(
            c.query_hidden, 2 * c.support_hidden, c.attention_dim, c.value_dim, rng
        ).named("attention")
        params |= init_mlp(
            [c.value_dim + c.query_hidden, c.head_hidden, c.head_hidden, 1], rng, "head"
        )
        return cls(config, params)

    # parameter views
    @property
    def support_fwd(self) -> LstmParams:
        return LstmParams.from_named(self.params, "support_fwd")

    @property
    def support_bwd(self) -> LstmParams:
        return LstmParams.from_named(self.params, "support_bwd")

    @property
    def query_encoder(self) -> LstmParams:
        return LstmParams.from_named(self.params, "query")

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams.from_named(self.params, "attention")

    @property
    def head(self) -> list[tuple[Tensor, Tensor]]:
        return mlp_layers(self.params, "head")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> ForecastModel:
        return ForecastModel(self.config, copy_params(self.params))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=np.float64)

    # ------------------------------------------------------------ encoding

    def encode_support(self, support: Sequence[Sequence[float]]) -> EncodedSupport:
        """Encode each support series on its own and stack all timesteps."""
        if len(support) == 0:
            raise EmptySupportError("support set is empty")
        pf, pb = self.support_fwd, self.support_bwd
        rows: list[Tensor] = []
        index: list[tuple[int, int]] = []
        for n, series in enumerate(support):
            arr = np.asarray(series, dtype=np.float64).reshape(1, -1)
            if arr.shape[1] == 0:
                raise EmptySupportError(f"support series {n} is empty")
            rows.extend(encode_bidirectional_rows(pf, pb, arr))
            index.extend((n, t) for t in range(arr.shape[1]))
        return EncodedSupport(index, ad.concat(rows, axis=0))

    def _min_length(self) -> int:
        return 1 if self.config.include_t1 else 2

    def _query_rows(self, values: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Prefix representations (t-major rows) and their next-value targets."""
        n, length = values.shape
        states = run_lstm(self.query_encoder, values[:, : length - 1]) if length > 1 else []
        start = 1
        if self.config.include_t1:
            states = [Tensor(np.zeros((n, self.config.query_hidden)))] + states
            start = 0
        targets = values[:, start:].T.reshape(-1, 1)
        return ad.concat(states, axis=0), targets

    def _predict_rows(self, z: Tensor, enc: EncodedSupport, dropout: float = 0.0, rng=None) -> Tensor:
        a = attend_rows(self.attention, z, enc, scale=self.config.scale_scores)
        return mlp_forward(self.head, ad.concat([a, z], axis=1), dropout, rng, HEAD_DROPOUT_INPUTS)

    def _predict_one(self, z: Tensor, enc: EncodedSupport) -> Tensor:
        a = attend(self.attention, z, enc, scale=self.config.scale_scores)
        x = ad.concat([a, z]).reshape(1, a.shape[0] + z.shape[0])
        return mlp_forward(self.head, x).reshape(())

    # ------------------------------------------------------------ forecasting

    def forecast_next(self, prefix: Sequence[float], enc: EncodedSupport) -> Tensor:
        """Predicted next value (0-d tensor) after observing ``prefix``."""
        prefix = np.asarray(prefix, dtype=np.float64).reshape(1, -1)
        kz = self.config.query_hidden
        if prefix.shape[1] == 0:
            if not self.config.include_t1:
                raise InsufficientHistoryError("forecast_next needs at least one observation")
            z = Tensor(np.zeros(kz))
        else:
            z = run_lstm(self.query_encoder, prefix)[-1].reshape(kz)
        return self._predict_one(z, enc)

    def forecast_series(self, series: Sequence[float], enc: EncodedSupport) -> Tensor:
        """Teacher-forced predictions for ``t = 2..T`` in one encoder pass.

        Equal, bit for bit, to calling :meth:`forecast_next` on every prefix.
        """
        values = np.asarray(series, dtype=np.float64).reshape(1, -1)
        length = values.shape[1]
        if length < self._min_length():
            raise InsufficientHistoryError(f"series of length {length} yields no predictions")
        kz = self.config.query_hidden
        states = run_lstm(self.query_encoder, values[:, : length - 1]) if length > 1 else []
        zs = [h.reshape(kz) for h in states]
        if self.config.include_t1:
            zs = [Tensor(np.zeros(kz))] + zs
        preds = [self._predict_one(z, enc).reshape(1) for z in zs]
        return ad.concat(preds)

    def batch_loss(
        self,
        queries: Sequence[np.ndarray],
        enc: EncodedSupport,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Mean over queries of each query's mean squared next-step error."""
        if len(queries) == 0:
            raise ShapeError("query set is empty")
        total = None
        for length, idx in group_by_length(queries):
            if length < self._min_length():
                raise InsufficientHistoryError(f"query of length {length} yields no predictions")
            z, targets = self._query_rows(np.stack([queries[i] for i in idx]))
            pred = self._predict_rows(z, enc, dropout, rng)
            term = ad.mul(ad.mse(pred, Tensor(targets)), len(idx) / len(queries))
            total = term if total is None else ad.add(total, term)
        return total

    def predict_many(self, queries: Sequence[np.ndarray], enc: EncodedSupport) -> list[np.ndarray]:
        """Batched inference counterpart of :meth:`forecast_series`."""
        out: list[np.ndarray | None] = [None] * len(queries)
        with ad.no_grad():
            for length, idx in group_by_length(queries):
                if length < self._min_length():
                    raise InsufficientHistoryError(f"query of length {length} yields no predictions")
                z, _ = self._query_rows(np.stack([queries[i] for i in idx]))
                pred = self._predict_rows(z, enc).data.reshape(-1, len(idx))
                for j, i in enumerate(idx):
                    out[i] = pred[:, j].copy()
        return out

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {"kind": ARCHIVE_KIND, "config": self.config.model_dump()}
        if extra:
            meta["extra"] = extra
        return save_archive(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> ForecastModel:
        params, meta = load_archive(path)
        if meta.get("kind") != ARCHIVE_KIND:
            raise ValueError(f"{path} holds a {meta.get('kind')!r} archive, not {ARCHIVE_KIND!r}")
        return cls(ModelConfig(**meta["config"]), params)
