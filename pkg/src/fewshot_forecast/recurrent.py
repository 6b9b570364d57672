"""LSTM cell and the forward / bidirectional sequence encoders.

Gate order inside the stacked ``4H`` weight rows is fixed as
(input, forget, cell, output) so serialized parameters are portable.
Inputs are univariate: one scalar per timestep, input size 1.

Internally states are row matrices ``[B x H]`` so several equal-length
series can be unrolled together; the single-series functions use ``B = 1``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InsufficientHistoryError, ShapeError

GATE_ORDER = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    w_ih: Tensor  # [4H x I]
    w_hh: Tensor  # [4H x H]
    b: Tensor  # [4H]

    def __post_init__(self):
        four_h, h = self.w_hh.shape
        if four_h != 4 * h or self.w_ih.shape[0] != four_h or self.b.shape != (four_h,):
            raise ShapeError(
                f"inconsistent LSTM shapes w_ih={self.w_ih.shape} "
                f"w_hh={self.w_hh.shape} b={self.b.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(
        cls,
        hidden_size: int,
        rng: np.random.Generator,
        input_size: int = 1,
        forget_bias: float = 1.0,
    ) -> LstmParams:
        bound = 1.0 / np.sqrt(hidden_size)
        w_ih = rng.uniform(-bound, bound, (4 * hidden_size, input_size))
        w_hh = rng.uniform(-bound, bound, (4 * hidden_size, hidden_size))
        b = np.zeros(4 * hidden_size)
        b[hidden_size : 2 * hidden_size] = forget_bias
        return cls(
            Tensor(w_ih, requires_grad=True),
            Tensor(w_hh, requires_grad=True),
            Tensor(b, requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_ih": self.w_ih, f"{prefix}.w_hh": self.w_hh, f"{prefix}.b": self.b}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str) -> LstmParams:
        return cls(params[f"{prefix}.w_ih"], params[f"{prefix}.w_hh"], params[f"{prefix}.b"])


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def zero_state(hidden_size: int, batch: int | None = None) -> LstmState:
    shape = (hidden_size,) if batch is None else (batch, hidden_size)
    return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def _cell(h: Tensor, c: Tensor, x: Tensor, w_ih_t: Tensor, w_hh_t: Tensor, b: Tensor, hs: int):
    gates = ad.add_bias(ad.add(ad.matmul(x, w_ih_t), ad.matmul(h, w_hh_t)), b)
    i = ad.sigmoid(gates[:, 0:hs])
    f = ad.sigmoid(gates[:, hs : 2 * hs])
    g = ad.tanh(gates[:, 2 * hs : 3 * hs])
    o = ad.sigmoid(gates[:, 3 * hs : 4 * hs])
    c_next = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_next = ad.mul(o, ad.tanh(c_next))
    return h_next, c_next


def lstm_step(p: LstmParams, s: LstmState, x) -> LstmState:
    """One LSTM update for a single series (``h``, ``c`` of shape ``[H]``).

    Batched states ``[B x H]`` with ``x`` of shape ``[B x 1]`` are accepted too.
    """
    hs = p.hidden_size
    batched = s.h.ndim == 2
    if s.h.shape != s.c.shape or s.h.shape[-1] != hs:
        raise ShapeError(f"state shapes h={s.h.shape} c={s.c.shape} do not match H={hs}")
    h = s.h if batched else s.h.reshape(1, hs)
    c = s.c if batched else s.c.reshape(1, hs)
    x = x if isinstance(x, Tensor) else Tensor(x)
    x = x.reshape(h.shape[0], p.input_size)
    h2, c2 = _cell(h, c, x, p.w_ih.T, p.w_hh.T, p.b, hs)
    if batched:
        return LstmState(h2, c2)
    return LstmState(h2.reshape(hs), c2.reshape(hs))


def run_lstm(p: LstmParams, values: np.ndarray, reverse: bool = False) -> list[Tensor]:
    """Unroll over ``values`` of shape ``[B x T]`` from the zero state.

    Returns ``T`` hidden states of shape ``[B x H]`` indexed by timestep; with
    ``reverse=True`` the recursion runs from the last timestep backwards and
    position ``t`` holds the state after consuming ``x_t .. x_T``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"run_lstm expects [B x T] values, got {values.shape}")
    n, length = values.shape
    if length == 0:
        raise InsufficientHistoryError("cannot encode an empty series")
    hs = p.hidden_size
    w_ih_t, w_hh_t = p.w_ih.T, p.w_hh.T
    h = Tensor(np.zeros((n, hs)))
    c = Tensor(np.zeros((n, hs)))
    out: list[Tensor | None] = [None] * length
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        x = Tensor(values[:, t : t + 1])
        h, c = _cell(h, c, x, w_ih_t, w_hh_t, p.b, hs)
        out[t] = h
    return out


def _as_row(series: Sequence[float]) -> np.ndarray:
    arr = np.asarray(series, dtype=np.float64).reshape(1, -1)
    if arr.shape[1] == 0:
        raise InsufficientHistoryError("cannot encode an empty series")
    return arr


def encode_forward(p: LstmParams, series: Sequence[float]) -> list[Tensor]:
    """Hidden states ``h_1 .. h_T`` (each ``[H]``) of one series."""
    hs = p.hidden_size
    return [h.reshape(hs) for h in run_lstm(p, _as_row(series))]


def encode_bidirectional_rows(pf: LstmParams, pb: LstmParams, values: np.ndarray) -> list[Tensor]:
    fwd = run_lstm(pf, values)
    bwd = run_lstm(pb, values, reverse=True)
    return [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]


def encode_bidirectional(pf: LstmParams, pb: LstmParams, series: Sequence[float]) -> list[Tensor]:
    """Per-timestep ``[forward_t, backward_t]`` of length ``H_f + H_b``."""
    k = pf.hidden_size + pb.hidden_size
    return [h.reshape(k) for h in encode_bidirectional_rows(pf, pb, _as_row(series))]
