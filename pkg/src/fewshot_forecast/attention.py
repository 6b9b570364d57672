"""Single-head dot-product attention over every support timestep.

The score between query representation ``z`` and support state ``h`` is
``(K h) . (Q z)``, unscaled by default. The numerator and denominator of
the softmax use the same score function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySupportError, ShapeError


@dataclass
class AttentionParams:
    q: Tensor  # [K_a x K_z]
    k: Tensor  # [K_a x K_h]
    v: Tensor  # [K_v x K_h]

    def __post_init__(self):
        if self.q.shape[0] != self.k.shape[0] or self.k.shape[1] != self.v.shape[1]:
            raise ShapeError(
                f"attention shapes do not chain: Q={self.q.shape} K={self.k.shape} V={self.v.shape}"
            )

    @property
    def query_dim(self) -> int:
        return self.q.shape[1]

    @property
    def key_dim(self) -> int:
        return self.k.shape[1]

    @property
    def value_dim(self) -> int:
        return self.v.shape[0]

    @classmethod
    def init(cls, kz: int, kh: int, ka: int, kv: int, rng: np.random.Generator) -> AttentionParams:
        def uniform(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return Tensor(rng.uniform(-bound, bound, (rows, cols)), requires_grad=True)

        return cls(uniform(ka, kz), uniform(ka, kh), uniform(kv, kh))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.q": self.q, f"{prefix}.k": self.k, f"{prefix}.v": self.v}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str) -> AttentionParams:
        return cls(params[f"{prefix}.q"], params[f"{prefix}.k"], params[f"{prefix}.v"])


@dataclass
class EncodedSupport:
    """All support hidden states stacked into one ``[M x K_h]`` matrix.

    ``index[i]`` is the ``(series, timestep)`` pair (both 0-based) of row ``i``.
    """

    index: list[tuple[int, int]]
    states: Tensor

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] != len(self.index):
            raise ShapeError(
                f"{len(self.index)} index entries for states of shape {self.states.shape}"
            )

    def __len__(self) -> int:
        return len(self.index)

    @property
    def width(self) -> int:
        return self.states.shape[1]

    def entries(self) -> list[tuple[int, int, Tensor]]:
        return [(n, t, self.states[i]) for i, (n, t) in enumerate(self.index)]

    def permuted(self, order) -> EncodedSupport:
        order = np.asarray(order)
        return EncodedSupport([self.index[i] for i in order], self.states[order])


def _check(p: AttentionParams, support: EncodedSupport) -> None:
    if len(support) == 0:
        raise EmptySupportError("attention over an empty support set")
    if support.width != p.key_dim:
        raise ShapeError(f"support width {support.width} != key dimension {p.key_dim}")


def attend_rows(p: AttentionParams, z: Tensor, support: EncodedSupport, scale: bool = False) -> Tensor:
    """Batched attention: ``z`` is ``[R x K_z]``, result ``[R x K_v]``."""
    _check(p, support)
    if z.ndim != 2 or z.shape[1] != p.query_dim:
        raise ShapeError(f"query rows {z.shape} do not match K_z={p.query_dim}")
    h = support.states
    scores = ad.matmul(ad.matmul(z, p.q.T), ad.matmul(h, p.k.T).T)
    if scale:
        scores = ad.mul(scores, 1.0 / np.sqrt(p.q.shape[0]))
    return ad.matmul(ad.softmax(scores), ad.matmul(h, p.v.T))


def _scores(p: AttentionParams, z: Tensor, support: EncodedSupport, scale: bool) -> Tensor:
    _check(p, support)
    if z.shape != (p.query_dim,):
        raise ShapeError(f"query vector {z.shape} does not match K_z={p.query_dim}")
    qz = ad.matmul(p.q, z.reshape(p.query_dim, 1))
    scores = ad.matmul(ad.matmul(support.states, p.k.T), qz).reshape(len(support))
    return ad.mul(scores, 1.0 / np.sqrt(p.q.shape[0])) if scale else scores


def attend(p: AttentionParams, z: Tensor, support: EncodedSupport, scale: bool = False) -> Tensor:
    """Attention output ``a`` (``[K_v]``) for one query representation ``z``."""
    scores = _scores(p, z, support, scale)
    values = ad.matmul(support.states, p.v.T)
    return ad.softmax_weighted_sum(scores, values)


def attention_weights(
    p: AttentionParams, z: Tensor, support: EncodedSupport, scale: bool = False
) -> list[tuple[int, int, float]]:
    with ad.no_grad():
        w = ad.softmax(_scores(p, z, support, scale)).data
    return [(n, t, float(wi)) for (n, t), wi in zip(support.index, w)]
