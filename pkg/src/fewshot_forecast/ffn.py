"""Feed-forward heads and the parameter archive format shared by every model."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHIVE_META_KEY = "__meta__"


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    """Affine layers ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``, uniform +-1/sqrt(fan_in)."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{prefix}.{i}.w"] = Tensor(rng.uniform(-bound, bound, (fan_out, fan_in)), requires_grad=True)
        params[f"{prefix}.{i}.b"] = Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True)
    return params


def mlp_layers(params: Mapping[str, Tensor], prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    i = 0
    while f"{prefix}.{i}.w" in params:
        layers.append((params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]))
        i += 1
    return layers


def mlp_forward(
    layers: Sequence[tuple[Tensor, Tensor]],
    x: Tensor,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    dropout_inputs: Sequence[int] = (),
) -> Tensor:
    """ReLU between layers, linear output. ``x`` is ``[R x in]``.

    Dropout (inverted, training only when ``dropout > 0``) is applied to the
    input of every layer listed in ``dropout_inputs``.
    """
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if i in dropout_inputs:
            x = ad.dropout(x, dropout, rng, training=dropout > 0.0)
        x = ad.add_bias(ad.matmul(x, w.T), b)
        if i < last:
            x = ad.relu(x)
    return x


def copy_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data, requires_grad=True) for k, p in params.items()}


def save_archive(path: str | Path, params: Mapping[str, Tensor], meta: dict) -> Path:
    """Write every tensor by name plus a JSON metadata record (``.npz``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta["parameters"] = [{"name": k, "shape": list(p.shape)} for k, p in params.items()]
    with open(path, "wb") as fh:
        np.savez(fh, **{ARCHIVE_META_KEY: np.array(json.dumps(meta, sort_keys=True))},
                 **{k: p.data for k, p in params.items()})
    return path


def load_archive(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z[ARCHIVE_META_KEY]))
        params = {}
        for entry in meta["parameters"]:
            arr = z[entry["name"]]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"archive {path}: {entry['name']} has shape {arr.shape}, expected {entry['shape']}")
            params[entry["name"]] = Tensor(arr, requires_grad=True)
    return params, meta
