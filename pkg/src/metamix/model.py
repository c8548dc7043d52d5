"""Layered MLP base model with per-layer taps and parameter bookkeeping."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

CHECKPOINT_MAGIC = b"METAMIX-PARAMS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MetaModel:
    """MLP with ``L = len(layer_dims) - 1`` affine layers.

    Hidden layers apply ``activation``; the final layer is linear. Layer ``l``
    in the tap API counts completed (affine + activation) blocks, so
    ``forward_to_layer(X, 0)`` is ``X`` itself.
    """

    layer_dims: tuple[int, ...]
    activation: str = "leaky_relu"
    slope: float = 0.01
    loss_kind: str = "mse"

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("need at least one layer (two dims)")
        if any(int(d) < 1 for d in self.layer_dims):
            raise ValueError(f"layer dims must be positive: {self.layer_dims}")
        if self.activation not in ("leaky_relu", "relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in ("mse", "softmax_ce"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def width(self, l: int) -> int:
        """Feature width after ``l`` layers."""
        return self.layer_dims[l]

    def _act(self, h: Node) -> Node:
        if self.activation == "identity":
            return h
        if self.activation == "relu":
            return ad.relu(h)
        return ad.leaky_relu(h, self.slope)

    def _layer(self, params: "ParamSet", h: Node, i: int) -> Node:
        w, b = params.layer(i)
        out = ad.add_bias(ad.matmul(h, _node(w)), _node(b))
        return self._act(out) if i < self.n_layers - 1 else out

    def forward_to_layer(self, params: "ParamSet", x, l: int) -> Node:
        if not 0 <= l <= self.n_layers - 1:
            raise ValueError(f"tap layer {l} outside [0, {self.n_layers - 1}]")
        h = _node(x)
        for i in range(l):
            h = self._layer(params, h, i)
        return h

    def forward_from_layer(self, params: "ParamSet", h, l: int) -> Node:
        if not 0 <= l <= self.n_layers - 1:
            raise ValueError(f"tap layer {l} outside [0, {self.n_layers - 1}]")
        h = _node(h)
        if h.value.ndim != 2 or h.value.shape[1] != self.layer_dims[l]:
            raise ValueError(
                f"representation width {h.value.shape} does not match layer {l} width {self.layer_dims[l]}"
            )
        for i in range(l, self.n_layers):
            h = self._layer(params, h, i)
        return h

    def forward(self, params: "ParamSet", x) -> Node:
        return self.forward_from_layer(params, x, 0)

    def loss(self, pred: Node, target) -> Node:
        if self.loss_kind == "mse":
            return ad.mse(pred, target)
        return ad.softmax_cross_entropy(pred, target)

    def init_params(self, seed, head_only: bool = False, metasgd_lr: float | None = None) -> "ParamSet":
        """Glorot-uniform weights, zero biases. Deterministic in ``seed``.

        ``head_only`` marks only the last layer adaptable (ANIL);
        ``metasgd_lr`` attaches per-parameter inner rates initialised to that value.
        """
        rng = np.random.default_rng(seed)
        values = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            values.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            values.append(np.zeros(fan_out))
        adaptable = tuple(i == self.n_layers - 1 or not head_only for i in range(self.n_layers))
        rates = None
        if metasgd_lr is not None:
            rates = [np.full_like(v, float(metasgd_lr)) for v in values]
        return ParamSet(values, adaptable, rates)


def _node(x) -> Node:
    return x if isinstance(x, Node) else ad.constant(x)


def glorot_variance(fan_in: int, fan_out: int) -> float:
    return 2.0 / (fan_in + fan_out)


@dataclass
class ParamSet:
    """Flat ``[W1, b1, W2, b2, ...]`` plus per-layer adapt flags and optional MetaSGD rates.

    Entries are arrays for a concrete assignment, or graph nodes while a
    meta-gradient is being built.
    """

    values: list
    adaptable: tuple[bool, ...]
    rates: list | None = None

    def __post_init__(self):
        if len(self.values) != 2 * len(self.adaptable):
            raise ValueError("values must hold a (weight, bias) pair per layer")
        if self.rates is not None and len(self.rates) != len(self.values):
            raise ValueError("rates must mirror values")

    @property
    def n_layers(self) -> int:
        return len(self.adaptable)

    def layer(self, i: int):
        return self.values[2 * i], self.values[2 * i + 1]

    def adapt_indices(self) -> list[int]:
        return [k for k in range(len(self.values)) if self.adaptable[k // 2]]

    def arrays(self) -> list[np.ndarray]:
        return [_value(v) for v in self.values]

    def rate_arrays(self) -> list[np.ndarray] | None:
        return None if self.rates is None else [_value(r) for r in self.rates]

    def with_values(self, values: list) -> "ParamSet":
        return ParamSet(list(values), self.adaptable, self.rates)

    def copy(self) -> "ParamSet":
        rates = None if self.rates is None else [np.array(r) for r in self.rate_arrays()]
        return ParamSet([np.array(v) for v in self.arrays()], self.adaptable, rates)

    def as_leaves(self) -> "ParamSet":
        """Fresh differentiable leaves for every value and rate."""
        rates = None if self.rates is None else [ad.parameter(r) for r in self.rate_arrays()]
        return ParamSet([ad.parameter(v) for v in self.arrays()], self.adaptable, rates)

    def check_shapes(self, model: MetaModel) -> None:
        if self.n_layers != model.n_layers:
            raise ValueError(f"parameter set has {self.n_layers} layers, model has {model.n_layers}")
        for i, (fi, fo) in enumerate(zip(model.layer_dims[:-1], model.layer_dims[1:])):
            w, b = self.layer(i)
            if _value(w).shape != (fi, fo) or _value(b).shape != (fo,):
                raise ValueError(
                    f"layer {i}: expected W{(fi, fo)} b{(fo,)}, got {_value(w).shape} {_value(b).shape}"
                )

    def save(self, path) -> None:
        save_params(self, path)

    @staticmethod
    def load(path) -> "ParamSet":
        return load_params(path)


def _value(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def save_params(params: ParamSet, path) -> None:
    """Write a checkpoint.

    Layout: ``METAMIX-PARAMS`` magic, a little-endian uint32 format version,
    a uint32 header length, a UTF-8 JSON header describing every entry
    (name, shape, byte offset), then the raw little-endian float64 payload.
    Byte-identical for identical parameters.
    """
    arrays = params.arrays()
    names = [f"{'W' if k % 2 == 0 else 'b'}{k // 2}" for k in range(len(arrays))]
    entries = list(zip(names, arrays))
    if params.rates is not None:
        entries += [(f"lr_{n}", r) for n, r in zip(names, params.rate_arrays())]
    offset = 0
    meta = []
    payload = []
    for name, arr in entries:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        meta.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(data)
        offset += len(data)
    header = json.dumps(
        {"adaptable": list(params.adaptable), "metasgd": params.rates is not None, "entries": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(b"".join(payload))


def load_params(path) -> ParamSet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a metamix checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    body = raw[pos + hlen:]
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"])
    n_layers = len(header["adaptable"])
    names = [f"{'W' if k % 2 == 0 else 'b'}{k // 2}" for k in range(2 * n_layers)]
    values = [arrays[n] for n in names]
    rates = [arrays[f"lr_{n}"] for n in names] if header["metasgd"] else None
    return ParamSet(values, tuple(bool(a) for a in header["adaptable"]), rates)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])
