"""Parameterized layers and the named-array parameter container."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterator, Tuple

import numpy as np

from . import ops
from .exceptions import ContractError, DimensionError
from .tensor import Tensor, concat

CONTAINER_VERSION = 1


class Module:
    """Minimal parameter owner; attributes are walked in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ConvLayer(Module):
    """Same-padded convolution followed by ReLU or sigmoid."""

    def __init__(self, in_channels, out_channels, kernel_size, activation="relu", rng=None, dtype=np.float32):
        if activation not in ("relu", "sigmoid"):
            raise ValueError(f"unsupported activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng()
        kh, kw = kernel_size
        self.activation = activation
        self.kernels = _param(
            glorot_uniform(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, out_channels * kh * kw),
            dtype,
        )
        self.bias = _param(np.zeros(out_channels), dtype)

    @property
    def kernel_shape(self):
        return self.kernels.shape

    def forward(self, x, layout="HWNC"):
        y = ops.conv2d(x, self.kernels, self.bias, layout=layout)
        return ops.relu(y) if self.activation == "relu" else ops.sigmoid(y)


class LstmCell(Module):
    """LSTM weights with gate blocks stacked as (input, forget, cell, output)."""

    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        h = hidden_size
        self.hidden_size = h
        self.input_size = input_size
        self.w = _param(glorot_uniform(rng, (4 * h, input_size), input_size, 4 * h), dtype)
        scale = 1.0 / np.sqrt(h)
        self.u = _param(rng.uniform(-scale, scale, size=(4 * h, h)), dtype)
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        self.b = _param(b, dtype)

    def step(self, x_t, h_prev, c_prev):
        hc = ops.lstm_cell(x_t, h_prev, c_prev, self.w, self.u, self.b)
        h = self.hidden_size
        return hc[..., :h], hc[..., h:]

    def run(self, seq, reverse=False):
        return ops.lstm_sequence(seq, self.w, self.u, self.b, reverse=reverse)

    forward = step


def lstm_step(cell: LstmCell, x_t, h_prev, c_prev):
    return cell.step(x_t, h_prev, c_prev)


class BlstmLayer(Module):
    """Forward and backward LSTMs over a sequence, outputs concatenated."""

    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.fwd = LstmCell(input_size, hidden_size, rng, dtype)
        self.bck = LstmCell(input_size, hidden_size, rng, dtype)

    @property
    def output_size(self):
        return 2 * self.fwd.hidden_size

    def forward(self, seq):
        if seq.shape[-2] < 1:
            raise ContractError("BLSTM needs a non-empty sequence")
        return concat([self.fwd.run(seq), self.bck.run(seq, reverse=True)], axis=-1)


def blstm_run(layer: BlstmLayer, seq):
    return layer.forward(seq)


class TimeDistributedDense(Module):
    """Dense + sigmoid shared across all sequence positions."""

    def __init__(self, input_size, output_size, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.weights = _param(glorot_uniform(rng, (output_size, input_size), input_size, output_size), dtype)
        self.bias = _param(np.zeros(output_size), dtype)

    def forward(self, seq):
        return ops.sigmoid(ops.dense(seq, self.weights, self.bias))


# -- parameter container -------------------------------------------------------

def save_arrays(path, arrays: Dict[str, np.ndarray], extra: dict = None):
    """Write ``<path>.bin`` (raw little-endian values) and ``<path>.json`` (manifest)."""
    path = Path(path)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            fh.write(raw)
            entries.append(
                {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {"format": "named-arrays", "version": CONTAINER_VERSION, "arrays": entries}
    if extra:
        manifest["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_arrays(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "named-arrays" or manifest.get("version") != CONTAINER_VERSION:
        raise ContractError(f"{path}: not a version-{CONTAINER_VERSION} named-array container")
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out


def load_manifest_extra(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text()).get("extra", {})
