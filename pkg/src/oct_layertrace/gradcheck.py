"""Central finite-difference checks of every backward rule, in float64.

The relative error of one input is ``max|analytic - numeric|`` divided by
``max(max|analytic|, max|numeric|)``; a check passes below the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, concat

DEFAULT_TOL = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a, n) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def check_function(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0, h: float = STEP) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * R)`` for a fixed random R."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape) if out.ndim else np.ones(())
    loss = (out * Tensor(proj)).sum()
    loss.backward()

    def value():
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * proj))

    errs = []
    for t, a in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        errs.append(relative_error(analytic, numeric_gradient(value, a, h)))
    return max(errs)


def _away_from_zero(rng, shape, low=0.1):
    x = rng.uniform(low, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _conv(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 4))
    b = rng.standard_normal(4)
    return lambda x, k, b: ops.conv2d(x, k, b), [x, k, b]


def _dense(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    return ops.dense, [x, w, b]


def _relu(rng):
    return ops.relu, [_away_from_zero(rng, (4, 5))]


def _sigmoid(rng):
    return ops.sigmoid, [rng.standard_normal((4, 5)) * 3]


def _tanh(rng):
    return ops.tanh, [rng.standard_normal((4, 5)) * 2]


def _lstm_params(rng, d, h):
    return rng.standard_normal((4 * h, d)) * 0.5, rng.standard_normal((4 * h, h)) * 0.5, rng.standard_normal(4 * h)


def _lstm_cell(rng):
    d, h = 4, 3
    x, hp, cp = rng.standard_normal((2, d)), rng.standard_normal((2, h)), rng.standard_normal((2, h))
    return ops.lstm_cell, [x, hp, cp, *_lstm_params(rng, d, h)]


def _blstm(rng):
    d, h = 4, 3
    seq = rng.standard_normal((2, 2, d))  # two sequences of two steps

    def fn(seq, wf, uf, bf, wb, ub, bb):
        return concat([ops.lstm_sequence(seq, wf, uf, bf), ops.lstm_sequence(seq, wb, ub, bb, reverse=True)], axis=-1)

    return fn, [seq, *_lstm_params(rng, d, h), *_lstm_params(rng, d, h)]


def _stripes(rng):
    return lambda e: ops.extract_stripes(e, (-2, -1, 0, 1, 2)), [rng.standard_normal((2, 1, 4, 6))]


def _bce(rng):
    p = rng.uniform(0.05, 0.95, size=(3, 4, 5))
    t = (rng.random((3, 4, 5)) > 0.5).astype(np.float64)
    m = (rng.random((3, 4, 5)) > 0.2).astype(np.float64)
    return lambda p: ops.bce_loss(p, t, m), [p]


def _mse(rng):
    p = rng.random((3, 4))
    t = rng.random((3, 4))
    m = (rng.random((3, 4)) > 0.2).astype(np.float64)
    return lambda p: ops.mse_loss(p, t, m), [p]


SUITES: Dict[str, Dict[str, Callable]] = {
    "conv": {"conv2d": _conv, "dense": _dense, "relu": _relu, "sigmoid": _sigmoid, "tanh": _tanh,
             "stripes": _stripes},
    "lstm": {"lstm_cell": _lstm_cell, "blstm": _blstm},
    "losses": {"bce": _bce, "mse": _mse},
}


def run_gradcheck(module: str = "all", tol: float = DEFAULT_TOL, seed: int = 0) -> List[CheckResult]:
    if module == "all":
        checks = {k: v for suite in SUITES.values() for k, v in suite.items()}
    elif module in SUITES:
        checks = SUITES[module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; choose all, {', '.join(SUITES)}")
    results = []
    for i, (name, build) in enumerate(checks.items()):
        fn, arrays = build(np.random.default_rng([seed, i]))
        err = check_function(fn, arrays, seed=seed)
        results.append(CheckResult(name, err, bool(err < tol)))
    return results
