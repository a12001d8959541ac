"""Differentiable operations used by the network.

Convolutions are "same"-padded, stride-1 cross-correlations evaluated in the
frequency domain: Table-1 kernels reach 30 columns, where spatial summation is
orders of magnitude slower than FFT products.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from scipy.special import expit

from .exceptions import ContractError, DimensionError
from .runtime import fft_workers
from .tensor import Tensor, as_tensor, make_result, reshape, transpose

BCE_CLAMP = 1e-7

# Bytes allowed for one block of transformed kernels; larger layers are
# processed in output-channel blocks.
_KERNEL_BLOCK_BYTES = 96 * 2**20


# -- convolution --------------------------------------------------------------
#
# Internally activations use the (H, W, N, C) layout: transforming along the
# two leading axes then leaves the spectrum frequency-major, so the channel
# contraction is a batched matmul with no transposes.

def _fft_shape(h, w, kh, kw):
    return sfft.next_fast_len(h + kh - 1, real=False), sfft.next_fast_len(w + kw - 1, real=True)


def _dft_matrix(rows, cols, n, sign, dtype):
    """exp(sign * 2*pi*i * r * c / n) for the given row/column index vectors."""
    phase = np.outer(rows, cols) % n
    return np.exp(sign * 2j * np.pi * phase / n).astype(dtype)


def _complex_dtype(real_dtype):
    return np.complex64 if np.dtype(real_dtype) == np.float32 else np.complex128


def _image_spectrum(a, fh, fw):
    """(H, W, ...) real -> (Fh, Fw//2+1, ...) spectrum of the zero-padded array."""
    spec = sfft.rfft(a, n=fw, axis=1, workers=fft_workers())
    return sfft.fft(spec, n=fh, axis=0, workers=fft_workers())


def _image_from_spectrum(spec, rows, fw, cols):
    full = np.take(sfft.ifft(spec, axis=0, workers=fft_workers()), rows, axis=0)
    return np.take(sfft.irfft(full, n=fw, axis=1, workers=fft_workers()), cols, axis=1)


def _kernel_spectrum(k, fh, fw):
    """(kH, kW, C, O) kernels -> (Fh, Fw//2+1, C, O) spectrum.

    Only kH rows are non-zero, so the column transform is an explicit DFT
    matrix product instead of a padded FFT.
    """
    kh = k.shape[0]
    spec = sfft.rfft(k, n=fw, axis=1, workers=fft_workers())
    dft = _dft_matrix(np.arange(fh), np.arange(kh), fh, -1, spec.dtype)
    return (dft @ spec.reshape(kh, -1)).reshape((fh,) + spec.shape[1:])


def _kernel_from_spectrum(spec, rows, fw, cols):
    fh = spec.shape[0]
    idft = _dft_matrix(rows, np.arange(fh), fh, 1, spec.dtype) / fh
    part = (idft @ spec.reshape(fh, -1)).reshape((len(rows),) + spec.shape[1:])
    return np.take(sfft.irfft(part, n=fw, axis=1, workers=fft_workers()), cols, axis=1)


def _out_blocks(n_out, n_in, n_freq, itemsize):
    per_channel = n_in * n_freq * itemsize
    step = max(1, int(_KERNEL_BLOCK_BYTES // max(per_channel, 1)))
    return [(lo, min(n_out, lo + step)) for lo in range(0, n_out, step)]


def conv2d(x, kernels, bias=None, layout: str = "NCHW") -> Tensor:
    """Stride-1 "same" cross-correlation.

    ``kernels`` is (C_out, C_in, kH, kW).  With the default layout ``x`` is
    (C_in, H, W) or (N, C_in, H, W) and output pixel (o, y, x) equals
    ``bias[o] + sum_{c,i,j} x[c, y+i-kH//2, x+j-kW//2] * k[o, c, i, j]`` with
    zeros outside the image.  ``layout="HWNC"`` takes and returns
    (H, W, N, C) arrays, which is what the network uses internally.
    """
    x = as_tensor(x)
    if layout == "NCHW":
        if x.ndim not in (3, 4):
            raise DimensionError(f"conv2d expects (N,)C,H,W input, got {x.shape}")
        axes = (1, 2, 0) if x.ndim == 3 else (2, 3, 0, 1)
        xt = transpose(x, axes)
        if x.ndim == 3:
            xt = reshape(xt, xt.shape[:2] + (1, xt.shape[2]))
        out = conv2d(xt, kernels, bias, layout="HWNC")
        if x.ndim == 3:
            return transpose(reshape(out, out.shape[:2] + (out.shape[3],)), (2, 0, 1))
        return transpose(out, (2, 3, 0, 1))
    if layout != "HWNC":
        raise ValueError(f"unknown layout {layout!r}")

    kernels = as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernels, got {x.shape}, {kernels.shape}")
    xd = x.data
    h, w, n, c = xd.shape
    o, ck, kh, kw = kernels.shape
    if c != ck:
        raise DimensionError(f"input has {c} channels but kernels expect {ck}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"bias shape {bias.shape} != ({o},)")
    ph, pw = kh // 2, kw // 2
    fh, fw = _fft_shape(h, w, kh, kw)
    fw2 = fw // 2 + 1
    ktrans = np.ascontiguousarray(kernels.data.transpose(2, 3, 1, 0))  # (kH, kW, C, O)
    blocks = _out_blocks(o, c, fh * fw2, np.dtype(_complex_dtype(xd.dtype)).itemsize)

    xf = _image_spectrum(xd, fh, fw)  # (Fh, Fw2, N, C)
    yf = np.empty((fh, fw2, n, o), dtype=xf.dtype)
    for lo, hi in blocks:
        kf = _kernel_spectrum(ktrans[..., lo:hi], fh, fw)
        np.matmul(xf, np.conj(kf), out=yf[..., lo:hi])
        del kf
    del xf
    out = _image_from_spectrum(yf, (np.arange(h) - ph) % fh, fw, (np.arange(w) - pw) % fw)
    del yf
    out = out.astype(xd.dtype, copy=False)
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = gk = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        need_x, need_k = x.requires_grad, kernels.requires_grad
        if need_x or need_k:
            gf = _image_spectrum(g, fh, fw)  # (Fh, Fw2, N, O)
            if need_x:
                gxf = np.zeros((fh, fw2, n, c), dtype=gf.dtype)
            if need_k:
                xf_h = np.conj(_image_spectrum(xd, fh, fw)).swapaxes(-1, -2)  # (Fh, Fw2, C, N)
                gk_t = np.empty_like(ktrans)
                rows_k = (np.arange(kh) - ph) % fh
                cols_k = (np.arange(kw) - pw) % fw
            for lo, hi in blocks:
                if need_x:
                    kf = _kernel_spectrum(ktrans[..., lo:hi], fh, fw)
                    gxf += np.matmul(gf[..., lo:hi], kf.swapaxes(-1, -2))
                    del kf
                if need_k:
                    gkf = np.conj(np.matmul(xf_h, gf[..., lo:hi]))  # (Fh, Fw2, C, o_b)
                    gk_t[..., lo:hi] = _kernel_from_spectrum(gkf, rows_k, fw, cols_k)
                    del gkf
            if need_x:
                gx = _image_from_spectrum(gxf, (np.arange(h) + ph) % fh, fw, (np.arange(w) + pw) % fw)
                gx = gx.astype(xd.dtype, copy=False)
            if need_k:
                gk = np.ascontiguousarray(gk_t.transpose(3, 2, 0, 1)).astype(kernels.dtype, copy=False)
        return gx, gk, gb

    if bias is None:
        return make_result(out, (x, kernels), lambda g: backward(g)[:2], "conv2d")
    return make_result(out, (x, kernels, bias), backward, "conv2d")


# -- dense and activations ------------------------------------------------------

def dense(x, weights, bias=None) -> Tensor:
    """``weights @ x + bias`` applied along the last axis of ``x``."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[0],):
            raise DimensionError(f"dense: bias {bias.shape} != ({weights.shape[0]},)")
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weights.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weights.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_result(out, parents, backward if bias is not None else (lambda g: backward(g)[:2]), "dense")


def relu(t) -> Tensor:
    t = as_tensor(t)
    pos = t.data > 0
    return make_result(np.where(pos, t.data, 0).astype(t.dtype), (t,), lambda g: (g * pos,), "relu")


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    s = expit(t.data)
    return make_result(s, (t,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(t) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.data)
    return make_result(y, (t,), lambda g: (g * (1 - y * y),), "tanh")


# -- LSTM ---------------------------------------------------------------------------

def _gates(z, hidden):
    i = expit(z[..., :hidden])
    f = expit(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = expit(z[..., 3 * hidden:])
    return i, f, g, o


def lstm_cell(x, h_prev, c_prev, w, u, b) -> Tensor:
    """One LSTM step; returns ``concat([h_t, c_t], axis=-1)``.

    Gate order in the stacked weights is (input, forget, cell, output).
    """
    x, h_prev, c_prev, w, u, b = (as_tensor(t) for t in (x, h_prev, c_prev, w, u, b))
    hidden = u.shape[1]
    if w.shape[0] != 4 * hidden or u.shape[0] != 4 * hidden or b.shape != (4 * hidden,):
        raise DimensionError("lstm_cell: stacked gate weights must have 4*hidden rows")
    if x.shape[-1] != w.shape[1] or h_prev.shape[-1] != hidden or c_prev.shape != h_prev.shape:
        raise DimensionError("lstm_cell: state/input shapes do not match the weights")
    z = x.data @ w.data.T + h_prev.data @ u.data.T + b.data
    i, f, g, o = _gates(z, hidden)
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def backward(grad):
        gh, gc = grad[..., :hidden], grad[..., hidden:]
        dc = gc + gh * o * (1 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1 - i), dc * c_prev.data * f * (1 - f), dc * i * (1 - g * g), gh * tc * o * (1 - o)],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * hidden)
        return (
            dz @ w.data,
            dz @ u.data,
            dc * f,
            dz2.T @ x.data.reshape(-1, x.shape[-1]),
            dz2.T @ h_prev.data.reshape(-1, hidden),
            dz2.sum(axis=0),
        )

    return make_result(np.concatenate([h, c], axis=-1), (x, h_prev, c_prev, w, u, b), backward, "lstm_cell")


def lstm_sequence(x, w, u, b, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` of shape (N, T, d) or (T, d) from zero state.

    With ``reverse`` the recurrence runs from the last position to the first;
    the output stays indexed by position either way.
    """
    x, w, u, b = (as_tensor(t) for t in (x, w, u, b))
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    n, steps, d = xd.shape
    if steps < 1:
        raise ContractError("lstm_sequence needs at least one time step")
    hidden = u.shape[1]
    if w.shape != (4 * hidden, d):
        raise DimensionError(f"lstm_sequence: weights {w.shape} do not match input width {d}")
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    dtype = np.result_type(xd.dtype, w.dtype)
    xp = xd @ w.data.T + b.data  # (N, T, 4h)
    gates = np.empty((n, steps, 4 * hidden), dtype=dtype)
    hs = np.empty((n, steps, hidden), dtype=dtype)
    cs = np.empty((n, steps, hidden), dtype=dtype)
    hprev = np.empty((n, steps, hidden), dtype=dtype)
    cprev = np.empty((n, steps, hidden), dtype=dtype)
    h = np.zeros((n, hidden), dtype=dtype)
    c = np.zeros((n, hidden), dtype=dtype)
    ut = u.data.T
    for t in order:
        hprev[:, t] = h
        cprev[:, t] = c
        z = xp[:, t] + h @ ut
        i, f, g, o = _gates(z, hidden)
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :hidden] = i
        gates[:, t, hidden:2 * hidden] = f
        gates[:, t, 2 * hidden:3 * hidden] = g
        gates[:, t, 3 * hidden:] = o
        hs[:, t] = h
        cs[:, t] = c
    del xp

    def backward(grad):
        gd = grad if batched else grad[None]
        dz = np.empty_like(gates)
        dh_next = np.zeros((n, hidden), dtype=dtype)
        dc_next = np.zeros((n, hidden), dtype=dtype)
        ud = u.data
        for t in reversed(order):
            i = gates[:, t, :hidden]
            f = gates[:, t, hidden:2 * hidden]
            g = gates[:, t, 2 * hidden:3 * hidden]
            o = gates[:, t, 3 * hidden:]
            tc = np.tanh(cs[:, t])
            dh = gd[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz[:, t, :hidden] = dc * g * i * (1 - i)
            dz[:, t, hidden:2 * hidden] = dc * cprev[:, t] * f * (1 - f)
            dz[:, t, 2 * hidden:3 * hidden] = dc * i * (1 - g * g)
            dz[:, t, 3 * hidden:] = dh * tc * o * (1 - o)
            dh_next = dz[:, t] @ ud
            dc_next = dc * f
        dz2 = dz.reshape(-1, 4 * hidden)
        gx = dz @ w.data if x.requires_grad else None
        if gx is not None and not batched:
            gx = gx[0]
        gw = dz2.T @ xd.reshape(-1, d)
        gu = dz2.T @ hprev.reshape(-1, hidden)
        gb = dz2.sum(axis=0)
        return gx, gw, gu, gb

    out = hs if batched else hs[0]
    return make_result(out, (x, w, u, b), backward, "lstm_sequence")


# -- losses -----------------------------------------------------------------------------

def _mask_weights(mask, shape, dtype):
    if mask is None:
        m = np.ones(shape, dtype=dtype)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=dtype), shape)
    total = m.sum()
    if total <= 0:
        raise ContractError("loss mask selects no elements")
    return m, total


def bce_loss(pred, target, mask=None) -> Tensor:
    """Masked mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    m, total = _mask_weights(mask, pred.shape, pred.dtype)
    p = np.clip(pred.data, BCE_CLAMP, 1 - BCE_CLAMP)
    elem = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    loss = np.asarray((elem * m).sum() / total, dtype=pred.dtype)
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1 - BCE_CLAMP)

    def backward(g):
        dp = (-t / p + (1 - t) / (1 - p)) * m * inside / total
        return (g * dp,)

    return make_result(loss, (pred,), backward, "bce")


def mse_loss(pred, target, mask=None) -> Tensor:
    """Masked mean squared error."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {t.shape}")
    m, total = _mask_weights(mask, pred.shape, pred.dtype)
    diff = np.where(m > 0, pred.data - t, 0)
    loss = np.asarray((diff * diff * m).sum() / total, dtype=pred.dtype)
    return make_result(loss, (pred,), lambda g: (g * 2 * diff * m / total,), "mse")


# -- stripes ----------------------------------------------------------------------------

DEFAULT_SHIFTS = (-2, -1, 0, 1, 2)


def extract_stripes(edge, shifts=DEFAULT_SHIFTS) -> Tensor:
    """Turn an edge map (N, 1, H, W) or (1, H, W) into a (N, W, K*H) column sequence.

    Stripe x concatenates columns x+k of the map for k in ``shifts`` (blocks in
    the given order, rows top to bottom); columns outside the image are zero.
    """
    edge = as_tensor(edge)
    batched = edge.ndim == 4
    e = edge.data if batched else edge.data[None]
    if e.shape[1] != 1:
        raise DimensionError(f"edge map must have one channel, got {e.shape[1]}")
    n, _, h, w = e.shape
    shifts = tuple(int(k) for k in shifts)
    pad = max(abs(k) for k in shifts)
    padded = np.zeros((n, h, w + 2 * pad), dtype=e.dtype)
    padded[:, :, pad:pad + w] = e[:, 0]
    blocks = np.stack([padded[:, :, pad + k:pad + k + w] for k in shifts], axis=1)  # (N, K, H, W)
    out = np.ascontiguousarray(blocks.transpose(0, 3, 1, 2)).reshape(n, w, len(shifts) * h)
    if not batched:
        out = out[0]

    def backward(g):
        gb = (g if batched else g[None]).reshape(n, w, len(shifts), h).transpose(0, 2, 3, 1)
        acc = np.zeros((n, h, w + 2 * pad), dtype=g.dtype)
        for bi, k in enumerate(shifts):
            acc[:, :, pad + k:pad + k + w] += gb[:, bi]
        ge = acc[:, None, :, pad:pad + w]
        return (ge if batched else ge[0],)

    return make_result(out, (edge,), backward, "stripes")
