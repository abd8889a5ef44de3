"""Differentiable operations on :class:`Tensor`.

Everything the generator and losses need, nothing more: 2-d convolution
(zero or reflect padding, stride 1 or 2), transposed convolution, bilinear
2x upsampling, instance normalization, 2x average pooling, and elementwise
and reduction primitives.  Each op validates shapes eagerly, computes in
the dtype of its inputs, and records a backward rule onto the active tape.

Broadcasting is deliberately restricted: ``hadamard`` may broadcast a
1-channel map across C channels (for edge-map weighting); everything else
requires exact shape equality so shape bugs surface immediately.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError, DimensionError, GeometryError
from .tensor import Tensor, record

__all__ = [
    "add",
    "sub",
    "hadamard",
    "scale",
    "relu",
    "tanh",
    "absval",
    "tsum",
    "tmean",
    "conv2d",
    "conv_transpose2d",
    "bilinear_upsample2x",
    "avgpool2x",
    "instance_norm",
]


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise DimensionError(
                    f"{op}: shape mismatch on axis {axis}: {a.shape} vs {b.shape}"
                )
        raise DimensionError(f"{op}: rank mismatch: {a.shape} vs {b.shape}")


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch: {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    _check_same_dtype(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    _check_same_dtype(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return g, -g

    return record(out, (a, b), bwd)


def _hadamard_broadcast_ok(sa: tuple, sb: tuple) -> bool:
    # Exactly equal, or a legal 1-channel -> C-channel spatial broadcast.
    if sa == sb:
        return True
    if len(sa) == 4 and len(sb) == 4:
        if sa[0] == sb[0] and sa[2:] == sb[2:] and (sa[1] == 1 or sb[1] == 1):
            return True
    return False


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one side may be a 1-channel NCHW map broadcast
    across the other side's channels."""
    _check_same_dtype(a, b, "hadamard")
    if not _hadamard_broadcast_ok(a.shape, b.shape):
        raise DimensionError(
            f"hadamard: shapes {a.shape} and {b.shape} are neither equal nor a "
            "1-channel spatial broadcast"
        )
    out = Tensor(a.data * b.data)

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = ga.sum(axis=1, keepdims=True)
        if gb.shape != b.shape:
            gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return record(out, (a, b), bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    out = Tensor(a.data * f)

    def bwd(g):
        return (g * f,)

    return record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    y = out.data

    def bwd(g):
        return (g * (1.0 - y * y),)

    return record(out, (a,), bwd)


def absval(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    out = Tensor(np.abs(a.data))
    s = np.sign(a.data)

    def bwd(g):
        return (g * s,)

    return record(out, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return record(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = a.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))

    def bwd(g):
        gv = g / a.dtype.type(n)
        return (np.broadcast_to(gv, a.shape).astype(a.dtype, copy=True),)

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad2d(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    spec = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, spec, mode="constant")
    if mode == "reflect":
        h, w = x.shape[2], x.shape[3]
        if pad >= h or pad >= w:
            raise DimensionError(
                f"reflect pad {pad} requires spatial dims > pad, got {h}x{w}"
            )
        return np.pad(x, spec, mode="reflect")
    raise ConfigError(f"unknown padding mode {mode!r}")


def _unpad2d_grad(gp: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Adjoint of _pad2d: fold border gradient back onto interior pixels."""
    if pad == 0:
        return gp
    if mode == "zero":
        return np.ascontiguousarray(gp[:, :, pad:-pad, pad:-pad])
    # reflect (no edge repeat): padded row k < pad mirrors interior row pad-k.
    # Fold one axis at a time so corner regions compose correctly.
    g = gp[:, :, pad:-pad, :].copy()
    g[:, :, 1 : pad + 1, :] += gp[:, :, :pad, :][:, :, ::-1, :]
    g[:, :, -pad - 1 : -1, :] += gp[:, :, -pad:, :][:, :, ::-1, :]
    out = g[:, :, :, pad:-pad].copy()
    out[:, :, :, 1 : pad + 1] += g[:, :, :, :pad][:, :, :, ::-1]
    out[:, :, :, -pad - 1 : -1] += g[:, :, :, -pad:][:, :, :, ::-1]
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*K*K, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[
                :, :, ki : ki + stride * (ho - 1) + 1 : stride,
                kj : kj + stride * (wo - 1) + 1 : stride,
            ]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "zero",
    pad_size: int = 0,
) -> Tensor:
    """2-d cross-correlation.  weight is (Cout, Cin, K, K) with K odd,
    stride in {1, 2}; output size (H + 2*pad - K)/stride + 1 must divide
    exactly."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got rank {x.data.ndim}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be (Cout,Cin,K,K), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, k, _ = weight.shape
    if k % 2 != 1:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad_size < 0:
        raise ConfigError(f"conv2d: pad_size must be >= 0, got {pad_size}")
    if cin != cin_w:
        raise DimensionError(
            f"conv2d: input channel axis 1 has {cin} channels, weight expects {cin_w}"
        )
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias must be ({cout},), got {bias.shape}")
        _check_same_dtype(x, bias, "conv2d")
    _check_same_dtype(x, weight, "conv2d")
    if pad_size == 0 and (h < k or w < k):
        raise DimensionError(
            f"conv2d: unpadded input {h}x{w} smaller than kernel {k}x{k}"
        )
    if (h + 2 * pad_size - k) % stride or (w + 2 * pad_size - k) % stride:
        raise GeometryError(
            f"conv2d: output size ({h}+2*{pad_size}-{k})/{stride}+1 is not exact"
        )
    ho = (h + 2 * pad_size - k) // stride + 1
    wo = (w + 2 * pad_size - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"conv2d: non-positive output size {ho}x{wo}")

    xp = _pad2d(x.data, pad_size, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out_data = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)
    out = Tensor(out_data)

    padded_shape = (n, cin, h + 2 * pad_size, w + 2 * pad_size)

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        # weight grad: correlate grad_out with the stored patch matrix
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        # input grad: scatter grad columns back through the patch extraction
        gcols = np.matmul(w2.T, g2).reshape(n, cin, k, k, ho, wo)
        gp = np.zeros(padded_shape, dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                gp[
                    :, :, ki : ki + stride * (ho - 1) + 1 : stride,
                    kj : kj + stride * (wo - 1) + 1 : stride,
                ] += gcols[:, :, ki, kj]
        gx = _unpad2d_grad(gp, pad_size, padding)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return record(out, inputs, lambda g: bwd(g)[:2])
    return record(out, inputs, bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution (scatter-style learnable upsampling).

    weight is (Cin, Cout, K, K), square.  Output spatial dims are exactly
    ``stride * input dims``: the full scatter grid of size (H-1)*stride + K
    is cropped by ``(K - stride + 1) // 2`` on the top/left, and zero rows
    or columns are appended at the bottom/right as needed (the usual
    output-padding convention).  The uneven kernel overlap of this op is
    what produces checkerboard patterns.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv_transpose2d: input must be NCHW, got rank {x.data.ndim}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(
            f"conv_transpose2d: weight must be (Cin,Cout,K,K), got {weight.shape}"
        )
    if stride not in (1, 2):
        raise ConfigError(f"conv_transpose2d: stride must be 1 or 2, got {stride}")
    n, cin, h, w = x.shape
    cin_w, cout, k, _ = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv_transpose2d: input channel axis 1 has {cin} channels, "
            f"weight expects {cin_w}"
        )
    _check_same_dtype(x, weight, "conv_transpose2d")

    crop = max(0, (k - stride + 1) // 2)
    hf = (h - 1) * stride + k
    wf = (w - 1) * stride + k
    ho, wo = stride * h, stride * w

    w2 = weight.data.reshape(cin, cout * k * k)
    x2 = x.data.reshape(n, cin, h * w)
    # scatter columns: out_full[:, :, s*i+ki, s*j+kj] += x[:, ci, i, j] * w[ci, co, ki, kj]
    gcols = np.matmul(w2.T, x2).reshape(n, cout, k, k, h, w)
    full = np.zeros((n, cout, hf, wf), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            full[
                :, :, ki : ki + stride * (h - 1) + 1 : stride,
                kj : kj + stride * (w - 1) + 1 : stride,
            ] += gcols[:, :, ki, kj]
    out_data = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    eff_h = min(hf - crop, ho)
    eff_w = min(wf - crop, wo)
    out_data[:, :, :eff_h, :eff_w] = full[:, :, crop : crop + eff_h, crop : crop + eff_w]
    out = Tensor(out_data)

    def bwd(g):
        gfull = np.zeros((n, cout, hf, wf), dtype=x.dtype)
        gfull[:, :, crop : crop + eff_h, crop : crop + eff_w] = g[:, :, :eff_h, :eff_w]
        cols = np.empty((n, cout, k, k, h, w), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = gfull[
                    :, :, ki : ki + stride * (h - 1) + 1 : stride,
                    kj : kj + stride * (w - 1) + 1 : stride,
                ]
        cols2 = cols.reshape(n, cout * k * k, h * w)
        gx = np.matmul(w2, cols2).reshape(n, cin, h, w)
        gw = np.matmul(x2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return gx, gw

    return record(out, (x, weight), bwd)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _up2x_last(x: np.ndarray) -> np.ndarray:
    """2x upsample along the last axis: output sample centers at
    (i + 0.5)/2 - 0.5 with edge clamping (align-corners-false).

    out[2m]   = x[m] + 0.25*(x[m-1] - x[m])   (x[-1] clamps to x[0])
    out[2m+1] = x[m] + 0.25*(x[m+1] - x[m])   (x[n] clamps to x[n-1])

    The incremental form keeps constant inputs exactly constant.
    """
    quarter = x.dtype.type(0.25)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    ev = out[..., 0::2]
    od = out[..., 1::2]
    ev[...] = x
    ev[..., 1:] += quarter * (x[..., :-1] - x[..., 1:])
    od[...] = x
    od[..., :-1] += quarter * (x[..., 1:] - x[..., :-1])
    return out


def _down2x_adj_last(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_up2x_last` along the last axis."""
    quarter = g.dtype.type(0.25)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    gx = (ge + go) * g.dtype.type(0.75)
    gx[..., 1:] += quarter * go[..., :-1]
    gx[..., :-1] += quarter * ge[..., 1:]
    gx[..., 0] += quarter * ge[..., 0]
    gx[..., -1] += quarter * go[..., -1]
    return gx


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double both spatial dims by separable bilinear interpolation.
    Constant inputs map to constant outputs exactly."""
    if x.data.ndim != 4:
        raise DimensionError(f"bilinear_upsample2x: input must be NCHW, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(
            f"bilinear_upsample2x: spatial dims must be >= 2, got {h}x{w}"
        )
    rows = np.swapaxes(_up2x_last(np.swapaxes(x.data, 2, 3)), 2, 3)
    out = Tensor(_up2x_last(rows))

    def bwd(g):
        grows = _down2x_adj_last(g)
        gx = np.swapaxes(_down2x_adj_last(np.swapaxes(grows, 2, 3)), 2, 3)
        return (np.ascontiguousarray(gx),)

    return record(out, (x,), bwd)


def avgpool2x(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; spatial dims must be even."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2x: input must be NCHW, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = Tensor(blocks.mean(axis=(3, 5)))

    def bwd(g):
        q = x.dtype.type(0.25)
        gx = np.repeat(np.repeat(g * q, 2, axis=2), 2, axis=3)
        return (gx,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardization with learnable affine.
    Uses population variance; eps > 0 guards constant channels."""
    if x.data.ndim != 4:
        raise DimensionError(f"instance_norm: input must be NCHW, got rank {x.data.ndim}")
    if eps <= 0:
        raise ConfigError(f"instance_norm: eps must be > 0, got {eps}")
    n, c, h, w = x.shape
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(
            f"instance_norm: gain/shift must be ({c},), got {gain.shape}/{shift.shape}"
        )
    _check_same_dtype(x, gain, "instance_norm")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1))

    def bwd(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gy = g * gain.data.reshape(1, c, 1, 1)
        mean_gy = gy.mean(axis=(2, 3), keepdims=True)
        mean_gy_xhat = (gy * xhat).mean(axis=(2, 3), keepdims=True)
        gx = inv * (gy - mean_gy - xhat * mean_gy_xhat)
        return gx.astype(x.dtype, copy=False), ggain, gshift

    return record(out, (x, gain, shift), bwd)
