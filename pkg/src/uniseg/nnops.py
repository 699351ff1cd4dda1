"""Differentiable primitives (forward + hand-derived adjoints) used by the
vision backbone and the per-class heads.

All tensors are numpy float64, channel-first (C, D, H, W). Every backward
function is the exact adjoint of its forward; finite-difference tests pin
this down per op.
"""

from __future__ import annotations

import numpy as np

from .errors import GradShapeMismatch

LEAKY_SLOPE = 0.01


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# 3x3x3 convolution via im2col


def _conv_out_dims(dims, k: int, stride: int, pad: int):
    return tuple((n + 2 * pad - k) // stride + 1 for n in dims)


def _im2col(xp: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    """Gather sliding-window patches: (C, k^3, Do*Ho*Wo)."""
    c = xp.shape[0]
    do, ho, wo = out_dims
    cols = np.empty((c, k, k, k, do, ho, wo), dtype=xp.dtype)
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                cols[:, kz, ky, kx] = xp[:, kz:kz + stride * do:stride,
                                         ky:ky + stride * ho:stride,
                                         kx:kx + stride * wo:stride]
    return cols.reshape(c * k * k * k, do * ho * wo)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, pad: int = 1):
    """y[co] = sum_ci w[co,ci] * x[ci] + b[co], zero-padded.

    Returns (y, ctx); ctx keeps the im2col matrix so backward reuses it
    (at desk-scale patch sizes that is cheaper than rebuilding it).
    """
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != cin:
        raise GradShapeMismatch(f"conv input has {x.shape[0]} channels, kernel wants {cin}")
    out_dims = _conv_out_dims(x.shape[1:], k, stride, pad)
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    cols = _im2col(xp, k, stride, out_dims)
    y = (w.reshape(cout, -1) @ cols).reshape((cout,) + out_dims)
    y += b[:, None, None, None]
    ctx = (x.shape, w.shape, stride, pad, out_dims, cols)
    return y, ctx


def conv3d_backward(ctx, w: np.ndarray, gy: np.ndarray):
    """Adjoint of conv3d_forward. Returns (gx, gw, gb)."""
    xshape, wshape, stride, pad, out_dims, cols = ctx
    cout, cin, k = wshape[0], wshape[1], wshape[2]
    if gy.shape != (cout,) + out_dims:
        raise GradShapeMismatch(f"grad shape {gy.shape} != output shape {(cout,) + out_dims}")
    do, ho, wo = out_dims
    g = gy.reshape(cout, -1)
    gb = g.sum(axis=1)
    gw = (g @ cols.T).reshape(wshape)
    gcols = (w.reshape(cout, -1).T @ g).reshape(cin, k, k, k, do, ho, wo)
    gxp = np.zeros((cin,) + tuple(n + 2 * pad for n in xshape[1:]))
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                gxp[:, kz:kz + stride * do:stride,
                    ky:ky + stride * ho:stride,
                    kx:kx + stride * wo:stride] += gcols[:, kz, ky, kx]
    gx = gxp[:, pad:gxp.shape[1] - pad, pad:gxp.shape[2] - pad, pad:gxp.shape[3] - pad]
    return gx, gw, gb


# ---------------------------------------------------------------------------
# pointwise and structural ops


def leaky_relu_forward(z: np.ndarray, slope: float = LEAKY_SLOPE):
    pos = z > 0
    return np.where(pos, z, slope * z), pos


def leaky_relu_backward(pos: np.ndarray, gy: np.ndarray,
                        slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(pos, gy, slope * gy)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor x2 along each spatial axis."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(gy: np.ndarray) -> np.ndarray:
    c, d, h, w = gy.shape
    return gy.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(2, 4, 6))


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Global average pool over the spatial axes: (C,D,H,W) -> (C,)."""
    return x.mean(axis=(1, 2, 3))


def gap_backward(gy: np.ndarray, spatial_shape) -> np.ndarray:
    n = int(np.prod(spatial_shape))
    return np.broadcast_to(gy[:, None, None, None] / n,
                           (gy.shape[0],) + tuple(spatial_shape)).copy()


def concat_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b], axis=0)


def concat_backward(gy: np.ndarray, split: int):
    return gy[:split], gy[split:]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def pointwise_conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """1x1x1 convolution = per-voxel linear map. w: (Cout, Cin)."""
    y = np.tensordot(w, x, axes=([1], [0])) + b[:, None, None, None]
    return y


def pointwise_conv_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    gw = np.tensordot(gy, x, axes=([1, 2, 3], [1, 2, 3]))
    gb = gy.sum(axis=(1, 2, 3))
    gx = np.tensordot(w.T, gy, axes=([1], [0]))
    return gx, gw, gb
