"""Forward/backward primitives for the patch classifier.

Everything is plain numpy.  Array layout is channels-last:
``(N, x, y, z, C)`` for spatial stages, ``(N, width)`` once flattened.

The valid 3D convolution is computed by offset accumulation: for each kernel
offset (i, j, k) a strided slice of the input is matmul'ed against the
(Cin, Cout) weight plane and accumulated.  That turns the innermost work into
large BLAS calls instead of per-voxel Python loops, and the same slicing gives
the exact adjoint for the backward pass.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# valid 3D convolution
# ---------------------------------------------------------------------------


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (N,X,Y,Z,Cin) * w (kx,ky,kz,Cin,Cout) + b, valid padding, stride 1."""
    n, X, Y, Z, cin = x.shape
    kx, ky, kz, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernel {wcin}")
    ox, oy, oz = X - kx + 1, Y - ky + 1, Z - kz + 1
    if min(ox, oy, oz) < 1:
        raise ValueError(f"kernel {w.shape[:3]} larger than input {x.shape[1:4]}")
    out = np.zeros((n, ox, oy, oz, cout), dtype=x.dtype)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                out += x[:, i:i + ox, j:j + oy, k:k + oz, :] @ w[i, j, k]
    out += b
    return out


def conv3d_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv3d_forward w.r.t. input, weights, and bias."""
    kx, ky, kz = w.shape[:3]
    ox, oy, oz = dout.shape[1:4]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = dout.sum(axis=(0, 1, 2, 3))
    spatial = ([0, 1, 2, 3], [0, 1, 2, 3])
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                xs = x[:, i:i + ox, j:j + oy, k:k + oz, :]
                dw[i, j, k] = np.tensordot(xs, dout, axes=spatial)
                dx[:, i:i + ox, j:j + oy, k:k + oz, :] += dout @ w[i, j, k].T
    return dx, dw, db


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------


def relu_forward(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = a > 0
    return a * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


# ---------------------------------------------------------------------------
# 2x2 in-plane max pool, ceil mode
# ---------------------------------------------------------------------------


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over non-overlapping 2x2 (x, y) windows; odd edges keep a partial
    window (the missing quadrant is -inf), so outputs are ceil(n/2).

    Returns (out, argmax) with argmax in [0, 4) per output element.
    """
    n, X, Y, Z, c = x.shape
    ox, oy = -(-X // 2), -(-Y // 2)
    px, py = 2 * ox - X, 2 * oy - Y
    if px or py:
        xp = np.full((n, 2 * ox, 2 * oy, Z, c), -np.inf, dtype=x.dtype)
        xp[:, :X, :Y] = x
    else:
        xp = x
    windows = (
        xp.reshape(n, ox, 2, oy, 2, Z, c)
        .transpose(0, 1, 3, 5, 6, 2, 4)
        .reshape(n, ox, oy, Z, c, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2x2_backward(
    dout: np.ndarray, idx: np.ndarray, in_shape: tuple
) -> np.ndarray:
    n, X, Y, Z, c = in_shape
    ox, oy = dout.shape[1], dout.shape[2]
    dwin = np.zeros((n, ox, oy, Z, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    dxp = (
        dwin.reshape(n, ox, oy, Z, c, 2, 2)
        .transpose(0, 1, 5, 2, 6, 3, 4)
        .reshape(n, 2 * ox, 2 * oy, Z, c)
    )
    return np.ascontiguousarray(dxp[:, :X, :Y])


# ---------------------------------------------------------------------------
# dense, dropout, softmax
# ---------------------------------------------------------------------------


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def dense_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(
    x: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: survivors are rescaled by 1/(1-rate) so the expected
    activation matches the eval path and no rescaling happens at test time."""
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate), keep


def dropout_backward(dout: np.ndarray, keep: np.ndarray, rate: float) -> np.ndarray:
    return dout * keep / (1.0 - rate)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the trailing axis, max-shifted for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
