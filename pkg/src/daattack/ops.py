"""Core array ops shared by the nets, transforms, and attack engine.

Everything is float64. Convolution is cross-correlation (no kernel flip) with
zero padding and same-size output; np.sign gives sign(0) = 0, which the step
rules rely on.
"""

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError


def sign(t):
    return np.sign(t)


def l1_norm(t):
    """Sum of absolute entries over the whole array."""
    return float(np.sum(np.abs(t)))


def reduce_sum(t, axis=None):
    return np.sum(t, axis=axis)


def reduce_max(t, axis=None):
    return np.max(t, axis=axis)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(z, axis=-1):
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def clip_ball_and_range(x_star, x, epsilon, lo=0.0, hi=1.0):
    """Project x_star onto the L-inf ball of radius epsilon around x,
    intersected with the pixel range [lo, hi].

    Both clip stages commute here because the bounds are per-element
    intervals; the projection is exact, not iterative.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_star.shape != x.shape:
        raise ShapeError(f"clip shapes differ: {x_star.shape} vs {x.shape}")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    if not lo < hi:
        raise ConfigError(f"range must satisfy lo < hi, got [{lo}, {hi}]")
    lower = np.maximum(x - epsilon, lo)
    upper = np.minimum(x + epsilon, hi)
    return np.minimum(np.maximum(x_star, lower), upper)


def sample_noise(rng, shape, kind="gaussian", *, sigma=None, lo=None, hi=None):
    """Draw a noise array from ``rng``.

    kind="gaussian": zero-mean, scale sigma (polar method; sigma=0 gives
    exact zeros). kind="uniform": U[lo, hi).
    """
    if kind == "gaussian":
        if sigma is None:
            raise ConfigError("gaussian noise needs sigma")
        return rng.normal(sigma, shape)
    if kind == "uniform":
        if lo is None or hi is None:
            raise ConfigError("uniform noise needs lo and hi")
        return rng.uniform(lo, hi, shape)
    raise ConfigError(f"unknown noise kind {kind!r}")


def _as_batched(t):
    t = np.ascontiguousarray(t, dtype=np.float64)
    if t.ndim == 3:
        return t[None], True
    if t.ndim == 4:
        return t, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {t.shape}")


def conv2d_same(t, kernel):
    """Same-size depthwise cross-correlation of [C,H,W] or [B,C,H,W] with a
    single [k,k] kernel, zero padding, odd k."""
    x, squeeze = _as_batched(t)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be square 2-D, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if k > min(x.shape[2], x.shape[3]):
        raise ConfigError(
            f"kernel size {k} exceeds image size {x.shape[2]}x{x.shape[3]}"
        )
    y = kernels.depthwise2d(x, kernel)
    return y[0] if squeeze else y


def resize_nearest(img, out_h, out_w):
    """Nearest-neighbour resize of [C,H,W]; source index floor(i*in/out)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected [C,H,W], got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be >= 1, got {out_h}x{out_w}")
    _, in_h, in_w = img.shape
    rows = (np.arange(out_h) * in_h) // out_h
    cols = (np.arange(out_w) * in_w) // out_w
    return img[:, rows][:, :, cols]


def pad_at_offset(img, out_h, out_w, oy, ox):
    """Place [C,h,w] on a zero canvas of [C,out_h,out_w] at (oy, ox)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected [C,h,w], got shape {img.shape}")
    c, h, w = img.shape
    if oy < 0 or ox < 0 or oy + h > out_h or ox + w > out_w:
        raise ShapeError(
            f"offset ({oy},{ox}) places {h}x{w} outside {out_h}x{out_w}"
        )
    out = np.zeros((c, out_h, out_w))
    out[:, oy: oy + h, ox: ox + w] = img
    return out
