"""Input transforms used by the attack family.

Two transforms from the attack literature:

* stochastic resize-and-pad ("input diversity"): with probability p, shrink
  the image to a random square size and place it on a zero canvas at a random
  offset;
* kernel smoothing ("translation invariance"): convolve a gradient direction
  with a normalized Gaussian kernel before the sign step.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class KernelSpec:
    """Smoothing kernel of radius k: (2k+1)x(2k+1) normalized weights."""

    k: int
    sigma: float
    weights: np.ndarray = field(repr=False)

    @property
    def size(self):
        return 2 * self.k + 1


def gaussian_kernel(k):
    """Normalized Gaussian kernel of radius k with sigma = k / sqrt(3).

    Weight before normalization at offset (i, j) is
    exp(-(i^2 + j^2) / (2 sigma^2)); for k=1 the center:edge:corner ratios
    are 1 : e^-1.5 : e^-3.
    """
    if k < 1:
        raise ConfigError(f"kernel radius must be >= 1, got {k}")
    sigma = k / math.sqrt(3.0)
    grid = np.arange(-k, k + 1, dtype=np.float64)
    d2 = grid[:, None] ** 2 + grid[None, :] ** 2
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    w /= w.sum()
    return KernelSpec(k=k, sigma=sigma, weights=w)


def delta_kernel(k):
    """Identity kernel of radius k; smoothing with it is a no-op."""
    if k < 1:
        raise ConfigError(f"kernel radius must be >= 1, got {k}")
    w = np.zeros((2 * k + 1, 2 * k + 1))
    w[k, k] = 1.0
    return KernelSpec(k=k, sigma=0.0, weights=w)


def default_kernel_radius(h):
    """Size-based smoothing radius: 1 for small images (h <= 16), else 3."""
    return 1 if h <= 16 else 3


def smooth_gradient(g, kspec):
    """Depthwise same-size convolution of a gradient with kspec.weights."""
    h = g.shape[-2]
    w = g.shape[-1]
    if kspec.size > min(h, w):
        raise ConfigError(
            f"kernel size {kspec.size} exceeds gradient size {h}x{w}"
        )
    return ops.conv2d_same(g, kspec.weights)


@dataclass(frozen=True)
class DimSpec:
    """Resize-and-pad parameters: apply probability p and minimum scale."""

    p: float
    min_scale: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must be in [0, 1], got {self.p}")
        if not 0.0 < self.min_scale <= 1.0:
            raise ConfigError(f"min_scale must be in (0, 1], got {self.min_scale}")


def dim_transform(x, spec, rng):
    """Stochastic resize-and-pad of one image [C,H,W].

    Draw order per call (the attack engine's replay contract): one uniform u
    deciding application; if u < p, a target size r in
    [ceil(min_scale*H), H], then offsets oy in [0, H-r] and ox in [0, W-r],
    all inclusive. Nearest-neighbour resize, zero padding. When the transform
    does not fire, x is returned unchanged (still consuming only u).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W], got shape {x.shape}")
    _, h, w = x.shape
    if h != w:
        raise ConfigError(f"resize-and-pad needs square images, got {h}x{w}")
    u = rng.random()
    if u >= spec.p:
        return x
    lo = math.ceil(spec.min_scale * h)
    r = rng.randint(lo, h)
    oy = rng.randint(0, h - r)
    ox = rng.randint(0, w - r)
    small = ops.resize_nearest(x, r, r)
    return ops.pad_at_offset(small, h, w, oy, ox)
