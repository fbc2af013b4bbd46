"""Smoothing kernels and the stochastic resize-and-pad transform."""

import math

import numpy as np
import pytest

from daattack import ops
from daattack.errors import ConfigError, ShapeError
from daattack.rng import RngStream
from daattack.transforms import (
    DimSpec,
    KernelSpec,
    default_kernel_radius,
    delta_kernel,
    dim_transform,
    gaussian_kernel,
    smooth_gradient,
)


def test_gaussian_kernel_radius_one_ratios():
    ks = gaussian_kernel(1)
    assert ks.size == 3
    assert ks.sigma == pytest.approx(1 / math.sqrt(3))
    w = ks.weights
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    # center : edge : corner = 1 : e^-1.5 : e^-3
    assert w[0, 1] / w[1, 1] == pytest.approx(math.exp(-1.5), rel=1e-12)
    assert w[0, 0] / w[1, 1] == pytest.approx(math.exp(-3.0), rel=1e-12)
    assert np.array_equal(w, w.T)
    assert np.array_equal(w, w[::-1, ::-1])


def test_gaussian_kernel_radius_three():
    ks = gaussian_kernel(3)
    assert ks.weights.shape == (7, 7)
    assert ks.sigma == pytest.approx(math.sqrt(3.0))
    assert ks.weights.sum() == pytest.approx(1.0, abs=1e-14)
    # normalization cancels in ratios, exposing the raw formula
    c = 3
    for i, j in [(1, 0), (2, 2), (3, 1), (0, 3)]:
        want = math.exp(-(i * i + j * j) / (2.0 * ks.sigma**2))
        assert ks.weights[c + i, c + j] / ks.weights[c, c] == pytest.approx(
            want, rel=1e-12
        )
    # strictly decaying away from center along an axis
    row = ks.weights[c, c:]
    assert np.all(np.diff(row) < 0)


def test_gaussian_kernel_rejects_bad_radius():
    with pytest.raises(ConfigError):
        gaussian_kernel(0)


def test_delta_kernel_identity():
    rng = RngStream(0)
    g = rng.normal(1.0, (2, 3, 9, 9))
    out = smooth_gradient(g, delta_kernel(3))
    assert np.array_equal(out, g)


def test_default_kernel_radius():
    assert default_kernel_radius(8) == 1
    assert default_kernel_radius(16) == 1
    assert default_kernel_radius(28) == 3


def test_smooth_gradient_matches_conv():
    rng = RngStream(1)
    g = rng.normal(1.0, (1, 8, 8))
    ks = gaussian_kernel(1)
    assert np.array_equal(smooth_gradient(g, ks), ops.conv2d_same(g, ks.weights))
    with pytest.raises(ConfigError):
        smooth_gradient(np.zeros((1, 5, 5)), gaussian_kernel(3))


def test_dim_spec_validation():
    DimSpec(p=0.5)
    with pytest.raises(ConfigError):
        DimSpec(p=1.5)
    with pytest.raises(ConfigError):
        DimSpec(p=0.5, min_scale=0.0)
    with pytest.raises(ConfigError):
        DimSpec(p=0.5, min_scale=1.2)


def test_dim_transform_never_fires_at_p_zero():
    rng = RngStream(2)
    x = RngStream(3).random((1, 8, 8))
    spec = DimSpec(p=0.0)
    out = dim_transform(x, spec, rng)
    assert out is x
    # exactly one scalar was consumed
    probe = RngStream(2)
    probe.random()
    assert np.array_equal(rng.random(4), probe.random(4))


def test_dim_transform_draw_contract_replay():
    # Independent replay: clone the stream, pull (u, r, oy, ox) by hand, and
    # rebuild the output from the primitive ops.
    x = RngStream(5).random((2, 16, 16))
    spec = DimSpec(p=1.0, min_scale=0.85)
    for trial in range(20):
        rng = RngStream(6, trial)
        clone = RngStream(6, trial)
        out = dim_transform(x, spec, rng)
        u = clone.random()
        assert u < 1.0
        lo = math.ceil(0.85 * 16)
        r = clone.randint(lo, 16)
        oy = clone.randint(0, 16 - r)
        ox = clone.randint(0, 16 - r)
        want = ops.pad_at_offset(ops.resize_nearest(x, r, r), 16, 16, oy, ox)
        assert np.array_equal(out, want)
        assert lo <= r <= 16 and 0 <= oy <= 16 - r and 0 <= ox <= 16 - r


def test_dim_transform_fire_rate():
    x = np.ones((1, 8, 8))
    spec = DimSpec(p=0.5, min_scale=0.85)
    rng = RngStream(7)
    fired = 0
    for _ in range(2000):
        out = dim_transform(x, spec, rng)
        fired += out is not x
    assert 0.45 < fired / 2000 < 0.55


def test_dim_transform_full_scale_is_content_identity():
    # min_scale=1 forces r=H so resize and offsets are trivial.
    x = RngStream(8).random((1, 8, 8))
    out = dim_transform(x, DimSpec(p=1.0, min_scale=1.0), RngStream(9))
    assert np.array_equal(out, x)


def test_dim_transform_errors():
    rng = RngStream(10)
    with pytest.raises(ShapeError):
        dim_transform(np.zeros((8, 8)), DimSpec(p=0.5), rng)
    with pytest.raises(ConfigError):
        dim_transform(np.zeros((1, 8, 6)), DimSpec(p=0.5), rng)


def test_kernel_spec_is_frozen():
    ks = gaussian_kernel(1)
    assert isinstance(ks, KernelSpec)
    with pytest.raises(AttributeError):
        ks.k = 2
