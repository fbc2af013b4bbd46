"""Stream determinism, lineage independence, and the polar Gaussian."""

import hashlib

import numpy as np
import pytest

from daattack.rng import RngStream, sub_seed


def test_same_lineage_same_draws():
    a = RngStream(17, 3).random(16)
    b = RngStream(17, 3).random(16)
    assert np.array_equal(a, b)


def test_frozen_root_draws():
    # Pinned so a platform or backend change that shifts the stream is loud.
    got = RngStream(0).random(4)
    want = [
        0.7716425832915921,
        0.8455534372848968,
        0.5854000209660469,
        0.39223303176624935,
    ]
    assert np.allclose(got, want, rtol=0, atol=0)


def test_child_streams_differ_from_parent_and_siblings():
    parent = RngStream(5).random(8)
    c0 = RngStream(5).child(0).random(8)
    c1 = RngStream(5).child(1).random(8)
    assert not np.array_equal(parent, c0)
    assert not np.array_equal(c0, c1)


def test_child_equals_explicit_path():
    a = RngStream(5).child(2).child(9).random(4)
    b = RngStream(5, 2, 9).random(4)
    assert np.array_equal(a, b)


def test_consuming_one_stream_leaves_siblings_alone():
    root = RngStream(11)
    a = root.child(0)
    a.random(1000)
    got = root.child(1).random(4)
    want = RngStream(11).child(1).random(4)
    assert np.array_equal(got, want)


def test_uniform_bounds_half_open():
    u = RngStream(3).uniform(-0.08, 0.08, 10_000)
    assert u.min() >= -0.08
    assert u.max() < 0.08
    with pytest.raises(ValueError):
        RngStream(3).uniform(1.0, 1.0)


def test_randint_inclusive():
    s = RngStream(9)
    draws = {s.randint(2, 4) for _ in range(200)}
    assert draws == {2, 3, 4}
    with pytest.raises(ValueError):
        s.randint(3, 2)


def test_permutation_is_permutation():
    p = RngStream(21).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_normal_sigma_zero_exact_and_streamless():
    s = RngStream(42, 7)
    z = s.normal(0.0, (5, 3))
    assert z.shape == (5, 3)
    assert np.all(z == 0.0)
    # the zero draw consumed nothing
    after = s.random(4)
    assert np.array_equal(after, RngStream(42, 7).random(4))


def test_normal_block_equals_sequential_for_even_sizes():
    a = RngStream(42, 7).normal(2.0, (12,))
    s = RngStream(42, 7)
    b = np.concatenate([s.normal(2.0, (4,)), s.normal(2.0, (8,))])
    assert np.array_equal(a, b)


def test_normal_matches_scalar_polar_reference():
    # Independent oracle: sample-by-sample polar loop over the same uniform
    # stream, no vectorization, no chunking.
    n = 64
    got = RngStream(8).normal(1.5, (n,))
    src = RngStream(8)
    ref = []
    while len(ref) < n:
        u1 = src.uniform(-1.0, 1.0)
        u2 = src.uniform(-1.0, 1.0)
        s = u1 * u1 + u2 * u2
        if s <= 0.0 or s >= 1.0:
            continue
        f = np.sqrt(-2.0 * np.log(s) / s)
        # sigma scales the unit-variance value (same order as the library)
        ref.append(1.5 * (u1 * f))
        ref.append(1.5 * (u2 * f))
    assert np.array_equal(got, np.array(ref[:n]))


def test_normal_moments():
    z = RngStream(1).normal(0.05, (200_000,))
    assert abs(z.mean()) < 5e-4
    assert abs(z.std() - 0.05) < 5e-4


def test_normal_frozen_values():
    got = RngStream(123).normal(1.0, (4,))
    want = [
        0.38118617201391014,
        -0.09533255533860494,
        2.6748196623712,
        -1.693506282222548,
    ]
    assert np.allclose(got, want, rtol=0, atol=0)


def test_normal_rejects_negative_sigma():
    with pytest.raises(ValueError):
        RngStream(0).normal(-1.0, (3,))


def test_sub_seed_matches_manual_hash():
    got = sub_seed(7, "zoo")
    digest = hashlib.sha256(b"7:zoo").digest()
    want = int.from_bytes(digest[:8], "little") >> 1
    assert got == want == 643336974002671875
    assert sub_seed(7, "zoo") != sub_seed(7, "data")
    assert sub_seed(7, "zoo") != sub_seed(8, "zoo")
