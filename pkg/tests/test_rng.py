"""Noise stream: per-path determinism, chunk invariance, distribution."""

import numpy as np
import pytest
from scipy import stats

from geomflow.rng import NoiseStream


def test_block_shapes():
    s = NoiseStream(1, "task")
    normals, uniforms = s.block(0, 5, 7, 3, uniforms_per_step=1)
    assert normals.shape == (5, 7, 3)
    assert uniforms.shape == (5, 7)
    # identical geometry reproduces; the word layout is part of the stream
    normals2, uniforms2 = s.block(0, 5, 7, 3, uniforms_per_step=1)
    np.testing.assert_array_equal(normals, normals2)
    np.testing.assert_array_equal(uniforms, uniforms2)
    only_normals, none = s.block(0, 5, 7, 3)
    assert none is None
    assert only_normals.shape == (5, 7, 3)


def test_chunk_invariance():
    # a path's noise depends on its absolute index, not on chunk boundaries
    s = NoiseStream(42, "mc", 3)
    whole, wu = s.block(0, 64, 11, 2, uniforms_per_step=1)
    pieces = []
    pu = []
    for lo, hi in ((0, 17), (17, 40), (40, 64)):
        a, b = s.block(lo, hi, 11, 2, uniforms_per_step=1)
        pieces.append(a)
        pu.append(b)
    np.testing.assert_array_equal(whole, np.concatenate(pieces, axis=0))
    np.testing.assert_array_equal(wu, np.concatenate(pu, axis=0))


def test_streams_differ_by_identity():
    a = NoiseStream(1, "alpha").block(0, 3, 5, 2)[0]
    b = NoiseStream(1, "beta").block(0, 3, 5, 2)[0]
    c = NoiseStream(2, "alpha").block(0, 3, 5, 2)[0]
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    again = NoiseStream(1, "alpha").block(0, 3, 5, 2)[0]
    np.testing.assert_array_equal(a, again)


def test_child_streams_are_reproducible_and_distinct():
    parent = NoiseStream(7, "root")
    c1 = parent.child("sub", 0)
    c2 = parent.child("sub", 1)
    assert not np.array_equal(c1.block(0, 2, 4, 1)[0], c2.block(0, 2, 4, 1)[0])
    np.testing.assert_array_equal(
        c1.block(0, 2, 4, 1)[0], NoiseStream(7, "root", "sub", 0).block(0, 2, 4, 1)[0]
    )


def test_normals_distribution():
    s = NoiseStream(11, "dist")
    normals, uniforms = s.block(0, 400, 50, 1, uniforms_per_step=1)
    flat = normals.ravel()
    assert abs(flat.mean()) < 4.0 / np.sqrt(flat.size)
    assert abs(flat.std() - 1.0) < 0.02
    _, p = stats.kstest(flat[:5000], "norm")
    assert p > 1e-3
    u = uniforms.ravel()
    assert u.min() > 0.0 and u.max() < 1.0
    _, pu = stats.kstest(u[:5000], "uniform")
    assert pu > 1e-3


def test_uniform_support_is_open():
    # the bit-shift construction cannot produce exact 0 or 1
    s = NoiseStream(0, "edge")
    _, u = s.block(0, 1000, 10, 0, uniforms_per_step=1)
    assert np.all(u > 0.0) and np.all(u < 1.0)


def test_word_alignment_independent_paths():
    # neighboring paths draw from non-overlapping counter blocks: their
    # noise must be uncorrelated, checked crudely via sample correlation
    s = NoiseStream(3, "corr")
    normals, _ = s.block(0, 2, 4096, 1)
    r = np.corrcoef(normals[0, :, 0], normals[1, :, 0])[0, 1]
    assert abs(r) < 0.08


def test_generator_reproducible():
    s = NoiseStream(5, "aux")
    g1 = s.generator("perm")
    g2 = s.generator("perm")
    np.testing.assert_array_equal(g1.permutation(10), g2.permutation(10))
    g3 = s.generator("other")
    assert not np.array_equal(g1.permutation(10), g3.permutation(10))


def test_empty_range_rejected():
    s = NoiseStream(1)
    with pytest.raises(ValueError):
        s.block(5, 5, 1, 1)
