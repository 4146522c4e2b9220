#!/usr/bin/env python3
"""
Tests for the dense numeric kernels
"""
import math
import sys
sys.path.insert(0, 'app')

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import ConfigError, NonFiniteError, ShapeError, UndefinedSimilarityError
from tensor_math import apply_rope, cosine_sim, matmul, rms_norm, seeded_rng, silu, softmax_temp


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += float(a[i, k]) * float(b[k, j])
    return out


def test_matmul_identity_and_forced_arithmetic():
    assert np.array_equal(matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), np.array([[3, 4], [5, 6]], dtype=np.float32))
    assert matmul([[1, 2]], [[3], [4]])[0, 0] == 11.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-6, atol=1e-6)


def test_matmul_large_random_relative_error():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    b = rng.standard_normal((64, 64)).astype(np.float32)
    ref = a.astype(np.float64) @ b.astype(np.float64)
    np.testing.assert_allclose(matmul(a, b), ref, rtol=1e-6, atol=1e-5)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_row_independent_of_batch():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((9, 16)).astype(np.float32)
    b = rng.standard_normal((16, 8)).astype(np.float32)
    full = matmul(a, b)
    for i in range(9):
        assert np.array_equal(matmul(a[i:i + 1], b)[0], full[i])


def test_softmax_examples():
    np.testing.assert_allclose(softmax_temp([0, 0, 0], 1.0), [1 / 3] * 3, atol=1e-7)
    assert softmax_temp([5, 1, 1], 0).tolist() == [1.0, 0.0, 0.0]
    z = math.exp(2) + math.exp(4)
    np.testing.assert_allclose(softmax_temp([1, 2], 0.5), [math.exp(2) / z, math.exp(4) / z], rtol=1e-6)


def test_softmax_argmax_tie_takes_lowest_index():
    assert softmax_temp([1.0, 3.0, 3.0], 0).tolist() == [0.0, 1.0, 0.0]


def test_softmax_rejects_bad_input():
    with pytest.raises(ConfigError):
        softmax_temp([1.0, 2.0], -0.1)
    with pytest.raises(NonFiniteError):
        softmax_temp([1.0, np.nan], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=32), st.floats(0.05, 5.0))
def test_softmax_is_a_distribution(logits, temperature):
    p = softmax_temp(logits, temperature)
    assert np.all(p >= 0)
    assert abs(float(p.astype(np.float64).sum()) - 1.0) < 1e-5


def test_rms_norm_examples():
    assert np.array_equal(rms_norm(np.zeros(4), np.ones(4), 1e-5), np.zeros(4, dtype=np.float32))
    out = rms_norm([3.0, 4.0], [1.0, 1.0], 1e-5)
    np.testing.assert_allclose(out, np.array([3.0, 4.0]) / math.sqrt(12.5 + 1e-5), rtol=1e-6)


def test_rms_norm_preserves_cosine():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.standard_normal((2, 24))
        ones = np.ones(24)
        assert abs(cosine_sim(rms_norm(a, ones), rms_norm(b, ones)) - cosine_sim(a, b)) < 1e-5


def test_rms_norm_rejects_width_mismatch():
    with pytest.raises(ShapeError):
        rms_norm(np.ones(4), np.ones(3))


def test_cosine_examples():
    assert cosine_sim([1.0, 2.0], [1.0, 2.0]) == 1.0
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert abs(cosine_sim([1.0, 1.0], [1.0, 0.0]) - 1 / math.sqrt(2)) < 1e-7
    assert cosine_sim([0.0, 0.0], [1.0, 0.0]) == 0.0
    with pytest.raises(UndefinedSimilarityError):
        cosine_sim([0.0, 0.0], [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_cosine_in_range(a, b):
    if not np.any(np.float32(a)) and not np.any(np.float32(b)):
        return
    assert -1.0 <= cosine_sim(a, b) <= 1.0


def test_silu_zero():
    assert np.array_equal(silu(np.zeros(5)), np.zeros(5, dtype=np.float32))


def test_rope_position_zero_is_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 16)).astype(np.float32)
    np.testing.assert_allclose(apply_rope(x, [0], 8), x, atol=0)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 16)).astype(np.float32)
    out = apply_rope(x, [0, 1, 5, 17, 100, 511], 8)
    for head in range(2):
        base = head * 8
        for i in range(4):
            before = np.hypot(x[:, base + i].astype(np.float64), x[:, base + i + 4].astype(np.float64))
            after = np.hypot(out[:, base + i].astype(np.float64), out[:, base + i + 4].astype(np.float64))
            np.testing.assert_allclose(after, before, rtol=1e-6, atol=1e-6)


def test_rope_equal_positions_equal_outputs():
    x = np.tile(np.arange(8, dtype=np.float32), (2, 1))
    out = apply_rope(x, [3, 3], 8)
    assert np.array_equal(out[0], out[1])


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ConfigError):
        apply_rope(np.ones((1, 6)), [0], 3)


def test_seeded_rng_streams_repeat_per_seed():
    assert isinstance(seeded_rng(7).bit_generator, np.random.PCG64)
    assert np.array_equal(seeded_rng(7).random(8), seeded_rng(7).random(8))
    assert not np.array_equal(seeded_rng(7).random(8), seeded_rng(8).random(8))
    assert seeded_rng(2 ** 64 - 1).integers(0, 10) in range(10)
