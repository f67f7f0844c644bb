import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from balab.bias_mask import (BiasMaskPolicy, MaskVariant, build_bias_1d, build_bias_2d, build_mask,
                             distance_1d, head_slopes, resolve_grid)
from balab.errors import ArgumentError

slopes = st.floats(0, 10, allow_nan=False)


def test_1d_small():
    want = np.array([[0, -0.1, -0.2], [-0.1, 0, -0.1], [-0.2, -0.1, 0]])
    assert np.allclose(build_bias_1d(3, 0.1), want, atol=1e-15)


@given(st.integers(1, 40))
def test_zero_slope_is_zero(n):
    assert not build_bias_1d(n, 0.0).any()


@given(slopes)
def test_single_token(s):
    assert np.array_equal(build_bias_1d(1, s), [[0.0]])


def test_negative_slope_rejected():
    with pytest.raises(ArgumentError):
        build_bias_1d(4, -0.1)
    with pytest.raises(ArgumentError):
        BiasMaskPolicy.linear_1d((0.1, -1.0))


def test_2d_hand_enumerated():
    want = -np.array([[0, 1, 1, 2], [1, 0, 2, 1], [1, 2, 0, 1], [2, 1, 1, 0]], dtype=float)
    assert np.array_equal(build_bias_2d(2, 2, 1.0), want)


def test_2d_zero_slope():
    assert not build_bias_2d(3, 5, 0.0).any()


def test_2d_bad_grid():
    with pytest.raises(ArgumentError):
        build_bias_2d(0, 3, 0.1)


@given(st.integers(1, 40), slopes)
def test_row_grid_equals_1d(n, s):
    assert np.array_equal(build_bias_2d(1, n, s), build_bias_1d(n, s))


@given(st.integers(1, 6), st.integers(1, 6), slopes)
def test_structure(rows, cols, s):
    for m in (build_bias_1d(rows * cols, s), build_bias_2d(rows, cols, s)):
        assert np.array_equal(m, m.T)
        assert not np.diag(m).any()
        assert (m <= 0).all()


@given(st.integers(2, 30), st.floats(0.01, 5))
def test_monotone_penalty(n, s):
    m = build_bias_1d(n, s)
    d = distance_1d(n)
    for i in range(n):
        order = np.argsort(d[i], kind="stable")
        dist, vals = d[i][order], m[i][order]
        closer = dist[:-1] < dist[1:]
        assert (vals[:-1][closer] > vals[1:][closer]).all()


def test_distance_cache_is_read_only():
    d = distance_1d(5)
    with pytest.raises(ValueError):
        d[0, 1] = 3.0
    assert distance_1d(5) is d


def test_head_slopes():
    assert head_slopes(8) == (0.1,) * 8
    assert head_slopes(3, "geometric", 0.5) == (0.5, 0.25, 0.125)
    assert head_slopes(4, beta=0.0) == (0.0,) * 4


@pytest.mark.parametrize("h", [0, -1, 2.5, True])
def test_head_slopes_bad_count(h):
    with pytest.raises(ArgumentError):
        head_slopes(h)


def test_head_slopes_bad_scheme():
    with pytest.raises(ArgumentError):
        head_slopes(2, "cosine")


def test_policy_requires_slopes():
    with pytest.raises(ArgumentError):
        BiasMaskPolicy(MaskVariant.LINEAR_1D)
    assert not BiasMaskPolicy.none().enabled


def test_build_mask_stacks_heads():
    p = BiasMaskPolicy.manhattan_2d((0.1, 1.0), grid=(2, 3))
    m = build_mask(p, 6)
    assert m.shape == (2, 6, 6)
    assert np.array_equal(m[1], build_bias_2d(2, 3, 1.0))
    assert np.array_equal(m[0], build_bias_2d(2, 3, 0.1))
    assert build_mask(BiasMaskPolicy.none(), 6) is None


def test_grid_must_match_tokens():
    with pytest.raises(ArgumentError):
        resolve_grid(BiasMaskPolicy.manhattan_2d((0.1,), grid=(2, 3)), 7)
    with pytest.raises(ArgumentError):
        resolve_grid(BiasMaskPolicy.manhattan_2d((0.1,)), 4)
