import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from balab.errors import ArgumentError, DimensionError, NumericError
from balab.numerics import (Rng, as_tensor, entropy, gaussian_sample, matmul, mean_and_variance, resolve_dtype,
                            stable_softmax)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_row_times_column(self):
        assert np.array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])

    def test_hand_computed(self):
        got = matmul([[1.0, 0.0], [0.0, 2.0]], [[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(got, [[5.0, 6.0], [14.0, 16.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_rank_checked(self):
        with pytest.raises(DimensionError):
            matmul(np.ones(3), np.ones((3, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            matmul([[np.nan]], [[1.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_associative(self, m, k, l, n, seed):
        g = np.random.default_rng(seed)
        a, b, c = g.standard_normal((m, k)), g.standard_normal((k, l)), g.standard_normal((l, n))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        scale = np.abs(a).sum() * np.abs(b).sum() * np.abs(c).sum()
        assert np.abs(left - right).max() <= 1e-9 * scale

    def test_repeatable(self):
        g = np.random.default_rng(3)
        a, b = g.standard_normal((40, 30)), g.standard_normal((30, 20))
        assert np.array_equal(matmul(a, b), matmul(a, b))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(stable_softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    @given(finite)
    def test_single_element(self, c):
        assert stable_softmax([c])[0] == 1.0

    def test_known_values(self):
        got = stable_softmax([1.0, 2.0, 3.0])
        assert np.allclose(got, [0.090031, 0.244728, 0.665241], atol=1e-6)

    def test_empty_is_argument_error(self):
        with pytest.raises(ArgumentError):
            stable_softmax([])

    def test_non_finite_is_numeric_error(self):
        with pytest.raises(NumericError):
            stable_softmax([0.0, np.inf])

    def test_large_logits_do_not_overflow(self):
        p = stable_softmax([1000.0, 1000.0])
        assert np.array_equal(p, [0.5, 0.5])

    def test_input_not_modified(self):
        x = np.array([1.0, 2.0])
        stable_softmax(x)
        assert np.array_equal(x, [1.0, 2.0])

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 300), elements=finite))
    def test_sums_to_one(self, x):
        assert abs(stable_softmax(x).sum() - 1.0) <= 1e-12

    def test_sums_to_one_long(self):
        x = np.random.default_rng(0).standard_normal(100_000) * 10
        assert abs(stable_softmax(x).sum() - 1.0) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 50), elements=finite), st.floats(-100, 100))
    def test_shift_invariant(self, x, c):
        assert np.abs(stable_softmax(x + c) - stable_softmax(x)).max() <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(2, 50), elements=st.floats(-20, 20), unique=True))
    def test_order_preserving(self, x):
        p = stable_softmax(x)
        i, j = np.argmax(x), np.argmin(x)
        order = np.argsort(x)
        assert p[i] > p[j]
        assert np.all(np.diff(p[order]) >= 0)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 100), elements=finite))
    def test_entropy_within_bounds(self, x):
        h = entropy(stable_softmax(x))
        assert 0.0 <= h <= math.log(x.size)


class TestGaussian:
    def test_zero_std(self):
        assert np.array_equal(gaussian_sample(Rng(1), [3], mean=5.0, std=0.0), [5.0, 5.0, 5.0])

    def test_deterministic(self):
        assert np.array_equal(gaussian_sample(Rng(11), [2, 2]), gaussian_sample(Rng(11), [2, 2]))

    def test_negative_std(self):
        with pytest.raises(ArgumentError):
            gaussian_sample(Rng(0), 3, std=-1.0)

    def test_generator_continues(self):
        g = Rng(2).generator()
        assert not np.array_equal(gaussian_sample(g, 4), gaussian_sample(g, 4))

    def test_law_of_large_numbers(self):
        x = gaussian_sample(Rng(123), 1_000_000)
        mean, var = mean_and_variance(x)
        assert abs(mean) <= 0.01
        assert 0.99 <= var <= 1.01

    def test_float32_mode(self):
        assert gaussian_sample(Rng(0), 3, dtype="float32").dtype == np.float32


class TestRng:
    def test_substreams_differ(self):
        a = Rng(5).substream(0).generator().standard_normal(4)
        b = Rng(5).substream(1).generator().standard_normal(4)
        assert not np.array_equal(a, b)

    def test_path_is_a_value(self):
        assert Rng(5).substream(1, 2) == Rng(5, (1, 2))
        assert Rng(5).substream(1).substream(2) == Rng(5, (1, 2))

    def test_bad_seed(self):
        with pytest.raises(ArgumentError):
            Rng(-1)


class TestEntropy:
    def test_uniform(self):
        assert entropy(np.full(8, 1 / 8)) == pytest.approx(math.log(8), abs=1e-12)
        assert entropy(np.full(8, 1 / 8)) == pytest.approx(2.07944, abs=1e-5)

    def test_one_hot(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_known(self):
        assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-12)

    def test_negative_entry(self):
        with pytest.raises(ArgumentError):
            entropy([1.5, -0.5])

    def test_not_normalised(self):
        with pytest.raises(ArgumentError):
            entropy([0.5, 0.4])


class TestTensor:
    def test_scalar_rejected(self):
        with pytest.raises(DimensionError):
            as_tensor(1.0)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            as_tensor(np.zeros((2, 0)))

    def test_ints_promoted(self):
        assert as_tensor([1, 2]).dtype == np.float64

    def test_float_modes(self):
        assert resolve_dtype("float32") == np.float32
        assert resolve_dtype(None) == np.float64
        with pytest.raises(ArgumentError):
            resolve_dtype("float16")
