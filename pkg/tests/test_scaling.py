import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from balab.errors import ArgumentError
from balab.numerics import Rng
from balab.scaling import (ScalingPolicy, ScalingVariant, combined_lambda, lambda_d, lambda_n, qk_dot_samples,
                           qk_moment_estimate)

lengths = st.integers(2, 10**7)


def test_lambda_d_values():
    assert lambda_d(1) == 1.0
    assert lambda_d(64) == 0.125
    assert lambda_d(4) == 0.5


def test_lambda_d_zero():
    with pytest.raises(ArgumentError):
        lambda_d(0)


def test_lambda_n_values():
    assert lambda_n(4096, 4096) == 1.0
    assert lambda_n(64, 4096) == pytest.approx(2.0, abs=1e-15)
    assert lambda_n(4096, 16384) == pytest.approx(7 / 6, abs=1e-12)


@pytest.mark.parametrize("a,b", [(1, 4), (4, 1), (0, 10)])
def test_lambda_n_degenerate_lengths(a, b):
    with pytest.raises(ArgumentError):
        lambda_n(a, b)


def test_lambda_n_below_one_not_clamped():
    assert lambda_n(256, 16) == pytest.approx(0.5)


@given(lengths)
def test_lambda_n_identity(n):
    assert lambda_n(n, n) == 1.0


@given(lengths, lengths, lengths)
def test_lambda_n_chain_rule(a, b, c):
    assert lambda_n(a, b) * lambda_n(b, c) == pytest.approx(lambda_n(a, c), abs=1e-12, rel=1e-12)


def test_combined_lambda_values():
    la = ScalingPolicy.length_aware(64, 4096)
    assert combined_lambda(la, 4096) == 0.125
    assert combined_lambda(la, 16384) == pytest.approx(7 / 48, abs=1e-12)
    van = ScalingPolicy.vanilla(64)
    assert combined_lambda(van, 17) == combined_lambda(van, 10**6) == combined_lambda(van) == 0.125


def test_length_aware_needs_n_test():
    with pytest.raises(ArgumentError):
        combined_lambda(ScalingPolicy.length_aware(16, 64))


def test_policy_from_string():
    assert ScalingPolicy("length_aware", 8, 16).variant is ScalingVariant.LENGTH_AWARE
    with pytest.raises(ValueError):
        ScalingPolicy("quadratic", 8)


@given(st.integers(1, 1000), st.integers(2, 10**5), st.integers(2, 10**5))
def test_decreasing_in_d_k(d_k, n_train, n_test):
    a = combined_lambda(ScalingPolicy.length_aware(d_k, n_train), n_test)
    b = combined_lambda(ScalingPolicy.length_aware(d_k + 1, n_train), n_test)
    assert b < a


@given(st.integers(1, 1000), st.integers(2, 10**5), st.integers(2, 10**5))
def test_increasing_in_n_test(d_k, n_train, n_test):
    p = ScalingPolicy.length_aware(d_k, n_train)
    assert combined_lambda(p, n_test + 1) > combined_lambda(p, n_test)


def test_moment_sample_minimum():
    with pytest.raises(ArgumentError):
        qk_moment_estimate(4, 999, Rng(0))


def test_moments_d1():
    r = qk_moment_estimate(1, 1_000_000, Rng(0))
    assert abs(r.mean_qk) <= 0.01
    assert 0.97 <= r.var_qk <= 1.03


def test_moments_d64():
    r = qk_moment_estimate(64, 1_000_000, Rng(0))
    assert abs(r.mean_qk) <= 3 * math.sqrt(64 / 1e6)
    assert 62 <= r.var_qk <= 66
    assert r.frac_within_3sd >= 0.99


def test_moment_error_shrinks_with_samples():
    # median over seeds of |var - d_k| at 4k vs 64k samples
    def err(samples):
        errs = sorted(abs(qk_moment_estimate(16, samples, Rng(s)).var_qk - 16) for s in range(15))
        return errs[7]
    assert err(64_000) < err(4_000)


def test_whole_chunks_are_stable_prefixes():
    chunk = 1 << 15
    long = qk_dot_samples(8, chunk + 5000, Rng(3))
    short = qk_dot_samples(8, chunk, Rng(3))
    assert (long[:chunk] == short).all()
