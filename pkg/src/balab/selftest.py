"""Fast invariant checks that run without pytest (``ba-lab selftest``)."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .attention import AttentionConfig, attention_backward, attention_forward
from .bias_mask import BiasMaskPolicy, build_bias_1d, build_bias_2d
from .numerics import Rng, entropy, stable_softmax
from .scaling import ScalingPolicy, ScalingVariant, combined_lambda, lambda_n

SELFTEST_COLUMNS = ("check", "passed", "detail")


def _qkv(h, n, d, seed=0):
    g = Rng(seed).generator()
    return tuple(g.standard_normal((h, n, d)) for _ in range(3))


def _lambda_exact():
    got = combined_lambda(ScalingPolicy.length_aware(64, 4096), 16384)
    return abs(got - 7 / 48) <= 1e-12, repr(got)


def _lambda_identity():
    ns = Rng(1).generator().integers(2, 1 << 20, 50)
    return all(lambda_n(int(n), int(n)) == 1.0 for n in ns), "50 lengths"


def _softmax_uniform():
    n = 37
    h = entropy(stable_softmax(np.zeros(n)))
    return abs(h - math.log(n)) < 1e-12, repr(h)


def _slope_zero_is_nomask():
    q, k, v = _qkv(2, 9, 4)
    base = AttentionConfig(num_heads=2, d_model=8, n_train=4)
    masked = base.replace(mask=BiasMaskPolicy.linear_1d((0.0, 0.0)))
    a = attention_forward(q, k, v, base).output
    b = attention_forward(q, k, v, masked).output
    return np.array_equal(a, b), "n=9"


def _length_aware_at_train_length():
    q, k, v = _qkv(2, 16, 4)
    van = AttentionConfig(num_heads=2, d_model=8, n_train=16)
    la = van.replace(scaling=ScalingVariant.LENGTH_AWARE)
    return np.array_equal(attention_forward(q, k, v, van).output, attention_forward(q, k, v, la).output), "n=16"


def _row_grid_2d_is_1d():
    return np.array_equal(build_bias_2d(1, 11, 0.3), build_bias_1d(11, 0.3)), "1x11 grid"


def _rows_sum_to_one():
    q, k, v = _qkv(3, 12, 4)
    cfg = AttentionConfig(num_heads=3, d_model=12, n_train=4, mask=BiasMaskPolicy.manhattan_2d((0.1, 0.5, 1.0)))
    w = attention_forward(q, k, v, cfg, grid=(3, 4)).weights
    err = float(np.abs(w.sum(-1) - 1.0).max())
    return err < 1e-12, f"max |sum-1| = {err:.1e}"


def _gradient_spot_check():
    q, k, v = _qkv(2, 5, 3, seed=4)
    cfg = AttentionConfig(num_heads=2, d_model=6, n_train=2, scaling=ScalingVariant.LENGTH_AWARE,
                          mask=BiasMaskPolicy.linear_1d((0.2, 0.7)))
    up = Rng(5).generator().standard_normal(q.shape)
    fwd = attention_forward(q, k, v, cfg)
    g = attention_backward(q, k, v, fwd, up, cfg)
    eps = 1e-6
    slopes = np.array(cfg.mask.slopes)
    num = np.empty_like(slopes)
    for h in range(slopes.size):
        hi, lo = slopes.copy(), slopes.copy()
        hi[h] += eps
        lo[h] -= eps
        f = [np.sum(attention_forward(q, k, v, cfg, slopes=s).output.reshape(q.shape[1], 2, 3).transpose(1, 0, 2)
                    * up) for s in (hi, lo)]
        num[h] = (f[0] - f[1]) / (2 * eps)
    rel = float(np.max(np.abs(num - g.d_slope) / np.maximum(np.abs(num), 1e-8)))
    return rel < 1e-4, f"d_slope rel err {rel:.1e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "lambda_closed_form": _lambda_exact,
    "lambda_n_identity": _lambda_identity,
    "softmax_uniform_entropy": _softmax_uniform,
    "slope_zero_equals_nomask": _slope_zero_is_nomask,
    "length_aware_at_train_length": _length_aware_at_train_length,
    "row_grid_2d_equals_1d": _row_grid_2d_is_1d,
    "attention_rows_normalised": _rows_sum_to_one,
    "slope_gradient_fd": _gradient_spot_check,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, bool(ok), detail))
    return out
