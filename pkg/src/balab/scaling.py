"""Attention logit scaling policies and the q.k moment check.

Token counts are always patch counts, never pixels. The length factor is
applied as-is when the test length is shorter than the training length
(it then drops below 1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .numerics import Rng, mean_and_variance

MIN_MOMENT_SAMPLES = 1000
_MOMENT_CHUNK = 1 << 15


class ScalingVariant(str, enum.Enum):
    VANILLA = "vanilla"
    LENGTH_AWARE = "length_aware"


def _check_int(name: str, value, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ArgumentError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ArgumentError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def lambda_d(d_k: int) -> float:
    """Dimension factor ``1 / sqrt(d_k)``."""
    d_k = _check_int("d_k", d_k, 1)
    return 1.0 / math.sqrt(d_k)


def lambda_n(n_train: int, n_test: int) -> float:
    """Length factor ``log_{n_train}(n_test)``."""
    n_train = _check_int("n_train", n_train, 2)
    n_test = _check_int("n_test", n_test, 2)
    if n_train == n_test:
        return 1.0
    return math.log(n_test) / math.log(n_train)


@dataclass(frozen=True)
class ScalingPolicy:
    variant: ScalingVariant
    d_k: int
    n_train: int = 2

    def __post_init__(self):
        object.__setattr__(self, "variant", ScalingVariant(self.variant))
        _check_int("d_k", self.d_k, 1)
        if self.variant is ScalingVariant.LENGTH_AWARE:
            _check_int("n_train", self.n_train, 2)

    @classmethod
    def vanilla(cls, d_k: int) -> "ScalingPolicy":
        return cls(ScalingVariant.VANILLA, d_k)

    @classmethod
    def length_aware(cls, d_k: int, n_train: int) -> "ScalingPolicy":
        return cls(ScalingVariant.LENGTH_AWARE, d_k, n_train)


def combined_lambda(policy: ScalingPolicy, n_test: int | None = None) -> float:
    """Logit multiplier for a forward pass over ``n_test`` tokens.

    Vanilla ignores ``n_test``; LengthAware returns
    ``log_{n_train}(n_test) / sqrt(d_k)``.
    """
    base = lambda_d(policy.d_k)
    if policy.variant is ScalingVariant.VANILLA:
        return base
    if n_test is None:
        raise ArgumentError("LengthAware scaling needs the runtime token count n_test")
    return base * lambda_n(policy.n_train, n_test)


@dataclass(frozen=True)
class MomentReport:
    d_k: int
    samples: int
    mean_qk: float
    var_qk: float
    # share of |q.k| <= 3 sqrt(d_k)
    frac_within_3sd: float


def qk_dot_samples(d_k: int, samples: int, rng: Rng) -> np.ndarray:
    """Dot products of ``samples`` independent standard-normal (q, k) pairs.

    Drawn in fixed-size chunks, each from its own substream, so the values
    do not depend on how chunks are scheduled.
    """
    d_k = _check_int("d_k", d_k, 1)
    samples = _check_int("samples", samples, 1)
    out = np.empty(samples)
    for c, start in enumerate(range(0, samples, _MOMENT_CHUNK)):
        m = min(_MOMENT_CHUNK, samples - start)
        g = rng.substream(c).generator()
        q = g.standard_normal((m, d_k))
        k = g.standard_normal((m, d_k))
        out[start:start + m] = np.einsum("ij,ij->i", q, k)
    return out


def qk_moment_estimate(d_k: int, samples: int, rng: Rng) -> MomentReport:
    samples = _check_int("samples", samples, MIN_MOMENT_SAMPLES)
    dots = qk_dot_samples(d_k, samples, rng)
    mean, var = mean_and_variance(dots)
    within = float(np.mean(np.abs(dots) <= 3.0 * math.sqrt(d_k)))
    return MomentReport(d_k=d_k, samples=samples, mean_qk=mean, var_qk=var, frac_within_3sd=within)
