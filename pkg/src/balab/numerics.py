"""Dense-tensor core: products, stable softmax, seeded sampling, statistics.

Tensors are plain numpy arrays. Everything here is a pure function of its
inputs; arrays handed back are fresh allocations.

Random numbers come from :class:`Rng`, a seed plus an integer path. Each
path names an independent Philox stream (counter-based), so a trial's
draws depend only on ``(seed, path)`` and never on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .errors import ArgumentError, DimensionError, NumericError

Tensor = NDArray[np.floating]

DEFAULT_DTYPE = np.float64
FLOAT_MODES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(mode: str | type | np.dtype | None) -> np.dtype:
    if mode is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(mode, str):
        try:
            return np.dtype(FLOAT_MODES[mode])
        except KeyError:
            raise ArgumentError(f"unknown float mode {mode!r}; expected one of {sorted(FLOAT_MODES)}") from None
    dt = np.dtype(mode)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ArgumentError(f"unsupported dtype {dt}")
    return dt


def as_tensor(x, dtype=None, name: str = "tensor") -> Tensor:
    """Convert to a float array and reject empty, zero-sized or non-finite input."""
    arr = np.asarray(x, dtype=resolve_dtype(dtype) if dtype is not None else None)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    if arr.ndim == 0:
        raise DimensionError(f"{name} must have rank >= 1, got a scalar")
    if arr.size == 0:
        raise DimensionError(f"{name} has an empty dimension: shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains NaN or Inf")


def matmul(a, b) -> Tensor:
    """Rank-2 matrix product ``a @ b``.

    Backed by BLAS, whose per-element accumulation order is fixed for a
    given shape, so repeated calls are bit-identical.
    """
    a = as_tensor(a, name="a")
    b = as_tensor(b, name="b")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a @ b
    check_finite(out, "matmul result")
    return out


def softmax_rows_(x: np.ndarray) -> np.ndarray:
    """In-place stable softmax over the last axis; returns ``x``."""
    x -= x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def stable_softmax(logits) -> Tensor:
    """``exp(x - max) / sum(exp(x - max))`` for a rank-1 tensor."""
    x = np.asarray(logits)
    if x.ndim != 1:
        raise DimensionError(f"stable_softmax expects a rank-1 tensor, got shape {x.shape}")
    if x.size == 0:
        raise ArgumentError("stable_softmax of an empty vector")
    x = as_tensor(x, name="logits").copy()
    return softmax_rows_(x)


RngLike = Union["Rng", np.random.Generator]


@dataclass(frozen=True)
class Rng:
    """Seed plus substream path.

    ``generator()`` always starts the stream for this path from the top, so
    an ``Rng`` value is a reproducible recipe rather than mutable state.
    Use :meth:`substream` to derive independent streams per trial.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ArgumentError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(i < 0 for i in self.path):
            raise ArgumentError(f"substream indices must be non-negative, got {self.path}")

    def substream(self, *indices: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def _as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise ArgumentError(f"expected Rng or numpy Generator, got {type(rng).__name__}")


def gaussian_sample(rng: RngLike, shape: Sequence[int] | int, mean: float = 0.0, std: float = 1.0,
                    dtype=None) -> Tensor:
    """I.i.d. normal samples. Passing an :class:`Rng` restarts its stream, so equal inputs give equal output."""
    if not (std >= 0.0) or not math.isfinite(std):
        raise ArgumentError(f"std must be finite and >= 0, got {std}")
    if not math.isfinite(mean):
        raise ArgumentError(f"mean must be finite, got {mean}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if not shape or any(d < 1 for d in shape):
        raise DimensionError(f"shape must contain positive dimensions, got {shape}")
    out = _as_generator(rng).standard_normal(shape)
    out = mean + std * out
    return out.astype(resolve_dtype(dtype), copy=False)


def entropy(probs, atol: float = 1e-6) -> float:
    """Shannon entropy in nats, with ``0 ln 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ArgumentError(f"entropy expects a non-empty rank-1 tensor, got shape {p.shape}")
    check_finite(p, "probs")
    if (p < 0).any():
        raise ArgumentError("entropy: probabilities must be non-negative")
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise ArgumentError(f"entropy: probabilities sum to {total}, not 1")
    return entropy_rows(p)


def entropy_rows(p: np.ndarray) -> np.ndarray | float:
    """Unchecked entropy over the last axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    # rounding can push h an ulp outside [0, ln n]
    h = np.clip(h, 0.0, math.log(p.shape[-1]))
    return float(h) if np.ndim(h) == 0 else h


def mean_and_variance(x) -> tuple[float, float]:
    """Sample mean and unbiased variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ArgumentError("need at least two samples for a variance")
    return float(x.mean()), float(x.var(ddof=1))
