"""Distance-penalty attention masks.

A mask entry is ``-slope * distance(i, j)`` with ``slope >= 0``: zero on the
diagonal and increasingly negative for distant query/key pairs. Distances
are either flattened-index ``|i - j|`` or Manhattan distance on a patch grid
with tokens in raster order.

Masks depend only on geometry and slopes, so distance matrices are cached
and returned read-only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ArgumentError

DEFAULT_SLOPE = 0.1


class MaskVariant(str, enum.Enum):
    NONE = "none"
    LINEAR_1D = "linear1d"
    MANHATTAN_2D = "manhattan2d"


def _check_slope(slope: float) -> float:
    slope = float(slope)
    if not math.isfinite(slope) or slope < 0:
        raise ArgumentError(f"slope must be finite and >= 0, got {slope}")
    return slope


@lru_cache(maxsize=32)
def distance_1d(n: int) -> np.ndarray:
    if n < 1:
        raise ArgumentError(f"token count must be >= 1, got {n}")
    idx = np.arange(n, dtype=np.float64)
    d = np.abs(idx[:, None] - idx[None, :])
    d.flags.writeable = False
    return d


@lru_cache(maxsize=32)
def distance_2d(rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ArgumentError(f"grid must have positive rows and cols, got {rows}x{cols}")
    t = np.arange(rows * cols)
    r = (t // cols).astype(np.float64)
    c = (t % cols).astype(np.float64)
    d = np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])
    d.flags.writeable = False
    return d


def build_bias_1d(n: int, slope: float) -> np.ndarray:
    """Single-head mask ``m[i, j] = -slope * |i - j|``."""
    return (-_check_slope(slope)) * distance_1d(int(n))


def build_bias_2d(rows: int, cols: int, slope: float) -> np.ndarray:
    """Single-head mask with Manhattan distance on a ``rows x cols`` token grid."""
    return (-_check_slope(slope)) * distance_2d(int(rows), int(cols))


def head_slopes(num_heads: int, scheme: str = "uniform", beta: float = DEFAULT_SLOPE) -> tuple[float, ...]:
    """Per-head slopes.

    ``uniform`` repeats ``beta``; ``geometric`` halves it per head,
    ``beta * 2**-h``.
    """
    if isinstance(num_heads, bool) or not isinstance(num_heads, (int, np.integer)) or num_heads < 1:
        raise ArgumentError(f"num_heads must be a positive integer, got {num_heads!r}")
    beta = _check_slope(beta)
    if scheme == "uniform":
        return (beta,) * int(num_heads)
    if scheme == "geometric":
        return tuple(beta * 2.0 ** -h for h in range(int(num_heads)))
    raise ArgumentError(f"unknown slope scheme {scheme!r}; expected 'uniform' or 'geometric'")


@dataclass(frozen=True)
class BiasMaskPolicy:
    variant: MaskVariant = MaskVariant.NONE
    slopes: tuple[float, ...] = field(default_factory=tuple)
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", MaskVariant(self.variant))
        object.__setattr__(self, "slopes", tuple(_check_slope(s) for s in self.slopes))
        if self.grid is not None:
            rows, cols = (int(g) for g in self.grid)
            if rows < 1 or cols < 1:
                raise ArgumentError(f"grid must have positive rows and cols, got {self.grid}")
            object.__setattr__(self, "grid", (rows, cols))
        if self.variant is not MaskVariant.NONE and not self.slopes:
            raise ArgumentError(f"{self.variant.value} mask needs one slope per head")

    @classmethod
    def none(cls) -> "BiasMaskPolicy":
        return cls()

    @classmethod
    def linear_1d(cls, slopes: Sequence[float]) -> "BiasMaskPolicy":
        return cls(MaskVariant.LINEAR_1D, tuple(slopes))

    @classmethod
    def manhattan_2d(cls, slopes: Sequence[float], grid: tuple[int, int] | None = None) -> "BiasMaskPolicy":
        return cls(MaskVariant.MANHATTAN_2D, tuple(slopes), grid)

    @property
    def enabled(self) -> bool:
        return self.variant is not MaskVariant.NONE

    def with_slopes(self, slopes: Sequence[float]) -> "BiasMaskPolicy":
        return BiasMaskPolicy(self.variant, tuple(slopes), self.grid)


def resolve_grid(policy: BiasMaskPolicy, n: int, grid: tuple[int, int] | None = None) -> tuple[int, int] | None:
    """Grid to use for ``n`` tokens; an explicit ``grid`` overrides the policy's."""
    if policy.variant is not MaskVariant.MANHATTAN_2D:
        return None
    g = grid if grid is not None else policy.grid
    if g is None:
        raise ArgumentError("manhattan2d mask needs a (rows, cols) grid")
    rows, cols = int(g[0]), int(g[1])
    if rows * cols != n:
        raise ArgumentError(f"grid {rows}x{cols} does not match token count {n}")
    return rows, cols


def distance_matrix(policy: BiasMaskPolicy, n: int, grid: tuple[int, int] | None = None) -> np.ndarray | None:
    """Unit-slope distance matrix for the policy, or None when masking is off."""
    if policy.variant is MaskVariant.NONE:
        return None
    if policy.variant is MaskVariant.LINEAR_1D:
        return distance_1d(int(n))
    rows, cols = resolve_grid(policy, n, grid)
    return distance_2d(rows, cols)


def build_mask(policy: BiasMaskPolicy, n: int, grid: tuple[int, int] | None = None,
               slopes: Sequence[float] | None = None) -> np.ndarray | None:
    """Stacked per-head masks ``[H, n, n]``, or None for the no-mask policy."""
    dist = distance_matrix(policy, n, grid)
    if dist is None:
        return None
    s = np.asarray(policy.slopes if slopes is None else slopes, dtype=np.float64)
    if s.ndim != 1 or (s < 0).any() or not np.isfinite(s).all():
        raise ArgumentError(f"slopes must be a finite non-negative vector, got {s}")
    return (-s)[:, None, None] * dist[None, :, :]
