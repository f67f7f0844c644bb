"""Procedural toy segmentation: bright discs on a noisy background.

Blob sizes are fixed in pixels and blob count scales with image area, so a
larger image is the same texture over more patch tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ArgumentError
from ..numerics import Rng


@dataclass(frozen=True)
class BlobTask:
    patch_size: int = 16
    channels: int = 1
    # expected blob centres per patch token
    density: float = 0.12
    # disc radius range, in patches
    radius: tuple[float, float] = (0.6, 1.6)
    background: float = 0.35
    foreground: float = 0.65
    noise: float = 0.15
    # "patch": label from the token's own coverage; "neighborhood": from its 3x3 neighbourhood
    label_mode: str = "patch"

    def __post_init__(self):
        if self.label_mode not in ("patch", "neighborhood"):
            raise ArgumentError(f"label_mode must be 'patch' or 'neighborhood', got {self.label_mode!r}")
        lo, hi = self.radius
        if not 0 < lo <= hi:
            raise ArgumentError(f"bad radius range {self.radius}")
        if self.density <= 0 or self.noise < 0:
            raise ArgumentError("density must be > 0 and noise >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius"] = list(self.radius)
        return d

    def side_for_tokens(self, n_tokens: int) -> int:
        """Pixel side of a square image holding ``n_tokens`` patches."""
        g = math.isqrt(int(n_tokens))
        if g * g != n_tokens or g < 1:
            raise ArgumentError(f"token count {n_tokens} is not a perfect square")
        return g * self.patch_size

    def generate(self, rng: Rng, side: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        """``count`` images ``[count, side, side, c]`` and labels ``[count, n]`` in {0, 1}.

        Image ``i`` comes from substream ``i``.
        """
        p = self.patch_size
        if side < p or side % p:
            raise ArgumentError(f"image side {side} is not a multiple of patch size {p}")
        if count < 1:
            raise ArgumentError(f"count must be >= 1, got {count}")
        g = side // p
        images = np.empty((count, side, side, self.channels))
        labels = np.empty((count, g * g))
        yy, xx = np.mgrid[0:side, 0:side] + 0.5
        for i in range(count):
            gen = rng.substream(i).generator()
            # centres cover a margin beyond the border so coverage statistics don't depend on side
            margin = self.radius[1] * p
            span = side + 2 * margin
            blobs = gen.poisson(self.density * (span / p) ** 2)
            cx = gen.uniform(-margin, side + margin, blobs)
            cy = gen.uniform(-margin, side + margin, blobs)
            r = gen.uniform(*self.radius, blobs) * p
            inside = np.zeros((side, side), dtype=bool)
            for x0, y0, r0 in zip(cx, cy, r):
                inside |= (xx - x0) ** 2 + (yy - y0) ** 2 <= r0 * r0
            base = np.where(inside, self.foreground, self.background)
            noisy = base[..., None] + self.noise * gen.standard_normal((side, side, self.channels))
            images[i] = np.clip(noisy, 0.0, 1.0)
            cover = inside.reshape(g, p, g, p).mean(axis=(1, 3))
            if self.label_mode == "neighborhood":
                cover = _box_mean(cover)
            labels[i] = (cover > 0.5).reshape(-1)
        return images, labels


def _box_mean(a: np.ndarray) -> np.ndarray:
    """3x3 mean with the window truncated at the border."""
    pad = np.pad(a, 1)
    ones = np.pad(np.ones_like(a), 1)
    s = sum(pad[i:i + a.shape[0], j:j + a.shape[1]] for i in range(3) for j in range(3))
    c = sum(ones[i:i + a.shape[0], j:j + a.shape[1]] for i in range(3) for j in range(3))
    return s / c
