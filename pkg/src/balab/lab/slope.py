"""Fine-tuning the per-head distance slopes by gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoder import EncoderConfig, init_encoder_weights
from ..errors import ArgumentError
from ..numerics import Rng
from .task import BlobTask
from .train import DEFAULT_LR, TokenClassifier, train

SLOPE_COLUMNS = ("layer", "head", "initial_slope", "final_slope", "loss_initial", "loss_final", "epochs", "seed")


@dataclass
class SlopeTrainingResult:
    initial_slopes: np.ndarray
    slopes: np.ndarray
    losses: list[float] = field(default_factory=list)
    epochs: int = 0
    seed: int = 0

    def rows(self) -> list[tuple]:
        out = []
        for li in range(self.slopes.shape[0]):
            for h in range(self.slopes.shape[1]):
                out.append((li, h, float(self.initial_slopes[li, h]), float(self.slopes[li, h]),
                            self.losses[0], self.losses[-1], self.epochs, self.seed))
        return out

    def to_dict(self) -> dict:
        return {"initial_slopes": self.initial_slopes.tolist(), "slopes": self.slopes.tolist(),
                "losses": list(self.losses), "epochs": self.epochs, "seed": self.seed}


def train_slope(cfg: EncoderConfig, task: BlobTask, epochs: int, seed: int, *, n_train: int | None = None,
                lr: float = DEFAULT_LR, joint: bool = True, train_images: int = 16) -> SlopeTrainingResult:
    """Train the mask slopes on ``task``; ``joint`` also trains the encoder weights.

    The per-token head is always trained: with a freshly zeroed head the
    loss does not depend on the encoder, so slopes alone would never move.

    Slopes start from the config's mask policy and are clamped at zero after
    every step. Data come from substream 0 of ``seed``, weights from 2.
    """
    if not cfg.attention.mask.enabled:
        raise ArgumentError("train_slope needs a Linear1D or Manhattan2D mask; NoMask has no slopes")
    if epochs < 1:
        raise ArgumentError(f"epochs must be >= 1, got {epochs}")
    if lr < 0:
        raise ArgumentError(f"lr must be >= 0, got {lr}")
    n = cfg.attention.n_train if n_train is None else n_train
    root = Rng(seed)
    images, labels = task.generate(root.substream(0), task.side_for_tokens(n), train_images)
    model = TokenClassifier.zero_head(init_encoder_weights(cfg, root.substream(2)))
    initial = model.slopes().copy()
    res = train(model, cfg, images, labels, epochs, lr, train_weights=joint, train_slopes=True, train_head=True)
    return SlopeTrainingResult(initial, res.model.slopes(), res.losses, epochs, seed)
