"""Per-token binary classifier on top of the encoder, trained by plain gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoder import (EncoderConfig, EncoderWeights, encoder_backward, encoder_forward,
                       encoder_forward_cached, zero_like)
from ..errors import NumericError

DEFAULT_LR = 1e-2


@dataclass
class TokenClassifier:
    encoder: EncoderWeights
    head_w: np.ndarray
    head_b: float = 0.0

    @classmethod
    def zero_head(cls, encoder: EncoderWeights) -> "TokenClassifier":
        return cls(encoder, np.zeros(encoder.patch_proj.shape[1]), 0.0)

    def copy(self) -> "TokenClassifier":
        return TokenClassifier(self.encoder.copy(), self.head_w.copy(), float(self.head_b))

    def slopes(self) -> np.ndarray:
        return np.stack([layer.slopes for layer in self.encoder.layers])

    def set_slopes(self, slopes) -> None:
        slopes = np.asarray(slopes, dtype=np.float64)
        for layer, s in zip(self.encoder.layers, np.broadcast_to(slopes, (len(self.encoder.layers), slopes.shape[-1]))):
            layer.slopes = s.copy()


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def evaluate_loss(model: TokenClassifier, cfg: EncoderConfig, images, labels) -> float:
    tokens = encoder_forward(images, model.encoder, cfg)
    return bce_with_logits(tokens @ model.head_w + model.head_b, labels)


def loss_and_grads(model: TokenClassifier, cfg: EncoderConfig, images, labels, *, train_slopes: bool = True):
    """Mean per-token BCE and its gradients as ``(loss, encoder_grads, d_head_w, d_head_b)``."""
    tokens, cache = encoder_forward_cached(images, model.encoder, cfg)
    z = tokens @ model.head_w + model.head_b
    loss = bce_with_logits(z, labels)
    dz = (_sigmoid(z) - labels) / z.size
    d_w = np.tensordot(dz, tokens, axes=(list(range(dz.ndim)), list(range(dz.ndim))))
    d_b = float(dz.sum())
    d_tokens = dz[..., None] * model.head_w
    grads = encoder_backward(cache, d_tokens, train_slopes=train_slopes)
    return loss, grads, d_w, d_b


@dataclass
class TrainResult:
    model: TokenClassifier
    losses: list[float] = field(default_factory=list)


def train(model: TokenClassifier, cfg: EncoderConfig, images, labels, epochs: int, lr: float = DEFAULT_LR, *,
          train_weights: bool = True, train_slopes: bool = False, train_head: bool | None = None) -> TrainResult:
    """Full-batch gradient descent with a fixed step; slopes are clamped at zero after every step.

    ``train_weights`` covers the encoder and the head; ``train_head`` can
    keep the head trainable on an otherwise frozen encoder.

    ``losses[e]`` is the training loss before step ``e``, plus the final loss at the end.
    """
    model = model.copy()
    train_slopes = train_slopes and cfg.attention.mask.enabled
    train_head = train_weights if train_head is None else train_head
    losses = []
    for _ in range(epochs):
        loss, grads, d_w, d_b = loss_and_grads(model, cfg, images, labels, train_slopes=train_slopes)
        if not np.isfinite(loss):
            raise NumericError("training loss became non-finite")
        losses.append(loss)
        if train_weights:
            params, g = model.encoder.arrays(), grads.arrays()
            for name, p in params.items():
                if not name.endswith(".slopes"):
                    p -= lr * g[name]
        if train_head:
            model.head_w -= lr * d_w
            model.head_b -= lr * d_b
        if train_slopes:
            for layer, gl in zip(model.encoder.layers, grads.layers):
                layer.slopes = np.maximum(layer.slopes - lr * gl.slopes, 0.0)
    losses.append(evaluate_loss(model, cfg, images, labels))
    return TrainResult(model, losses)


__all__ = ["TokenClassifier", "TrainResult", "bce_with_logits", "evaluate_loss", "loss_and_grads", "train",
           "zero_like", "DEFAULT_LR"]
