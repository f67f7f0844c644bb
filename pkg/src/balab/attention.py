"""Multi-head scaled dot-product attention with distance-penalty masks.

Per head ``h`` the logits are ``lam * (q k^T + mask_h)`` (or
``lam * q k^T + mask_h`` with ``bias_after_scale``), where ``lam`` is
recomputed from the runtime token count on every call. Inputs may carry
leading batch axes: ``q, k, v`` are ``[..., H, n, d_k]``.

Two kernels produce the same logits up to rounding:

* a dense one for short sequences, vectorized over batch and heads;
* a row-blocked one for long sequences that keeps each ``[rows, n]`` score
  block cache-resident. For the 1-D mask it never reads an ``n x n`` mask:
  ``-c|i - j|`` splits into ``c*j - c*i`` left of the diagonal block and
  ``c*i - c*j`` right of it, so the penalty rides along in the score GEMM as
  two extra feature columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bias_mask import BiasMaskPolicy, MaskVariant, distance_matrix, resolve_grid
from .errors import ArgumentError, DimensionError, StateError
from .numerics import Tensor, check_finite, softmax_rows_
from .scaling import ScalingPolicy, ScalingVariant, combined_lambda

# sequences longer than this use the row-blocked kernel
DENSE_MAX_TOKENS = 256
BLOCK_ROWS = 64


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    d_model: int
    n_train: int = 64
    scaling: ScalingVariant = ScalingVariant.VANILLA
    mask: BiasMaskPolicy = field(default_factory=BiasMaskPolicy)
    bias_after_scale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scaling", ScalingVariant(self.scaling))
        if self.num_heads < 1:
            raise ArgumentError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.d_model < 1 or self.d_model % self.num_heads:
            raise ArgumentError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.n_train < 2:
            raise ArgumentError(f"n_train must be >= 2, got {self.n_train}")
        if self.mask.enabled and len(self.mask.slopes) != self.num_heads:
            raise ArgumentError(
                f"mask has {len(self.mask.slopes)} slopes but the config has {self.num_heads} heads")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def scaling_policy(self) -> ScalingPolicy:
        return ScalingPolicy(self.scaling, self.d_k, self.n_train)

    def replace(self, **changes) -> "AttentionConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass
class AttentionOutput:
    output: Tensor                 # [..., n, H * d_k]
    weights: Tensor | None         # [..., H, n, n]; None when not retained
    lam: float
    n_test: int
    slopes: np.ndarray
    grid: tuple[int, int] | None
    cfg: AttentionConfig


@dataclass
class AttentionGradients:
    d_q: Tensor
    d_k_in: Tensor
    d_v: Tensor
    d_slope: np.ndarray            # [H]


def _resolve_slopes(cfg: AttentionConfig, slopes) -> np.ndarray:
    if not cfg.mask.enabled:
        return np.zeros(cfg.num_heads)
    s = np.asarray(cfg.mask.slopes if slopes is None else slopes, dtype=np.float64)
    if s.shape != (cfg.num_heads,):
        raise ArgumentError(f"expected {cfg.num_heads} slopes, got shape {s.shape}")
    if not np.isfinite(s).all() or (s < 0).any():
        raise ArgumentError(f"slopes must be finite and >= 0, got {s}")
    return s


def _check_qkv(q, k, v, cfg: AttentionConfig):
    q, k, v = (np.asarray(t) for t in (q, k, v))
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim < 3:
            raise DimensionError(f"{name} must be [..., H, n, d_k], got shape {t.shape}")
        if not np.issubdtype(t.dtype, np.floating):
            raise DimensionError(f"{name} must be floating point, got {t.dtype}")
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-3] != cfg.num_heads:
        raise DimensionError(f"inputs have {q.shape[-3]} heads, config expects {cfg.num_heads}")
    if q.shape[-1] != cfg.d_k:
        raise DimensionError(f"inputs have d_k={q.shape[-1]}, config expects {cfg.d_k}")
    if q.shape[-2] < 1:
        raise DimensionError("need at least one token")
    return q, k, v


def _mask_coefficients(cfg: AttentionConfig, lam: float, slopes: np.ndarray) -> np.ndarray:
    """Per-head multiplier of the distance matrix inside the logits."""
    return -slopes * lam if not cfg.bias_after_scale else -slopes


def attention_forward(q, k, v, cfg: AttentionConfig, n_test: int | None = None, *,
                      slopes: Sequence[float] | None = None, grid: tuple[int, int] | None = None,
                      keep_weights: bool = True) -> AttentionOutput:
    """Scaled, masked attention over ``n`` tokens.

    ``n_test`` defaults to the actual token count and only affects
    LengthAware scaling. ``slopes`` overrides the config's slopes (used when
    they are trained); ``grid`` supplies the patch grid for the 2-D mask.
    """
    q, k, v = _check_qkv(q, k, v, cfg)
    n = q.shape[-2]
    n_test = n if n_test is None else int(n_test)
    if cfg.scaling is ScalingVariant.LENGTH_AWARE and n_test < 2:
        raise ArgumentError(f"LengthAware scaling needs n_test >= 2, got {n_test}")
    lam = combined_lambda(cfg.scaling_policy, n_test)
    s = _resolve_slopes(cfg, slopes)
    grid = resolve_grid(cfg.mask, n, grid)
    coef = _mask_coefficients(cfg, lam, s)
    dtype = np.result_type(q.dtype, k.dtype, v.dtype)

    if n <= DENSE_MAX_TOKENS:
        weights, heads = _dense_kernel(q, k, v, cfg, lam, coef, n, grid, dtype)
    else:
        weights, heads = _blocked_kernel(q, k, v, cfg, lam, coef, n, grid, dtype, keep_weights)
    out = np.swapaxes(heads, -3, -2).reshape(*heads.shape[:-3], n, cfg.d_model)
    check_finite(out, "attention output")
    return AttentionOutput(out, weights if keep_weights else None, lam, n_test, s, grid, cfg)


def _dense_kernel(q, k, v, cfg, lam, coef, n, grid, dtype):
    logits = (q * dtype.type(lam)) @ np.swapaxes(k, -1, -2)
    dist = distance_matrix(cfg.mask, n, grid)
    if dist is not None:
        logits += (coef[:, None, None] * dist).astype(dtype, copy=False)
    weights = softmax_rows_(logits)
    return weights, weights @ v


def _blocked_kernel(q, k, v, cfg, lam, coef, n, grid, dtype, keep_weights):
    lead = q.shape[:-3]
    H, d_k = cfg.num_heads, cfg.d_k
    qf = q.reshape(-1, H, n, d_k)
    kf = k.reshape(-1, H, n, d_k)
    vf = v.reshape(-1, H, n, d_k)
    heads = np.empty((qf.shape[0], H, n, d_k), dtype=dtype)
    weights = np.empty((qf.shape[0], H, n, n), dtype=dtype) if keep_weights else None
    scratch = None if keep_weights else np.empty((BLOCK_ROWS, n), dtype=dtype)
    # a one-row grid is the 1-D distance, so it takes the same path and matches bitwise
    linear = cfg.mask.variant is MaskVariant.LINEAR_1D or (grid is not None and grid[0] == 1)
    # the fused path never reads the full n x n distance matrix
    dist = None if linear else distance_matrix(cfg.mask, n, grid)
    idx = np.arange(n, dtype=dtype)
    lam_t = dtype.type(lam)

    for b in range(qf.shape[0]):
        for h in range(H):
            qs = qf[b, h] * lam_t
            c = dtype.type(coef[h])
            fused = cfg.mask.enabled and linear and c != 0
            kt = None if fused else np.ascontiguousarray(kf[b, h].T)
            if fused:
                ones = np.ones((n, 1), dtype=dtype)
                q_left = np.hstack([qs, (c * idx)[:, None], ones])
                q_right = np.hstack([qs, (-c * idx)[:, None], ones])
                k_left = np.ascontiguousarray(np.hstack([kf[b, h], ones, (-c * idx)[:, None]]).T)
                k_right = np.ascontiguousarray(np.hstack([kf[b, h], ones, (c * idx)[:, None]]).T)
                # the right-hand form is off by 2c(i - j) below the diagonal; this is shift-invariant
                a = np.arange(BLOCK_ROWS, dtype=dtype)
                diag_fix = (2 * c) * np.maximum(a[:, None] - a[None, :], 0)
            for i0 in range(0, n, BLOCK_ROWS):
                i1 = min(i0 + BLOCK_ROWS, n)
                blk = weights[b, h, i0:i1] if keep_weights else scratch[: i1 - i0]
                if fused:
                    if i0:
                        np.matmul(q_left[i0:i1], k_left[:, :i0], out=blk[:, :i0])
                    np.matmul(q_right[i0:i1], k_right[:, i0:], out=blk[:, i0:])
                    m = i1 - i0
                    blk[:, i0:i1] += diag_fix[:m, :m]
                else:
                    np.matmul(qs[i0:i1], kt, out=blk)
                    if dist is not None:
                        blk += c * dist[i0:i1]
                softmax_rows_(blk)
                np.matmul(blk, vf[b, h], out=heads[b, h, i0:i1])

    heads = heads.reshape(*lead, H, n, d_k)
    if keep_weights:
        weights = weights.reshape(*lead, H, n, n)
    return weights, heads


def attention_backward(q, k, v, fwd: AttentionOutput, upstream, cfg: AttentionConfig | None = None,
                       *, train_slopes: bool = True) -> AttentionGradients:
    """Exact gradients of the forward map given per-head upstream ``[..., H, n, d_k]``.

    ``d_slope`` is zero when the mask is off or ``train_slopes`` is False.
    """
    if cfg is not None and cfg != fwd.cfg:
        raise StateError("saved attention weights were produced under a different config")
    cfg = fwd.cfg
    if fwd.weights is None:
        raise StateError("forward pass did not retain attention weights")
    q, k, v = _check_qkv(q, k, v, cfg)
    a = fwd.weights
    n = q.shape[-2]
    if a.shape != q.shape[:-1] + (n,):
        raise StateError(f"saved weights {a.shape} do not match inputs {q.shape}")
    g = np.asarray(upstream)
    if g.shape != v.shape:
        raise DimensionError(f"upstream shape {g.shape} does not match per-head output {v.shape}")

    d_v = np.swapaxes(a, -1, -2) @ g
    d_a = g @ np.swapaxes(v, -1, -2)
    d_logits = a * (d_a - np.sum(d_a * a, axis=-1, keepdims=True))
    d_scores = d_logits * fwd.lam
    d_q = d_scores @ k
    d_k_in = np.swapaxes(d_scores, -1, -2) @ q

    d_slope = np.zeros(cfg.num_heads)
    dist = distance_matrix(cfg.mask, n, fwd.grid)
    if dist is not None and train_slopes:
        per_head = np.einsum("...hij,ij->...h", d_logits, dist)
        per_head = per_head.reshape(-1, cfg.num_heads).sum(axis=0)
        factor = 1.0 if cfg.bias_after_scale else fwd.lam
        d_slope = -factor * per_head
    return AttentionGradients(d_q, d_k_in, d_v, d_slope)


@dataclass
class MHAWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class MHACache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: AttentionOutput
    weights: MHAWeights


def _split_heads(t: np.ndarray, num_heads: int) -> np.ndarray:
    *lead, n, d = t.shape
    return np.swapaxes(t.reshape(*lead, n, num_heads, d // num_heads), -3, -2)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    *lead, h, n, d_k = t.shape
    return np.swapaxes(t, -3, -2).reshape(*lead, n, h * d_k)


def _check_mha(x, w: MHAWeights, cfg: AttentionConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] != cfg.d_model:
        raise DimensionError(f"x must be [..., n, {cfg.d_model}], got shape {x.shape}")
    for name, m in w.arrays().items():
        if m.shape != (cfg.d_model, cfg.d_model):
            raise DimensionError(f"{name} must be {cfg.d_model}x{cfg.d_model}, got {m.shape}")
    return x


def mha_forward_cached(x, w: MHAWeights, cfg: AttentionConfig, n_test: int | None = None, *,
                       slopes=None, grid=None, keep_weights: bool = True) -> tuple[np.ndarray, MHACache]:
    x = _check_mha(x, w, cfg)
    q = _split_heads(x @ w.w_q, cfg.num_heads)
    k = _split_heads(x @ w.w_k, cfg.num_heads)
    v = _split_heads(x @ w.w_v, cfg.num_heads)
    attn = attention_forward(q, k, v, cfg, n_test, slopes=slopes, grid=grid, keep_weights=keep_weights)
    y = attn.output @ w.w_o
    return y, MHACache(x, q, k, v, attn, w)


def mha_forward(x, w: MHAWeights, cfg: AttentionConfig, n_test: int | None = None, *,
                slopes=None, grid=None) -> np.ndarray:
    """Project ``x [..., n, d_model]`` to heads, attend, and apply the output projection."""
    y, _ = mha_forward_cached(x, w, cfg, n_test, slopes=slopes, grid=grid, keep_weights=False)
    return y


def mha_backward(cache: MHACache, d_y, *, train_slopes: bool = True):
    """Returns ``(d_x, MHAWeights of gradients, d_slope)``."""
    w, attn = cache.weights, cache.attn
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    concat = attn.output.reshape(-1, attn.output.shape[-1])
    d_y = np.asarray(d_y)
    d_y2 = d_y.reshape(-1, d_y.shape[-1])
    d_w_o = concat.T @ d_y2
    d_concat = (d_y2 @ w.w_o.T).reshape(attn.output.shape)
    grads = attention_backward(cache.q, cache.k, cache.v, attn, _split_heads(d_concat, attn.cfg.num_heads),
                               train_slopes=train_slopes)
    d_q = _merge_heads(grads.d_q).reshape(-1, x2.shape[1])
    d_k = _merge_heads(grads.d_k_in).reshape(-1, x2.shape[1])
    d_v = _merge_heads(grads.d_v).reshape(-1, x2.shape[1])
    d_x = d_q @ w.w_q.T + d_k @ w.w_k.T + d_v @ w.w_v.T
    dw = MHAWeights(x2.T @ d_q, x2.T @ d_k, x2.T @ d_v, d_w_o)
    return d_x.reshape(cache.x.shape), dw, grads.d_slope
