"""Toy ViT-style image encoder with manual backpropagation.

Pipeline: non-overlapping patches in raster order -> linear projection ->
optional sinusoidal position encoding -> ``num_layers`` pre-norm blocks
(layer norm, masked multi-head attention, residual, layer norm, GELU MLP,
residual) -> final layer norm. Any image side divisible by the patch size
is accepted; the attention scale is recomputed from the actual token count.

Images are ``[h, w, c]`` or batched ``[B, h, w, c]``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, MHACache, MHAWeights, mha_backward, mha_forward_cached
from .bias_mask import BiasMaskPolicy
from .errors import ArgumentError, DimensionError
from .numerics import Rng, as_tensor, check_finite, resolve_dtype
from .scaling import ScalingVariant

LN_EPS = 1e-6
MAGIC = b"BASAM1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(num_heads=4, d_model=64, n_train=64))
    patch_size: int = 16
    in_channels: int = 1
    num_layers: int = 2
    mlp_hidden: int = 128
    pe: str = "sinusoidal"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ArgumentError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.patch_size < 1 or self.in_channels < 1 or self.mlp_hidden < 1:
            raise ArgumentError("patch_size, in_channels and mlp_hidden must be positive")
        if self.pe not in ("sinusoidal", "none"):
            raise ArgumentError(f"pe must be 'sinusoidal' or 'none', got {self.pe!r}")
        if self.pe == "sinusoidal" and self.d_model % 2:
            raise ArgumentError("sinusoidal position encoding needs an even d_model")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def num_heads(self) -> int:
        return self.attention.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def replace(self, **changes) -> "EncoderConfig":
        from dataclasses import replace
        return replace(self, **changes)

    def to_dict(self) -> dict:
        att = self.attention
        return {
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "num_layers": self.num_layers,
            "mlp_hidden": self.mlp_hidden,
            "pe": self.pe,
            "attention": {
                "num_heads": att.num_heads,
                "d_model": att.d_model,
                "n_train": att.n_train,
                "scaling": att.scaling.value,
                "mask": {
                    "variant": att.mask.variant.value,
                    "slopes": list(att.mask.slopes),
                    "grid": list(att.mask.grid) if att.mask.grid else None,
                },
                "bias_after_scale": att.bias_after_scale,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        a = dict(d["attention"])
        m = a.pop("mask", {}) or {}
        mask = BiasMaskPolicy(m.get("variant", "none"), tuple(m.get("slopes", ())),
                              tuple(m["grid"]) if m.get("grid") else None)
        att = AttentionConfig(mask=mask, **a)
        rest = {k: v for k, v in d.items() if k != "attention"}
        return cls(attention=att, **rest)


def image_grid(image: np.ndarray, patch_size: int) -> tuple[int, int]:
    h, w = image.shape[-3], image.shape[-2]
    if h % patch_size or w % patch_size:
        raise ArgumentError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    return h // patch_size, w // patch_size


def patchify(image, patch_size: int) -> np.ndarray:
    """``[..., h, w, c] -> [..., n, p*p*c]`` with tokens in raster order."""
    image = np.asarray(image)
    if image.ndim < 3:
        raise DimensionError(f"image must be [..., h, w, c], got shape {image.shape}")
    rows, cols = image_grid(image, patch_size)
    *lead, h, w, c = image.shape
    p = patch_size
    t = image.reshape(*lead, rows, p, cols, p, c)
    t = np.moveaxis(t, -4, -3)  # [..., rows, cols, p, p, c]
    return t.reshape(*lead, rows * cols, p * p * c)


def unpatchify(tokens: np.ndarray, grid: tuple[int, int], patch_size: int, channels: int) -> np.ndarray:
    *lead, n, _ = tokens.shape
    rows, cols = grid
    p = patch_size
    t = tokens.reshape(*lead, rows, cols, p, p, channels)
    t = np.moveaxis(t, -3, -4)
    return t.reshape(*lead, rows * p, cols * p, channels)


def patch_embed(image, patch_size: int, proj) -> np.ndarray:
    """Flatten non-overlapping patches and project them: ``[..., n, d_model]``."""
    if patch_size < 1:
        raise ArgumentError(f"patch_size must be >= 1, got {patch_size}")
    patches = patchify(image, patch_size)
    proj = np.asarray(proj)
    if proj.ndim != 2 or proj.shape[0] != patches.shape[-1]:
        raise DimensionError(f"projection must have {patches.shape[-1]} rows, got shape {proj.shape}")
    return patches @ proj


def sinusoidal_pe(n: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine position encoding, ``pe[pos, 2i] = sin(pos / 10000^(2i/d))``."""
    if d_model < 2 or d_model % 2:
        raise ArgumentError(f"sinusoidal_pe needs an even d_model, got {d_model}")
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-math.log(10000.0) / d_model))
    pe = np.empty((n, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU; returns ``(y, t)`` where ``t`` feeds :func:`gelu_grad`."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    attn: MHAWeights
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    # per-head slopes; empty when the mask is off
    slopes: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"ln1_g": self.ln1_g, "ln1_b": self.ln1_b}
        out.update({f"attn.{k}": v for k, v in self.attn.arrays().items()})
        out.update({"ln2_g": self.ln2_g, "ln2_b": self.ln2_b, "mlp_w1": self.mlp_w1, "mlp_b1": self.mlp_b1,
                    "mlp_w2": self.mlp_w2, "mlp_b2": self.mlp_b2, "slopes": self.slopes})
        return out


@dataclass
class EncoderWeights:
    patch_proj: np.ndarray
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view sharing memory with the weights."""
        out = {"patch_proj": self.patch_proj}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.arrays().items()})
        out["lnf_g"] = self.lnf_g
        out["lnf_b"] = self.lnf_b
        return out

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "EncoderWeights":
        return EncoderWeights.from_arrays({k: v.copy() for k, v in self.arrays().items()}, len(self.layers))

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], num_layers: int) -> "EncoderWeights":
        layers = []
        for i in range(num_layers):
            p = f"layers.{i}."
            a = {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
            layers.append(LayerWeights(
                a["ln1_g"], a["ln1_b"],
                MHAWeights(a["attn.w_q"], a["attn.w_k"], a["attn.w_v"], a["attn.w_o"]),
                a["ln2_g"], a["ln2_b"], a["mlp_w1"], a["mlp_b1"], a["mlp_w2"], a["mlp_b2"], a["slopes"]))
        return cls(arrays["patch_proj"], layers, arrays["lnf_g"], arrays["lnf_b"])

    def astype(self, dtype) -> "EncoderWeights":
        dt = resolve_dtype(dtype)
        return EncoderWeights.from_arrays({k: v.astype(dt) for k, v in self.arrays().items()}, len(self.layers))


def init_encoder_weights(cfg: EncoderConfig, rng: Rng, dtype=None) -> EncoderWeights:
    """Gaussian weights scaled by ``1/sqrt(fan_in)``; unit layer-norm gains, zero offsets."""
    d, hdim = cfg.d_model, cfg.mlp_hidden
    g = rng.generator()

    def dense(fan_in, fan_out):
        return g.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

    proj = dense(cfg.patch_dim, d)
    layers = []
    slopes = np.asarray(cfg.attention.mask.slopes, dtype=np.float64) if cfg.attention.mask.enabled else np.zeros(0)
    for _ in range(cfg.num_layers):
        attn = MHAWeights(dense(d, d), dense(d, d), dense(d, d), dense(d, d))
        layers.append(LayerWeights(np.ones(d), np.zeros(d), attn, np.ones(d), np.zeros(d),
                                   dense(d, hdim), np.zeros(hdim), dense(hdim, d), np.zeros(d), slopes.copy()))
    w = EncoderWeights(proj, layers, np.ones(d), np.zeros(d))
    return w if dtype is None else w.astype(dtype)


def zero_like(w: EncoderWeights) -> EncoderWeights:
    return EncoderWeights.from_arrays({k: np.zeros_like(v) for k, v in w.arrays().items()}, len(w.layers))


@dataclass
class _LayerCache:
    ln1: tuple
    mha: MHACache
    ln2: tuple
    h1: np.ndarray
    h1_t: np.ndarray
    h1_act: np.ndarray
    ln2_out: np.ndarray


@dataclass
class EncoderCache:
    patches: np.ndarray
    grid: tuple[int, int]
    layers: list[_LayerCache]
    lnf: tuple
    weights: EncoderWeights
    cfg: EncoderConfig


def _check_weights(weights: EncoderWeights, cfg: EncoderConfig):
    if len(weights.layers) != cfg.num_layers:
        raise DimensionError(f"weights have {len(weights.layers)} layers, config expects {cfg.num_layers}")
    if weights.patch_proj.shape != (cfg.patch_dim, cfg.d_model):
        raise DimensionError(f"patch projection must be {cfg.patch_dim}x{cfg.d_model}, got {weights.patch_proj.shape}")
    expected = cfg.num_heads if cfg.attention.mask.enabled else 0
    for i, layer in enumerate(weights.layers):
        if layer.slopes.shape != (expected,):
            raise DimensionError(f"layer {i} has slopes of shape {layer.slopes.shape}, expected ({expected},)")


def encoder_forward_cached(image, weights: EncoderWeights, cfg: EncoderConfig, *, keep_cache: bool = True):
    image = as_tensor(image, name="image")
    if image.shape[-1] != cfg.in_channels:
        raise DimensionError(f"image has {image.shape[-1]} channels, config expects {cfg.in_channels}")
    _check_weights(weights, cfg)
    dtype = weights.patch_proj.dtype
    image = image.astype(dtype, copy=False)
    grid = image_grid(image, cfg.patch_size)
    patches = patchify(image, cfg.patch_size)
    x = patches @ weights.patch_proj
    n = x.shape[-2]
    if cfg.pe == "sinusoidal":
        x = x + sinusoidal_pe(n, cfg.d_model).astype(dtype)
    att = cfg.attention
    layer_caches = []
    for layer in weights.layers:
        slopes = layer.slopes if att.mask.enabled else None
        a_in, ln1 = layer_norm(x, layer.ln1_g, layer.ln1_b)
        a_out, mha_cache = mha_forward_cached(a_in, layer.attn, att, n, slopes=slopes, grid=grid,
                                              keep_weights=keep_cache)
        x = x + a_out
        m_in, ln2 = layer_norm(x, layer.ln2_g, layer.ln2_b)
        h1 = m_in @ layer.mlp_w1 + layer.mlp_b1
        h1_act, h1_t = gelu(h1)
        x = x + (h1_act @ layer.mlp_w2 + layer.mlp_b2)
        if keep_cache:
            layer_caches.append(_LayerCache(ln1, mha_cache, ln2, h1, h1_t, h1_act, m_in))
    out, lnf = layer_norm(x, weights.lnf_g, weights.lnf_b)
    check_finite(out, "encoder output")
    cache = EncoderCache(patches, grid, layer_caches, lnf, weights, cfg) if keep_cache else None
    return out, cache


def encoder_forward(image, weights: EncoderWeights, cfg: EncoderConfig) -> np.ndarray:
    """Encode an image (or batch of images) into ``[..., n, d_model]`` tokens."""
    out, _ = encoder_forward_cached(image, weights, cfg, keep_cache=False)
    return out


def encoder_backward(cache: EncoderCache, d_out, *, train_slopes: bool = True) -> EncoderWeights:
    """Gradients of a scalar loss w.r.t. every weight, given ``d loss / d output``."""
    w, cfg = cache.weights, cache.cfg
    grads = zero_like(w)
    dx, grads.lnf_g[...], grads.lnf_b[...] = layer_norm_backward(np.asarray(d_out), cache.lnf)
    d = cfg.d_model
    for i in reversed(range(cfg.num_layers)):
        layer, lc, g = w.layers[i], cache.layers[i], grads.layers[i]
        # MLP branch
        h_act2 = lc.h1_act.reshape(-1, lc.h1_act.shape[-1])
        dx2 = dx.reshape(-1, d)
        g.mlp_w2[...] = h_act2.T @ dx2
        g.mlp_b2[...] = dx2.sum(axis=0)
        dh = (dx @ layer.mlp_w2.T) * gelu_grad(lc.h1, lc.h1_t)
        dh2 = dh.reshape(-1, dh.shape[-1])
        g.mlp_w1[...] = lc.ln2_out.reshape(-1, d).T @ dh2
        g.mlp_b1[...] = dh2.sum(axis=0)
        dm, g.ln2_g[...], g.ln2_b[...] = layer_norm_backward(dh @ layer.mlp_w1.T, lc.ln2)
        dx = dx + dm
        # attention branch
        da, dmha, dslope = mha_backward(lc.mha, dx, train_slopes=train_slopes)
        g.attn.w_q[...], g.attn.w_k[...], g.attn.w_v[...], g.attn.w_o[...] = dmha.w_q, dmha.w_k, dmha.w_v, dmha.w_o
        if g.slopes.size:
            g.slopes[...] = dslope
        dl, g.ln1_g[...], g.ln1_b[...] = layer_norm_backward(da, lc.ln1)
        dx = dx + dl
    p2 = cache.patches.reshape(-1, cache.patches.shape[-1])
    grads.patch_proj[...] = p2.T @ dx.reshape(-1, d)
    return grads


def save_weights(path, weights: EncoderWeights, cfg: EncoderConfig) -> tuple[Path, Path]:
    """Write the binary container and its JSON config sidecar.

    Layout (all integers little-endian)::

        b"BASAM1"                     magic
        uint32 version, uint32 count  header
        count x (uint16 name_len, name utf-8, uint8 rank, rank x uint32 dim)
        float64 data of every array, in table order, row-major
    """
    path = Path(path)
    arrays = weights.arrays()
    table = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, a in arrays.items():
        b = name.encode("utf-8")
        table.append(struct.pack("<H", len(b)) + b + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    with open(path, "wb") as f:
        f.write(b"".join(table))
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"format": MAGIC.decode(), "version": FORMAT_VERSION,
                                   "encoder_config": cfg.to_dict()}, indent=2, sort_keys=True))
    return path, sidecar


def load_weights(path) -> tuple[EncoderWeights, EncoderConfig]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:6] != MAGIC:
        raise ArgumentError(f"{path} is not a BASAM1 weights file")
    version, count = struct.unpack_from("<II", blob, 6)
    if version != FORMAT_VERSION:
        raise ArgumentError(f"{path}: unsupported format version {version}")
    off = 14
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(blob):
        raise ArgumentError(f"{path}: {len(blob) - off} trailing bytes after data")
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    cfg = EncoderConfig.from_dict(meta["encoder_config"])
    return EncoderWeights.from_arrays(arrays, cfg.num_layers), cfg


def default_encoder_config(scaling: str | ScalingVariant = "vanilla", mask: str = "none",
                           beta: float = 0.1, **overrides) -> EncoderConfig:
    """Desk-scale defaults: d_model 64, 4 heads, 2 layers, patch 16, n_train 64."""
    from .bias_mask import MaskVariant, head_slopes
    num_heads = overrides.pop("num_heads", 4)
    d_model = overrides.pop("d_model", 64)
    n_train = overrides.pop("n_train", 64)
    bias_after_scale = overrides.pop("bias_after_scale", False)
    variant = MaskVariant(mask)
    policy = BiasMaskPolicy() if variant is MaskVariant.NONE else BiasMaskPolicy(variant, head_slopes(num_heads, beta=beta))
    att = AttentionConfig(num_heads=num_heads, d_model=d_model, n_train=n_train, scaling=ScalingVariant(scaling),
                          mask=policy, bias_after_scale=bias_after_scale)
    return EncoderConfig(attention=att, **overrides)
