"""Train at one resolution, evaluate at larger ones, and report the loss gap.

``delta_diff = loss_test - loss_train`` where both losses are measured on
held-out images; the held-out set for a given resolution is drawn from a
fixed substream, so evaluating at the training resolution gives exactly 0.

Two modes:

* ``finetune``: every policy trains its own model with the policy active,
  slopes included (they start at ``beta``);
* ``zero_shot``: one Vanilla/no-mask model is trained per replicate and each
  policy is switched on only at evaluation time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from statistics import median

import numpy as np

from ..bias_mask import BiasMaskPolicy, MaskVariant, head_slopes
from ..encoder import EncoderConfig, init_encoder_weights
from ..errors import ArgumentError
from ..numerics import Rng
from ..scaling import ScalingVariant
from .parallel import parallel_map
from .task import BlobTask
from .train import DEFAULT_LR, TokenClassifier, evaluate_loss, train

POLICY_GRID = tuple(f"{s.value}+{m.value}" for s in ScalingVariant for m in MaskVariant)
BASELINE = "vanilla+none"
FULL_BA = "length_aware+linear1d"

DEGRADE_COLUMNS = ("policy", "beta", "n_train", "n_test", "replicate", "loss_train", "loss_test", "delta_diff")


def parse_policy(name: str) -> tuple[ScalingVariant, MaskVariant]:
    try:
        s, m = name.split("+")
        return ScalingVariant(s), MaskVariant(m)
    except ValueError:
        raise ArgumentError(f"bad policy {name!r}; expected '<scaling>+<mask>', e.g. {FULL_BA!r}") from None


def with_policy(cfg: EncoderConfig, policy: str, beta: float, n_train: int) -> EncoderConfig:
    scaling, mask = parse_policy(policy)
    slopes = BiasMaskPolicy() if mask is MaskVariant.NONE else BiasMaskPolicy(mask, head_slopes(cfg.num_heads, beta=beta))
    return cfg.replace(attention=cfg.attention.replace(scaling=scaling, mask=slopes, n_train=n_train))


def _install_slopes(model: TokenClassifier, cfg: EncoderConfig) -> TokenClassifier:
    """Copy of ``model`` whose per-layer slopes match ``cfg``'s mask (empty when off)."""
    m = model.copy()
    s = np.asarray(cfg.attention.mask.slopes, dtype=np.float64) if cfg.attention.mask.enabled else np.zeros(0)
    for layer in m.encoder.layers:
        layer.slopes = s.copy()
    return m


@dataclass(frozen=True)
class DegradationCell:
    policy: str
    beta: float
    n_train: int
    n_test: int
    replicate: int
    loss_train: float
    loss_test: float

    @property
    def delta_diff(self) -> float:
        return self.loss_test - self.loss_train


@dataclass
class DegradationReport:
    mode: str
    n_train: int
    epochs: int
    seed: int
    replicates: int
    cells: list[DegradationCell] = field(default_factory=list)

    def deltas(self, policy: str, n_test: int, beta: float | None = None) -> list[float]:
        return [c.delta_diff for c in self.cells
                if c.policy == policy and c.n_test == n_test and (beta is None or c.beta == beta)]

    def median_delta(self, policy: str, n_test: int, beta: float | None = None) -> float:
        d = self.deltas(policy, n_test, beta)
        if not d:
            raise KeyError((policy, n_test, beta))
        return float(median(d))

    def rows(self) -> list[tuple]:
        rows = [(c.policy, c.beta, c.n_train, c.n_test, c.replicate, c.loss_train, c.loss_test, c.delta_diff)
                for c in self.cells]
        keys = list(dict.fromkeys((c.policy, c.beta, c.n_test) for c in self.cells))
        for policy, beta, n_test in keys:
            sel = [c for c in self.cells if (c.policy, c.beta, c.n_test) == (policy, beta, n_test)]
            rows.append((policy, beta, self.n_train, n_test, "median",
                         float(median(c.loss_train for c in sel)), float(median(c.loss_test for c in sel)),
                         float(median(c.delta_diff for c in sel))))
        return rows

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n_train": self.n_train, "epochs": self.epochs, "seed": self.seed,
                "replicates": self.replicates,
                "cells": [dict(asdict(c), delta_diff=c.delta_diff) for c in self.cells]}


@dataclass(frozen=True)
class _Data:
    train_x: np.ndarray
    train_y: np.ndarray
    evals: dict


def _make_data(task: BlobTask, root: Rng, n_train: int, n_tests, train_images: int, eval_images: int) -> _Data:
    side = task.side_for_tokens(n_train)
    tx, ty = task.generate(root.substream(0), side, train_images)
    evals = {}
    for n in sorted({n_train, *n_tests}):
        s = task.side_for_tokens(n)
        evals[n] = task.generate(root.substream(1, s), s, eval_images)
    return _Data(tx, ty, evals)


def _check_common(cfg: EncoderConfig, task: BlobTask, n_train: int, n_tests, epochs: int):
    if epochs < 1:
        raise ArgumentError(f"epochs must be >= 1, got {epochs}")
    if task.patch_size != cfg.patch_size or task.channels != cfg.in_channels:
        raise ArgumentError("task patch size / channels disagree with the encoder config")
    for n in (n_train, *n_tests):
        task.side_for_tokens(n)
    if n_train < 2:
        raise ArgumentError(f"n_train must be >= 2, got {n_train}")


def _evaluate(model, cfg, data: _Data, n_train: int, n_tests, policy: str, beta: float, rep: int):
    base = evaluate_loss(model, cfg, *data.evals[n_train])
    cells = []
    for n in n_tests:
        loss = base if n == n_train else evaluate_loss(model, cfg, *data.evals[n])
        cells.append(DegradationCell(policy, beta, n_train, n, rep, base, loss))
    return cells


def degradation_benchmark(cfg: EncoderConfig, task: BlobTask, n_train: int, n_tests, epochs: int, seed: int, *,
                          replicates: int = 1, policies=POLICY_GRID, mode: str = "finetune",
                          beta: float = 0.1, lr: float = DEFAULT_LR, train_images: int = 16,
                          eval_images: int = 16, threads: int | None = None) -> DegradationReport:
    """Loss gap between test and train resolution for each scaling/mask policy.

    Replicate ``r`` draws its data and initial weights from substream ``r``
    of ``seed``; all policies of a replicate share them.
    """
    n_tests = [int(n) for n in n_tests]
    _check_common(cfg, task, n_train, n_tests, epochs)
    if mode not in ("finetune", "zero_shot"):
        raise ArgumentError(f"mode must be 'finetune' or 'zero_shot', got {mode!r}")
    if replicates < 1:
        raise ArgumentError(f"replicates must be >= 1, got {replicates}")
    policies = list(policies)
    for p in policies:
        parse_policy(p)

    datasets = {}

    def data_for(rep):
        if rep not in datasets:
            datasets[rep] = _make_data(task, Rng(seed).substream(rep), n_train, n_tests, train_images, eval_images)
        return datasets[rep]

    def pretrained(rep, pcfg, train_slopes):
        w = init_encoder_weights(pcfg, Rng(seed).substream(rep, 2))
        d = data_for(rep)
        return train(TokenClassifier.zero_head(w), pcfg, d.train_x, d.train_y, epochs, lr,
                     train_slopes=train_slopes).model

    # data is generated up front so worker threads only read it
    for rep in range(replicates):
        data_for(rep)

    if mode == "finetune":
        def job(item):
            rep, policy = item
            pcfg = with_policy(cfg, policy, beta, n_train)
            model = pretrained(rep, pcfg, True)
            return _evaluate(model, pcfg, datasets[rep], n_train, n_tests, policy, beta, rep)
        items = [(rep, p) for rep in range(replicates) for p in policies]
    else:
        def job(item):
            rep, _ = item
            base = pretrained(rep, with_policy(cfg, BASELINE, beta, n_train), False)
            out = []
            for policy in policies:
                pcfg = with_policy(cfg, policy, beta, n_train)
                out += _evaluate(_install_slopes(base, pcfg), pcfg, datasets[rep], n_train, n_tests,
                                 policy, beta, rep)
            return out
        items = [(rep, None) for rep in range(replicates)]

    report = DegradationReport(mode, n_train, epochs, seed, replicates)
    for cells in parallel_map(job, items, threads):
        report.cells.extend(cells)
    return report


def slope_sweep(cfg: EncoderConfig, task: BlobTask, n_train: int, n_tests, betas, epochs: int, seed: int, *,
                replicates: int = 1, scaling: str = "length_aware", mask: str = "linear1d",
                lr: float = DEFAULT_LR, train_images: int = 16, eval_images: int = 16,
                threads: int | None = None) -> DegradationReport:
    """Fixed-slope ablation in the zero-shot setting.

    One Vanilla/no-mask model per replicate, evaluated with
    ``scaling+mask`` at every slope in ``betas`` and with ``scaling+none`` as
    the reference row (reported with ``beta = 0``).
    """
    betas = [float(b) for b in betas]
    if not betas or any(b < 0 for b in betas):
        raise ArgumentError(f"betas must be a non-empty list of non-negative slopes, got {betas}")
    if MaskVariant(mask) is MaskVariant.NONE:
        raise ArgumentError("slope sweep needs a mask variant")
    n_tests = [int(n) for n in n_tests]
    _check_common(cfg, task, n_train, n_tests, epochs)
    if replicates < 1:
        raise ArgumentError(f"replicates must be >= 1, got {replicates}")
    masked = f"{ScalingVariant(scaling).value}+{MaskVariant(mask).value}"
    reference = f"{ScalingVariant(scaling).value}+none"

    def job(rep):
        data = _make_data(task, Rng(seed).substream(rep), n_train, n_tests, train_images, eval_images)
        bcfg = with_policy(cfg, BASELINE, 0.0, n_train)
        w = init_encoder_weights(bcfg, Rng(seed).substream(rep, 2))
        base = train(TokenClassifier.zero_head(w), bcfg, data.train_x, data.train_y, epochs, lr).model
        rcfg = with_policy(cfg, reference, 0.0, n_train)
        cells = _evaluate(_install_slopes(base, rcfg), rcfg, data, n_train, n_tests, reference, 0.0, rep)
        for b in betas:
            pcfg = with_policy(cfg, masked, b, n_train)
            cells += _evaluate(_install_slopes(base, pcfg), pcfg, data, n_train, n_tests, masked, b, rep)
        return cells

    report = DegradationReport("zero_shot", n_train, epochs, seed, replicates)
    for cells in parallel_map(job, range(replicates), threads):
        report.cells.extend(cells)
    return report
