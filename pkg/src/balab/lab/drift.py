"""How softmax concentration drifts with sequence length under each scaling policy.

Each trial draws one standard-normal query against ``n_test`` standard-normal
keys and values, and records statistics of that attention row. All policies
see the same draws (substream ``(n_test, trial)``), so the policy comparison
is paired.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ArgumentError, NumericError
from ..numerics import Rng
from ..scaling import ScalingPolicy, ScalingVariant, combined_lambda
from .parallel import parallel_map

MIN_TRIALS = 100
_CHUNK = 50

DRIFT_COLUMNS = ("policy", "n_train", "n_test", "entropy_mean", "maxw_mean", "outnorm_mean", "logit_std",
                 "trials", "seed")


@dataclass(frozen=True)
class DriftCell:
    policy: str
    n_test: int
    entropy_mean: float
    maxw_mean: float
    outnorm_mean: float
    logit_std: float


@dataclass
class DriftReport:
    d_k: int
    n_train: int
    trials: int
    seed: int
    cells: list[DriftCell] = field(default_factory=list)

    def cell(self, policy: str, n_test: int) -> DriftCell:
        for c in self.cells:
            if c.policy == policy and c.n_test == n_test:
                return c
        raise KeyError((policy, n_test))

    def entropy_drift(self, policy: str, n_test: int) -> float:
        """``|entropy(n_test) - entropy(n_train)|`` for one policy."""
        return abs(self.cell(policy, n_test).entropy_mean - self.cell(policy, self.n_train).entropy_mean)

    def rows(self) -> list[tuple]:
        return [(c.policy, self.n_train, c.n_test, c.entropy_mean, c.maxw_mean, c.outnorm_mean, c.logit_std,
                 self.trials, self.seed) for c in self.cells]

    def to_dict(self) -> dict:
        return {"d_k": self.d_k, "n_train": self.n_train, "trials": self.trials, "seed": self.seed,
                "cells": [asdict(c) for c in self.cells]}


def row_statistics(logits: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Entropy, max weight, output norm and logit std of attention rows.

    ``logits`` is ``[..., n]`` and ``v`` is ``[..., n, d]``.
    """
    std = logits.std(axis=-1)
    z = np.array(logits, dtype=np.float64)
    z -= z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    total = w.sum(axis=-1, keepdims=True)
    w /= total
    # from logits, H = log sum exp(z) - sum p z; exact ln n on a flat row
    h = np.log(total[..., 0]) - np.einsum("...n,...n->...", w, z)
    h = np.clip(h, 0.0, math.log(logits.shape[-1]))
    out = np.einsum("...n,...nd->...d", w, v)
    return h, w.max(axis=-1), np.linalg.norm(out, axis=-1), std


def drift_experiment(d_k: int, n_train: int, lengths, trials: int, seed: int,
                     policies=("vanilla", "length_aware"), threads: int | None = None) -> DriftReport:
    lengths = [int(n) for n in lengths]
    if not lengths or any(n < 2 for n in lengths):
        raise ArgumentError(f"all lengths must be >= 2, got {lengths}")
    if trials < MIN_TRIALS:
        raise ArgumentError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    if d_k < 1:
        raise ArgumentError(f"d_k must be >= 1, got {d_k}")
    pols = [ScalingPolicy(ScalingVariant(p), d_k, n_train) for p in policies]
    if n_train not in lengths:
        lengths = [n_train] + lengths
    lengths = sorted(set(lengths))
    root = Rng(seed)

    def run_chunk(job):
        n, start = job
        stop = min(start + _CHUNK, trials)
        stats = np.empty((len(pols), stop - start, 4))
        for t in range(start, stop):
            g = root.substream(n, t).generator()
            q = g.standard_normal(d_k)
            k = g.standard_normal((n, d_k))
            v = g.standard_normal((n, d_k))
            scores = k @ q
            for p, pol in enumerate(pols):
                lam = combined_lambda(pol, n)
                stats[p, t - start] = [float(x) for x in row_statistics(lam * scores, v)]
        return stats

    jobs = [(n, s) for n in lengths for s in range(0, trials, _CHUNK)]
    chunks = parallel_map(run_chunk, jobs, threads)
    report = DriftReport(d_k=d_k, n_train=n_train, trials=trials, seed=seed)
    per_len = len(range(0, trials, _CHUNK))
    for li, n in enumerate(lengths):
        block = np.concatenate(chunks[li * per_len:(li + 1) * per_len], axis=1)
        for p, name in enumerate(policies):
            m = block[p].mean(axis=0)
            report.cells.append(DriftCell(ScalingVariant(name).value, n, *(float(x) for x in m)))
    for c in report.cells:
        if not (-1e-12 <= c.entropy_mean <= math.log(c.n_test) + 1e-12):
            raise NumericError(f"entropy {c.entropy_mean} outside [0, ln {c.n_test}]")
    return report
