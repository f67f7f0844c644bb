"""Forward-pass cost of the full BA policy against the plain encoder."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from ..encoder import EncoderConfig, encoder_forward, init_encoder_weights
from ..errors import ArgumentError, StateError
from ..numerics import Rng, resolve_dtype
from .degrade import BASELINE, FULL_BA, with_policy
from .task import BlobTask

MIN_REPETITIONS = 30
MIN_WARMUP = 5

# deterministic columns only; timings live in the bench_timing table
BENCH_COLUMNS = ("policy", "n", "d_model", "num_heads", "num_layers", "parameters", "slope_parameters",
                 "repetitions", "output_sha256")
TIMING_COLUMNS = ("policy", "n", "median_s", "p90_s", "overhead_ratio")


@dataclass(frozen=True)
class PolicyTiming:
    policy: str
    median_s: float
    p90_s: float
    parameters: int
    slope_parameters: int
    output_sha256: str


@dataclass
class TimingReport:
    n: int
    repetitions: int
    warmup: int
    seed: int
    float_mode: str
    cfg: EncoderConfig
    baseline: PolicyTiming
    ba: PolicyTiming

    @property
    def overhead_ratio(self) -> float:
        return self.ba.median_s / self.baseline.median_s

    @property
    def parameter_delta(self) -> int:
        return self.ba.parameters - self.baseline.parameters

    def rows(self) -> list[tuple]:
        c = self.cfg
        return [(t.policy, self.n, c.d_model, c.num_heads, c.num_layers, t.parameters, t.slope_parameters,
                 self.repetitions, t.output_sha256) for t in (self.baseline, self.ba)]

    def timing_rows(self) -> list[tuple]:
        return [(self.baseline.policy, self.n, self.baseline.median_s, self.baseline.p90_s, 1.0),
                (self.ba.policy, self.n, self.ba.median_s, self.ba.p90_s, self.overhead_ratio)]

    def to_dict(self) -> dict:
        def one(t: PolicyTiming):
            return {"policy": t.policy, "median_s": t.median_s, "p90_s": t.p90_s, "parameters": t.parameters,
                    "slope_parameters": t.slope_parameters, "output_sha256": t.output_sha256}
        return {"n": self.n, "repetitions": self.repetitions, "warmup": self.warmup, "seed": self.seed,
                "float_mode": self.float_mode, "overhead_ratio": self.overhead_ratio,
                "parameter_delta": self.parameter_delta, "baseline": one(self.baseline), "ba": one(self.ba)}


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def overhead_benchmark(cfg: EncoderConfig, n: int, repetitions: int, seed: int, *, warmup: int = MIN_WARMUP,
                       float_mode: str = "float64", beta: float = 0.1) -> TimingReport:
    """Time ``encoder_forward`` for Vanilla/no-mask and LengthAware/Linear1D on one shared image.

    Runs alternate between the two policies (and swap order every
    repetition) so drift in machine load hits both equally. Every
    repetition's output must hash to the same digest.
    """
    if repetitions < MIN_REPETITIONS:
        raise ArgumentError(f"repetitions must be >= {MIN_REPETITIONS}, got {repetitions}")
    if warmup < MIN_WARMUP:
        raise ArgumentError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    dtype = resolve_dtype(float_mode)
    task = BlobTask(patch_size=cfg.patch_size, channels=cfg.in_channels)
    side = task.side_for_tokens(n)
    n_train = cfg.attention.n_train
    cfgs = {p: with_policy(cfg, p, beta, n_train) for p in (BASELINE, FULL_BA)}
    root = Rng(seed)
    image, _ = task.generate(root.substream(0), side, 1)
    image = image[0].astype(dtype)
    weights = {p: init_encoder_weights(c, root.substream(2), dtype) for p, c in cfgs.items()}

    def run(p):
        t0 = time.perf_counter()
        out = encoder_forward(image, weights[p], cfgs[p])
        return time.perf_counter() - t0, out

    digests = {}
    for i in range(warmup):
        for p in cfgs:
            _, out = run(p)
            digests.setdefault(p, _digest(out))
    times = {p: [] for p in cfgs}
    order = list(cfgs)
    for i in range(repetitions):
        for p in (order if i % 2 == 0 else order[::-1]):
            dt, out = run(p)
            if _digest(out) != digests[p]:
                raise StateError(f"{p}: forward output changed between repetitions")
            times[p].append(dt)

    def summary(p):
        w = weights[p]
        slope_params = sum(layer.slopes.size for layer in w.layers)
        t = np.asarray(times[p])
        return PolicyTiming(p, float(np.median(t)), float(np.percentile(t, 90)), w.num_parameters(), slope_params,
                            digests[p])

    return TimingReport(n, repetitions, warmup, seed, np.dtype(dtype).name, cfg, summary(BASELINE), summary(FULL_BA))
