"""``ba-lab`` command line: merge config file and flags, validate, run, write reports.

Exit codes: 0 success, 1 numeric/runtime failure, 2 bad config or arguments.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .encoder import default_encoder_config
from .errors import ArgumentError, LabError, NumericError
from .lab import reports
from .lab.bench import BENCH_COLUMNS, TIMING_COLUMNS, overhead_benchmark
from .lab.degrade import BASELINE, DEGRADE_COLUMNS, FULL_BA, POLICY_GRID, degradation_benchmark, slope_sweep
from .lab.drift import DRIFT_COLUMNS, drift_experiment
from .lab.slope import SLOPE_COLUMNS, train_slope
from .lab.task import BlobTask
from .numerics import Rng, resolve_dtype
from .scaling import qk_moment_estimate
from .selftest import SELFTEST_COLUMNS, run_selftest

SCHEMA_NAME = "experiment.v1.json"
COMMANDS = ("moments", "drift", "degrade", "slope", "bench", "selftest")
MOMENT_COLUMNS = ("d_k", "samples", "mean_qk", "var_qk", "frac_within_3sd", "seed")

DEFAULTS = {
    "schema_version": 1,
    "seed": 0,
    "out": "ba-lab-out",
    "float_mode": "float64",
    "moments": {"d_k": [1, 16, 64], "samples": 1_000_000},
    "drift": {"d_k": 64, "n_train": 64, "lengths": [64, 256, 1024, 4096], "trials": 1000,
              "policies": ["vanilla", "length_aware"]},
    "degrade": {"n_train": 64, "n_tests": [64, 256], "epochs": 150, "replicates": 5, "mode": "finetune",
                "policies": list(POLICY_GRID), "beta": 0.1, "betas": None, "lr": 1e-2,
                "train_images": 24, "eval_images": 24, "encoder": {}, "task": {}},
    "slope": {"n_train": 64, "epochs": 100, "lr": 1e-2, "joint": True, "scaling": "length_aware",
              "mask": "linear1d", "beta": 0.1, "train_images": 16, "encoder": {},
              "task": {"label_mode": "neighborhood"}},
    "bench": {"n": 4096, "repetitions": 30, "warmup": 5, "beta": 0.1, "encoder": {}},
    "selftest": {},
}


class ConfigError(Exception):
    """Bad config file, flag or schema violation (exit code 2)."""


def load_schema() -> dict:
    text = resources.files("balab").joinpath("schemas", SCHEMA_NAME).read_text(encoding="utf-8")
    return json.loads(text)


def _key_path(path) -> str:
    return "/".join(str(p) for p in path) or "<root>"


def validate_config(config: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config key '{_key_path(e.absolute_path)}': {e.message}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return data


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ba-lab", description="Length-extrapolation attention experiments.")
    parser.add_argument("--version", action="version", version=f"ba-lab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--out", help="output directory for <command>.csv and .json")
    common.add_argument("--seed", type=int)
    common.add_argument("--float-mode", dest="float_mode", choices=["float64", "float32"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("moments", parents=[common], help="Monte Carlo moments of q.k")
    m.add_argument("--dk", dest="d_k", type=_int_list)
    m.add_argument("--samples", type=int)

    d = sub.add_parser("drift", parents=[common], help="softmax entropy drift across lengths")
    d.add_argument("--dk", dest="d_k", type=int)
    d.add_argument("--n-train", dest="n_train", type=int)
    d.add_argument("--lengths", type=_int_list)
    d.add_argument("--trials", type=int)
    d.add_argument("--policies", type=_str_list)

    g = sub.add_parser("degrade", parents=[common], help="train short, test long, report the loss gap")
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-tests", dest="n_tests", type=_int_list)
    g.add_argument("--epochs", type=int)
    g.add_argument("--replicates", type=int)
    g.add_argument("--mode", choices=["finetune", "zero_shot"])
    g.add_argument("--policies", type=_str_list)
    g.add_argument("--beta", type=float)
    g.add_argument("--betas", type=_float_list, help="fixed-slope sweep (zero-shot) instead of the policy grid")
    g.add_argument("--lr", type=float)
    g.add_argument("--train-images", dest="train_images", type=int)
    g.add_argument("--eval-images", dest="eval_images", type=int)

    s = sub.add_parser("slope", parents=[common], help="train the mask slopes")
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--mask", choices=["linear1d", "manhattan2d"])
    s.add_argument("--scaling", choices=["vanilla", "length_aware"])
    s.add_argument("--beta", type=float)
    s.add_argument("--joint", dest="joint", action="store_true", default=None)
    s.add_argument("--slopes-only", dest="joint", action="store_false")
    s.add_argument("--train-images", dest="train_images", type=int)

    b = sub.add_parser("bench", parents=[common], help="forward-pass overhead of the BA policy")
    b.add_argument("--n", type=int)
    b.add_argument("--repetitions", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--beta", type=float)

    sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    return parser


_GLOBAL_FLAGS = ("seed", "out", "float_mode")


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags; validated against the schema."""
    file_cfg = _read_config_file(args.config) if args.config else {}
    validate_config(file_cfg)
    cfg = _merge(DEFAULTS, file_cfg)
    for key in _GLOBAL_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    block = cfg[args.command]
    skip = {"command", "config", *_GLOBAL_FLAGS}
    for key, v in vars(args).items():
        if key not in skip and v is not None:
            block[key] = v
    validate_config(cfg)
    return cfg


def _encoder_cfg(block: dict, scaling="vanilla", mask="none", beta=0.1, n_train=64):
    enc = dict(block.get("encoder", {}))
    return default_encoder_config(scaling, mask, beta, n_train=n_train, **enc)


def _task(enc_cfg, block: dict) -> BlobTask:
    t = dict(block.get("task", {}))
    if "radius" in t:
        t["radius"] = tuple(t["radius"])
    return BlobTask(patch_size=enc_cfg.patch_size, channels=enc_cfg.in_channels, **t)


def _run_moments(cfg):
    blk = cfg["moments"]
    rows = []
    for d_k in blk["d_k"]:
        r = qk_moment_estimate(d_k, blk["samples"], Rng(cfg["seed"]).substream(d_k))
        rows.append((r.d_k, r.samples, r.mean_qk, r.var_qk, r.frac_within_3sd, cfg["seed"]))
    summary = "; ".join(f"d_k={r[0]} mean={r[2]:.4g} var={r[3]:.4g}" for r in rows)
    return MOMENT_COLUMNS, rows, {}, summary


def _run_drift(cfg):
    blk = cfg["drift"]
    rep = drift_experiment(blk["d_k"], blk["n_train"], blk["lengths"], blk["trials"], cfg["seed"], blk["policies"])
    longer = [n for n in sorted({c.n_test for c in rep.cells}) if n > rep.n_train]
    parts = [f"n={n}: " + ", ".join(f"{p} {rep.entropy_drift(p, n):.3f}" for p in blk["policies"]) for n in longer]
    return DRIFT_COLUMNS, rep.rows(), {"report": rep.to_dict()}, "entropy drift " + "; ".join(parts)


def _run_degrade(cfg):
    blk = cfg["degrade"]
    enc = _encoder_cfg(blk, n_train=blk["n_train"])
    task = _task(enc, blk)
    dtype = resolve_dtype(cfg["float_mode"])
    common = dict(replicates=blk["replicates"], lr=blk["lr"], train_images=blk["train_images"],
                  eval_images=blk["eval_images"])
    if dtype != resolve_dtype("float64"):
        raise ArgumentError("degrade trains in float64 only; use --float-mode float64")
    if blk["betas"]:
        rep = slope_sweep(enc, task, blk["n_train"], blk["n_tests"], blk["betas"], blk["epochs"], cfg["seed"],
                          **common)
        n = max(blk["n_tests"])
        vals = {b: rep.median_delta("length_aware+linear1d", n, b) for b in blk["betas"]}
        summary = f"median delta_diff at n={n}: " + ", ".join(f"beta={b}: {v:.4g}" for b, v in vals.items())
    else:
        rep = degradation_benchmark(enc, task, blk["n_train"], blk["n_tests"], blk["epochs"], cfg["seed"],
                                    policies=blk["policies"], mode=blk["mode"], beta=blk["beta"], **common)
        n = max(blk["n_tests"])
        summary = f"median delta_diff at n={n}: " + ", ".join(
            f"{p} {rep.median_delta(p, n):.4g}" for p in blk["policies"])
    return DEGRADE_COLUMNS, rep.rows(), {"report": rep.to_dict()}, summary


def _run_slope(cfg):
    blk = cfg["slope"]
    enc = _encoder_cfg(blk, blk["scaling"], blk["mask"], blk["beta"], n_train=blk["n_train"])
    if resolve_dtype(cfg["float_mode"]) != resolve_dtype("float64"):
        raise ArgumentError("slope trains in float64 only; use --float-mode float64")
    res = train_slope(enc, _task(enc, blk), blk["epochs"], cfg["seed"], lr=blk["lr"], joint=blk["joint"],
                      train_images=blk["train_images"])
    summary = (f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; slopes "
               f"{res.slopes.min():.4g}..{res.slopes.max():.4g}")
    return SLOPE_COLUMNS, res.rows(), {"result": res.to_dict()}, summary


def _run_bench(cfg):
    blk = cfg["bench"]
    enc = _encoder_cfg(blk)
    rep = overhead_benchmark(enc, blk["n"], blk["repetitions"], cfg["seed"], warmup=blk["warmup"],
                             float_mode=cfg["float_mode"], beta=blk["beta"])
    extra = {"report": rep.to_dict(), "timing_columns": list(TIMING_COLUMNS),
             "timing_rows": [dict(zip(TIMING_COLUMNS, r)) for r in rep.timing_rows()]}
    summary = (f"{FULL_BA} vs {BASELINE} at n={rep.n}: overhead ratio {rep.overhead_ratio:.4f}, "
               f"+{rep.parameter_delta} parameters")
    return BENCH_COLUMNS, rep.rows(), extra, summary, rep


def _run_selftest(cfg):
    results = run_selftest()
    rows = [(name, ok, detail) for name, ok, detail in results]
    failed = [name for name, ok, _ in results if not ok]
    summary = "all invariants passed" if not failed else f"{len(failed)} invariant(s) failed: {', '.join(failed)}"
    return SELFTEST_COLUMNS, rows, {}, summary, failed


_RUNNERS = {"moments": _run_moments, "drift": _run_drift, "degrade": _run_degrade, "slope": _run_slope,
            "bench": _run_bench, "selftest": _run_selftest}


def _echo(cfg: dict, command: str) -> dict:
    keep = ("schema_version", "seed", "out", "float_mode", command)
    return {k: cfg[k] for k in keep}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    command = args.command
    echo = _echo(cfg, command)
    try:
        result = _RUNNERS[command](cfg)
    except ArgumentError as e:
        print(f"error: {command}: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {command}: {e}", file=sys.stderr)
        return 1
    except LabError as e:
        print(f"error: {command}: {e}", file=sys.stderr)
        return 1
    columns, rows, extra, summary = result[:4]
    out = Path(cfg["out"])
    try:
        reports.write_csv(out / f"{command}.csv", columns, rows, echo)
        reports.write_json(out / f"{command}.json", command, echo, columns, rows, extra)
        if command == "bench":
            rep = result[4]
            reports.write_csv(out / "bench_timing.csv", TIMING_COLUMNS, rep.timing_rows(), echo)
    except OSError as e:
        print(f"error: cannot write reports to {out}: {e}", file=sys.stderr)
        return 1
    print(summary)
    if command == "selftest" and result[4]:
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
