"""Command-line entry point: ``hesslab <command> [flags]``.

Exit codes: 0 success, 2 bad configuration, 3 numerical failure,
4 a result breached its acceptance threshold (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import NumericError, UsageError
from .experiments import (check_config, dump_json, dynamics_experiment, rank_scan, spectrum_experiment,
                          theory_curves, verify_experiment)
from .net import Architecture, WeightDistribution, activation_from_dict

QUADRATIC_TAU_REL = 1e-14
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 2, 3, 4
COMMANDS = ("spectrum", "rank-scan", "dynamics", "verify", "theory-curve")

DEFAULTS = {
    "activation": "linear",
    "eps": 1.0,
    "coeffs": None,
    "n_in": 10,
    "n_hidden": 20,
    "seed": 0,
    "mc_samples": None,
    "sigma0": 1e-2,
    "lr": None,
    "batch": 512,
    "steps": None,
    "t_max": 10.0,
    "tau_rel": None,
    "ks_max": 0.05,
    "rate_tol": 0.05,
    "out": "hesslab-out",
    "threads": None,
    "weight_dist": "gaussian",
    "grid": "2:10",
}
COMMAND_DEFAULTS = {
    "spectrum": {"ensemble": 200, "mc_samples": 100_000},
    "rank-scan": {"ensemble": 1, "mc_samples": 100_000},
    "dynamics": {"ensemble": 50},
    "verify": {"ensemble": 1, "n_in": 6, "n_hidden": 6, "mc_samples": 1_000_000},
    "theory-curve": {"ensemble": 1},
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # every flag defaults to None so that config-file values survive unless overridden
    common.add_argument("--activation", choices=["linear", "quadratic", "erf", "poly"])
    common.add_argument("--eps", type=float, help="quadratic coefficient in x + eps*x^2")
    common.add_argument("--coeffs", type=str, help="comma-separated polynomial coefficients of x, x^2, ...")
    common.add_argument("--n-in", dest="n_in", type=int)
    common.add_argument("--n-hidden", dest="n_hidden", type=int)
    common.add_argument("--ensemble", type=int, help="number of teachers, seeds or trajectories")
    common.add_argument("--seed", type=int, help="base seed (HESSLAB_SEED overrides)")
    common.add_argument("--mc-samples", dest="mc_samples", type=int)
    common.add_argument("--sigma0", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--t-max", dest="t_max", type=float, help="trained time when --steps is not given")
    common.add_argument("--tau-rel", dest="tau_rel", type=float,
                        help="relative rank cut (default 1e-8; 1e-14 for quadratic rank scans)")
    common.add_argument("--ks-max", dest="ks_max", type=float)
    common.add_argument("--rate-tol", dest="rate_tol", type=float)
    common.add_argument("--weight-dist", dest="weight_dist", choices=[d.value for d in WeightDistribution])
    common.add_argument("--grid", type=str, help="rank-scan range a:b for both n_in and n_hidden")
    common.add_argument("--out", type=str)
    common.add_argument("--config", type=str, help="JSON file with any of the above keys")
    common.add_argument("--threads", type=int)

    p = argparse.ArgumentParser(prog="hesslab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hesslab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args: argparse.Namespace, environ=os.environ) -> dict:
    """Defaults, then the config file, then explicit flags, then HESSLAB_SEED."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        if "command" in loaded and loaded.pop("command") != args.command:
            raise UsageError("config 'command' does not match the command line")
        unknown = set(loaded) - set(DEFAULTS) - {"ensemble"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None:
            cfg[k] = v
    if environ.get("HESSLAB_SEED"):
        try:
            cfg["seed"] = int(environ["HESSLAB_SEED"])
        except ValueError as exc:
            raise UsageError("HESSLAB_SEED must be an integer") from exc
    cfg["command"] = args.command
    if cfg["tau_rel"] is None:
        cfg["tau_rel"] = default_tau(cfg)
    _validate(cfg)
    return cfg


def default_tau(cfg: dict) -> float:
    """Quadratic Hessians at n_in == n_hidden have genuine eigenvalues near
    1e-13 relative, so rank scans for them need a finer cut than 1e-8."""
    if cfg["command"] == "rank-scan" and cfg["activation"] == "quadratic":
        return QUADRATIC_TAU_REL
    return 1e-8


def _validate(cfg: dict) -> None:
    check_config(cfg)
    for key in ("n_in", "n_hidden"):
        v = cfg[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise UsageError(f"{key} must be a positive integer, got {v!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError("seed must be a non-negative integer")
    if cfg["weight_dist"] not in [d.value for d in WeightDistribution]:
        raise UsageError(f"unknown weight distribution {cfg['weight_dist']!r}")
    _activation(cfg)
    if cfg["command"] == "rank-scan":
        _grid(cfg["grid"])
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")


def _activation(cfg: dict):
    kind = cfg["activation"]
    if kind == "quadratic":
        return activation_from_dict({"kind": kind, "eps": cfg["eps"]})
    if kind == "poly":
        coeffs = cfg["coeffs"]
        if coeffs is None:
            raise UsageError("--coeffs is required for poly activations")
        if isinstance(coeffs, str):
            try:
                coeffs = [float(c) for c in coeffs.split(",")]
            except ValueError as exc:
                raise UsageError(f"bad --coeffs {cfg['coeffs']!r}") from exc
        return activation_from_dict({"kind": "poly", "coeffs": coeffs})
    return activation_from_dict(kind)


def _grid(text) -> range:
    try:
        a, b = (int(v) for v in str(text).split(":"))
    except ValueError as exc:
        raise UsageError(f"--grid expects a:b, got {text!r}") from exc
    if a < 1 or b < a:
        raise UsageError(f"--grid range {text!r} is empty or non-positive")
    return range(a, b + 1)


def run(cfg: dict) -> tuple[int, dict, dict]:
    """Execute a resolved config; returns ``(exit_code, report, files)``."""
    act = _activation(cfg)
    arch = Architecture(cfg["n_in"], cfg["n_hidden"])
    cmd = cfg["command"]
    seed = cfg["seed"]
    code = EXIT_OK
    if cmd == "spectrum":
        report, files = spectrum_experiment(act, arch, cfg["ensemble"], seed, cfg["weight_dist"], cfg["tau_rel"],
                                            cfg["ks_max"], cfg["mc_samples"], cfg["threads"])
        if report.get("pass") is False:
            code = EXIT_THRESHOLD
    elif cmd == "rank-scan":
        g = _grid(cfg["grid"])
        report, files = rank_scan(act, g, g, range(seed, seed + cfg["ensemble"]), cfg["tau_rel"],
                                  cfg["weight_dist"], cfg["mc_samples"], cfg["threads"])
        if not report["pass"]:
            code = EXIT_THRESHOLD
    elif cmd == "dynamics":
        report, files = dynamics_experiment(act, arch, seed, cfg["sigma0"], cfg["lr"], batch=cfg["batch"],
                                            steps=cfg["steps"], t_max=cfg["t_max"], ensemble=cfg["ensemble"],
                                            weight_dist=cfg["weight_dist"], tau_rel=cfg["tau_rel"],
                                            threads=cfg["threads"])
        if report["rel_err"] > cfg["rate_tol"]:
            code = EXIT_THRESHOLD
    elif cmd == "verify":
        report, files = verify_experiment(act, arch, seed, cfg["mc_samples"], cfg["weight_dist"])
        if report["overall"] != "pass":
            code = EXIT_THRESHOLD
    else:
        report, files = theory_curves(arch)
    return code, report, files


def write_outputs(out: Path, cfg: dict, files: dict, code: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "config": cfg, "files": sorted(files), "exit_code": code}
    for name, text in sorted(files.items()):
        (out / name).write_text(text)
    (out / "manifest.json").write_text(dump_json(manifest))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"hesslab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, report, files = run(cfg)
    except UsageError as exc:
        print(f"hesslab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"hesslab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_outputs(Path(cfg["out"]), cfg, files, code)
    summary = {k: v for k, v in report.items() if not isinstance(v, (list, dict))}
    print(json.dumps(summary, sort_keys=True))
    if code == EXIT_THRESHOLD:
        print("hesslab: acceptance threshold breached (outputs written)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
