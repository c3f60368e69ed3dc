"""Command-line frontend: validate / price / hedge / backtest.

Configs are YAML with sections model, payoff and run; the hedge command
writes a plan to the output directory and backtest consumes it. Output
JSON separates the deterministic "payload" (byte-identical across
reruns with the same config and seed) from a "meta" section holding
timestamps and environment notes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .backtest import price as run_price
from .backtest import replicate
from .engine import resolve_grid, simulate_paths
from .errors import DegenHedgeError, SchemaError, exit_code_for
from .hedging import HedgePlan, RegressionSpec, export_plan_csv, solve_hedge
from .model import MarketModel, parse_model_dict, validate_no_arbitrage
from .payoffs import parse_payoff

log = logging.getLogger("degenhedge")


def _setup_logging() -> None:
    level = os.environ.get("DEGENHEDGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------


def load_run_config(path: str) -> dict:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise SchemaError("run config must be a YAML mapping")
    unknown = set(cfg) - {"model", "payoff", "run", "output"}
    if unknown:
        raise SchemaError(f"unknown top-level config keys: {sorted(unknown)}")
    model_sec = cfg.get("model")
    if isinstance(model_sec, str):
        # model may live in its own file, resolved relative to the config
        mpath = os.path.join(os.path.dirname(os.path.abspath(path)), model_sec)
        with open(mpath) as fh:
            cfg["model"] = yaml.safe_load(fh)
    if not isinstance(cfg.get("model"), dict):
        raise SchemaError("config must contain a 'model' mapping or file path")
    return cfg


def _resolve_run(cfg: dict, args) -> dict:
    run = dict(cfg.get("run") or {})
    unknown = set(run) - {"paths", "steps", "seed", "regression", "hedge_times"}
    if unknown:
        raise SchemaError(f"unknown keys in run section: {sorted(unknown)}")
    if args.paths is not None:
        run["paths"] = args.paths
    if args.steps is not None:
        run["steps"] = args.steps
    if args.seed is not None:
        run["seed"] = args.seed
    for key in ("paths", "steps", "seed"):
        if key not in run:
            raise SchemaError(f"run.{key} missing (seeds must be explicit; no implicit entropy)")
        if isinstance(run[key], bool) or not isinstance(run[key], int):
            raise SchemaError(f"run.{key} must be an integer")
    if run["paths"] < 100:
        raise SchemaError("run.paths must be >= 100")
    if run["steps"] < 4:
        raise SchemaError("run.steps must be >= 4")
    if not (0 <= run["seed"] < 2**64):
        raise SchemaError("run.seed must fit in an unsigned 64-bit integer")
    return run


def _out_dir(cfg: dict, args) -> str:
    out = args.out or (cfg.get("output") or {}).get("directory") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _formats(cfg: dict, args) -> set[str]:
    fmt = args.format or (cfg.get("output") or {}).get("formats", "both")
    if isinstance(fmt, list):
        fmt = ",".join(fmt)
    if fmt == "both":
        return {"json", "csv"}
    if fmt in ("json", "csv"):
        return {fmt}
    raise SchemaError("format must be one of json, csv, both")


def _write_json(path: str, payload: dict) -> None:
    doc = {
        "payload": payload,
        "meta": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "version": __version__},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _print_table(rows: list[tuple[str, object]]) -> None:
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k.ljust(width)}  {v}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = load_run_config(args.config)
    model = parse_model_dict(cfg["model"])
    report = validate_no_arbitrage(model)
    payload = report.to_dict()
    payload["config_hash"] = model.config_hash()
    if args.out:
        _write_json(os.path.join(_out_dir(cfg, args), "validate.json"), payload)
    _print_table(
        [
            ("arbitrage_ok", report.arbitrage_ok),
            ("max_residual", f"{report.max_residual:.3e}"),
            ("rank_profile", report.rank_profile),
            ("config_hash", model.config_hash()),
        ]
    )
    for w in report.warnings:
        print(f"warning: {w}")
    return 0 if report.arbitrage_ok else 1


def _prepare(cfg: dict, args):
    model = parse_model_dict(cfg["model"])
    payoff = parse_payoff(cfg.get("payoff") or {}, model.n)
    run = _resolve_run(cfg, args)
    grid = resolve_grid(model, run["steps"])
    return model, payoff, run, grid


def cmd_price(args) -> int:
    cfg = load_run_config(args.config)
    model, payoff, run, grid = _prepare(cfg, args)
    res = run_price(model, payoff, grid, run["paths"], run["seed"])
    payload = {
        "v0": res.value,
        "std_error": res.std_error,
        "n_paths": res.n_paths,
        "steps": run["steps"],
        "seed": run["seed"],
        "payoff": payoff.to_dict(),
        "config_hash": model.config_hash(),
    }
    out = _out_dir(cfg, args)
    fmts = _formats(cfg, args)
    if "json" in fmts:
        _write_json(os.path.join(out, "price.json"), payload)
    if "csv" in fmts:
        with open(os.path.join(out, "price.csv"), "w") as fh:
            fh.write("v0,std_error,n_paths,steps,seed\n")
            fh.write(f"{res.value!r},{res.std_error!r},{res.n_paths},{run['steps']},{run['seed']}\n")
    _print_table([("v0", f"{res.value:.6f}"), ("std_error", f"{res.std_error:.6f}"), ("n_paths", res.n_paths)])
    return 0


def cmd_hedge(args) -> int:
    cfg = load_run_config(args.config)
    model, payoff, run, grid = _prepare(cfg, args)
    spec = RegressionSpec(**(run.get("regression") or {}))
    bundle = simulate_paths(model, grid, run["paths"], run["seed"], measure="Q")
    plan = solve_hedge(model, payoff, bundle, spec, hedge_times=run.get("hedge_times"))
    out = _out_dir(cfg, args)
    fmts = _formats(cfg, args)
    plan.save(os.path.join(out, "plan.json"), os.path.join(out, "plan_coefs.npz"))
    if "csv" in fmts:
        export_plan_csv(plan, os.path.join(out, "plan.csv"))
    if "json" in fmts:
        payload = {
            "v0": plan.v0,
            "v0_se": plan.v0_se,
            "admissibility": plan.admissibility,
            "n_train": plan.n_train,
            "seed": run["seed"],
            "steps": run["steps"],
            "payoff": payoff.to_dict(),
            "regression": spec.to_dict(),
            "config_hash": model.config_hash(),
            "mean_r2": float(np.mean([r for ks in plan.diagnostics["r2"] for r in ks])),
        }
        _write_json(os.path.join(out, "hedge_summary.json"), payload)
    _print_table(
        [
            ("v0", f"{plan.v0:.6f}"),
            ("v0_se", f"{plan.v0_se:.6f}"),
            ("admissibility", f"{plan.admissibility:.6f}"),
            ("plan", os.path.join(out, "plan.json")),
        ]
    )
    return 0


def cmd_backtest(args) -> int:
    cfg = load_run_config(args.config)
    model, payoff, run, grid = _prepare(cfg, args)
    plan_dir = args.plan or _out_dir(cfg, args)
    if os.path.isdir(plan_dir):
        jpath, npath = os.path.join(plan_dir, "plan.json"), os.path.join(plan_dir, "plan_coefs.npz")
    else:
        jpath, npath = plan_dir, os.path.splitext(plan_dir)[0] + "_coefs.npz"
    plan = HedgePlan.load(jpath, npath)
    report = replicate(model, payoff, plan, run["paths"], run["seed"])
    payload = report.to_dict()
    payload["config_hash"] = model.config_hash()
    out = _out_dir(cfg, args)
    fmts = _formats(cfg, args)
    if "json" in fmts:
        _write_json(os.path.join(out, "backtest.json"), payload)
    if "csv" in fmts and report.per_path_errors is not None:
        with open(os.path.join(out, "backtest_errors.csv"), "w") as fh:
            fh.write("path_id,terminal_error\n")
            for p, e in enumerate(report.per_path_errors):
                fh.write(f"{p},{e!r}\n")
    _print_table(
        [
            ("v0", f"{report.v0:.6f}"),
            ("rmse", f"{report.rmse:.6f}"),
            ("relative_rmse", f"{report.relative_rmse:.4%}"),
            ("mean_error", f"{report.mean_error:.6f}"),
            ("worst_abs_error", f"{report.worst_abs_error:.6f}"),
        ]
    )
    if args.max_relative_rmse is not None and report.relative_rmse > args.max_relative_rmse:
        print(f"FAIL: relative RMSE {report.relative_rmse:.4%} exceeds threshold {args.max_relative_rmse:.4%}")
        return 1
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="degenhedge",
        description="Monte Carlo pricing and projected replication hedging for possibly degenerate multi-asset diffusions.",
    )
    parser.add_argument("--version", action="version", version=f"degenhedge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run config (model, payoff, run, output sections)")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="RNG seed, unsigned 64-bit (overrides run.seed)")
        p.add_argument("--paths", type=int, help="number of Monte Carlo paths (overrides run.paths)")
        p.add_argument("--steps", type=int, help="number of Euler time steps (overrides run.steps)")
        p.add_argument(
            "--workers",
            type=int,
            default=1,
            help="worker count; results are identical for any value (deterministic RNG streams)",
        )
        p.add_argument("--format", choices=["json", "csv", "both"], help="output artifact formats")

    p = sub.add_parser("validate", help="check schema and no-arbitrage solvability of the model")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("price", help="Monte Carlo price of the payoff under Q")
    common(p)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("hedge", help="fit the replication plan and write it to the output directory")
    common(p)
    p.set_defaults(func=cmd_hedge)

    p = sub.add_parser("backtest", help="replay a fitted plan on fresh paths")
    common(p)
    p.add_argument("--plan", help="plan file or the directory written by 'hedge' (default: output directory)")
    p.add_argument(
        "--max-relative-rmse",
        type=float,
        help="exit nonzero when the relative replication RMSE exceeds this threshold",
    )
    p.set_defaults(func=cmd_backtest)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DegenHedgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
