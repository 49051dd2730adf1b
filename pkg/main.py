"""Command line entry point.

    python main.py fit --data boston.csv --response lcmedv --out-prefix out/boston_
    python main.py simulate --scenario table1-kappa2 --replicates 100 --workers 4
    python main.py delta-bic --data diabetes.csv --response y
    python main.py bootstrap --data diabetes.csv --response y --B 100
    python main.py density-curve --data boston.csv --response lcmedv --vary ltax

Every command writes its files under ``--out-prefix`` and prints the list of
written paths as JSON. Failures write ``<prefix>error.json``, echo it on
stderr and exit with status 1.
"""
import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from data_io import (
    density_curves, parse_levels, read_csv, write_bootstrap, write_curves, write_delta_bic,
    write_error, write_fit, write_metrics,
)
from errors import SgndError
from models import (
    DEFAULT_KAPPA_MAX, DEFAULT_KAPPA_MIN, DEFAULT_TAU, DensityCurveRequest, FitConfig, RunConfig,
    TelescopeConfig,
)
from optimizer import telescope_fit
from resampling import bootstrap_se, delta_bic_table
from simulation import named_scenario, run_study

logger = logging.getLogger("sgnd")

COMMANDS = ("fit", "simulate", "delta-bic", "bootstrap", "density-curve")


def _split(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [v.strip() for v in value.split(",") if v.strip()]


def _profile(value: str):
    if value.lower() == "median":
        return "median"
    out: Dict[str, float] = {}
    for item in _split(value) or []:
        key, _, num = item.partition("=")
        out[key.strip()] = float(num)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="CSV file with a header row")
    common.add_argument("--response", help="response column")
    common.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    common.add_argument("--mode", choices=["mpr", "spr"], default="mpr")
    common.add_argument("--family", choices=["sgnd", "normal-fixed", "laplace-fixed"], default="sgnd")
    common.add_argument("--tau", type=float, default=None, help=f"default {DEFAULT_TAU}")
    common.add_argument("--kappa-min", type=float, default=DEFAULT_KAPPA_MIN)
    common.add_argument("--kappa-max", type=float, default=DEFAULT_KAPPA_MAX)
    common.add_argument("--criterion", default="bic", help="bic, aic or a numeric penalty weight")
    common.add_argument("--telescope", default="10:1e-4:100", help="eps_start:eps_end:steps")
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--out-prefix", default="")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--record-timing", action="store_true")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="sgnd", description="SGND regression with smooth-BIC selection")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit one dataset")

    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo selection study")
    sim.add_argument("--scenario", default="table1-kappa2")
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--n", type=int, default=None, help="observations per replicate")
    sim.add_argument("--se-method", choices=["sandwich", "bootstrap"], default="sandwich")
    sim.add_argument("--B", type=int, default=100, help="resamples when --se-method bootstrap")

    dbic = sub.add_parser("delta-bic", parents=[common], help="per-variable BIC change")
    dbic.add_argument("--variables", help="comma-separated subset (default: all)")
    dbic.add_argument("--refit", choices=["support", "telescope"], default="support",
                      help="support: keep the full fit's zeros; telescope: reselect the other variables")

    boot = sub.add_parser("bootstrap", parents=[common], help="bootstrap standard errors")
    boot.add_argument("--B", type=int, default=100)

    curve = sub.add_parser("density-curve", parents=[common], help="conditional density curves")
    curve.add_argument("--vary", required=True)
    curve.add_argument("--levels", help="comma-separated: Q1, Q3, median or numbers")
    curve.add_argument("--others-at", default="median", help="median or name=value,...")
    curve.add_argument("--y-min", type=float, default=None)
    curve.add_argument("--y-max", type=float, default=None)
    curve.add_argument("--points", type=int, default=200)
    return parser


def run_config(args: argparse.Namespace, tau: Optional[float] = None) -> RunConfig:
    fit = FitConfig(
        tau=tau if tau is not None else (args.tau if args.tau is not None else DEFAULT_TAU),
        kappa_min=args.kappa_min,
        kappa_max=args.kappa_max,
        criterion=args.criterion,
        mode=args.mode,
        family=args.family,
        telescope=TelescopeConfig.parse(args.telescope),
    )
    return RunConfig(
        command=args.command,
        data_path=args.data,
        response=args.response,
        covariates=_split(args.covariates),
        fit=fit,
        seed=args.seed,
        out_prefix=args.out_prefix,
        workers=args.workers,
        record_timing=args.record_timing,
    )


def _load(cfg: RunConfig):
    if not cfg.data_path or not cfg.response:
        raise ValueError(f"{cfg.command} needs --data and --response")
    return read_csv(cfg.data_path, cfg.response, cfg.covariates)


def cmd_fit(cfg: RunConfig) -> List[str]:
    data = _load(cfg)
    fit = telescope_fit(data, cfg.fit)
    return write_fit(fit, data, cfg.out_prefix, cfg.record_timing)


def cmd_simulate(args: argparse.Namespace) -> List[str]:
    overrides = {"seed": args.seed}
    if args.n is not None:
        overrides["n"] = args.n
    if args.tau is not None:
        overrides["tau"] = args.tau
    scenario = named_scenario(args.scenario, **overrides)
    cfg = run_config(args, tau=scenario.tau)
    summary = run_study(scenario, args.replicates, cfg.fit, cfg.workers, args.se_method, args.B)
    return write_metrics(summary, scenario, cfg.out_prefix,
                         extra={"se_method": args.se_method, "fit_config": cfg.fit.dict()})


def cmd_delta_bic(cfg: RunConfig, variables: Optional[List[str]], refit: str = "support") -> List[str]:
    data = _load(cfg)
    fit = telescope_fit(data, cfg.fit)
    table = delta_bic_table(data, fit, cfg.fit, variables, workers=cfg.workers, refit=refit)
    return [write_delta_bic(table, cfg.out_prefix)]


def cmd_bootstrap(cfg: RunConfig, B: int) -> List[str]:
    data = _load(cfg)
    fit = telescope_fit(data, cfg.fit)
    result = bootstrap_se(data, cfg.fit, B=B, seed=cfg.seed, fit=fit, workers=cfg.workers)
    return [write_bootstrap(result, fit, cfg.out_prefix)]


def cmd_density_curve(cfg: RunConfig, request: DensityCurveRequest) -> List[str]:
    data = _load(cfg)
    fit = telescope_fit(data, cfg.fit)
    return [write_curves(density_curves(data, fit, request), cfg.out_prefix)]


def dispatch(args: argparse.Namespace) -> List[str]:
    if args.command == "simulate":
        return cmd_simulate(args)
    cfg = run_config(args)
    if args.command == "fit":
        return cmd_fit(cfg)
    if args.command == "delta-bic":
        return cmd_delta_bic(cfg, _split(args.variables), args.refit)
    if args.command == "bootstrap":
        return cmd_bootstrap(cfg, args.B)
    request = DensityCurveRequest(
        vary=args.vary,
        levels=parse_levels(_split(args.levels)),
        others_at=_profile(args.others_at),
        y_min=args.y_min,
        y_max=args.y_max,
        points=args.points,
    )
    return cmd_density_curve(cfg, request)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        written = dispatch(args)
    except (SgndError, ValueError, OSError) as err:
        path = write_error(err, args.out_prefix)
        payload = err.to_dict() if isinstance(err, SgndError) else {"error": type(err).__name__,
                                                                     "message": str(err)}
        print(json.dumps(payload), file=sys.stderr)
        logger.error("%s failed; details in %s", args.command, path)
        return 1
    print(json.dumps({"command": args.command, "written": written}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
