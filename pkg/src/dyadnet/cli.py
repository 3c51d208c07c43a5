"""Command-line entry point: ``dyadnet {simulate,estimate,distances,mc,validate}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import __version__
from .core import DyadnetError, ModelSpec, build_covariates, validate_dataset
from .estimators import BandwidthRule, g_hat, partial_effects
from .harness import PRESETS, EstimatorConfig, McConfig, format_table, run_estimator, run_mc, with_workers
from .io import ingest, read_nodes, write_dataset, write_matrix
from .matching import d2_heteroskedastic, d2_homoskedastic, denoise
from .simulate import DgpSpec, simulate

log = logging.getLogger("dyadnet")


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings ``"inf"``/``"-inf"``/``null``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _emit(payload, out):
    text = json.dumps(_clean(payload), indent=2, allow_nan=False)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="parallel workers for Monte Carlo runs")
    p.add_argument("--out", default=None, help="output path (prefix for simulate)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _data_args(p):
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--missing-implicit", action="store_true", help="pairs absent from the edge file are unobserved")
    p.add_argument("--absent-as-zero", action="store_true", help="pairs absent from the edge file are observed zeros")
    p.add_argument("--discrete", default=None, help="comma-separated discrete covariate columns (overrides detection)")
    p.add_argument("--covariates", default=None,
                   help="pair covariate terms, e.g. 'sqdiff:x1,eq:x2' (default: eq for discrete, sqdiff otherwise)")


def _nbhd_args(p):
    p.add_argument("--ni-const", type=float, default=1.0, help="neighborhood size constant c in round(c sqrt(n ln n))")
    p.add_argument("--x-rule", default="exact", choices=["exact", "ball", "ignore"])


def _load(args):
    discrete = args.discrete.split(",") if args.discrete else None
    ds = ingest(args.nodes, args.edges, args.mask, missing_implicit=args.missing_implicit,
                absent_as_zero=args.absent_as_zero, discrete=discrete)
    _, _, _, cols = read_nodes(args.nodes, discrete)
    link = getattr(args, "link", "identity")
    if args.covariates:
        model = ModelSpec.parse(args.covariates, cols, link)
    else:
        model = ModelSpec.default_for(ds.discrete, link)
    return ds, model, cols


def cmd_simulate(args):
    params = {}
    for item in args.param or []:
        key, _, val = item.partition("=")
        params[key.strip()] = float(val)
    spec = DgpSpec(kind=args.dgp, n=args.n, rho=args.rho, params=params, missing_rate=args.missing_rate,
                   seed=args.seed)
    ds, truth = simulate(spec)
    prefix = args.out or f"sim_{spec.kind}_n{spec.n}_s{spec.seed}"
    meta = {"dgp": {"kind": spec.kind, "n": spec.n, "rho": spec.rho, "missing_rate": spec.missing_rate,
                    "params": params, "seed": spec.seed}}
    paths = write_dataset(ds, prefix, truth, meta)
    _emit({"paths": paths, **meta}, None)
    return 0


def cmd_estimate(args):
    ds, model, cols = _load(args)
    W = build_covariates(ds.X, model)
    cfg = EstimatorConfig(name=args.estimator, distance=args.distance, kernel=args.kernel,
                          bandwidth=BandwidthRule.parse(args.bandwidth), link=model.link.kind,
                          ni_const=args.ni_const, x_rule=args.x_rule, clamp_eps=args.clamp_eps)
    rep = run_estimator(ds, W, cfg)
    if args.g_hat:
        link = cfg.link_spec()
        Yt, _ = denoise(ds, c=args.ni_const, x_rule=args.x_rule, kind="unique-pair-average")
        rep.g_hat = g_hat(Yt, W, rep.beta, link)
        rep.partial_effects = partial_effects(W, np.where(np.isfinite(rep.g_hat), rep.g_hat, np.nan), rep.beta, link)
    payload = rep.to_dict()
    payload["config"] = {**cfg.to_dict(), "covariates": model.describe(cols), "seed": args.seed,
                         "nodes": args.nodes, "edges": args.edges, "mask": args.mask}
    payload["ids"] = list(ds.ids)
    _emit(payload, args.out)
    return 0


def cmd_distances(args):
    ds, model, _ = _load(args)
    W = build_covariates(ds.X, model)
    den = nbhd = None
    if args.method == "hetero" or args.dump_dinf or args.dump_ystar:
        den, nbhd = denoise(ds, c=args.ni_const, x_rule=args.x_rule)
    d2 = d2_homoskedastic(ds, W) if args.method == "homo" else d2_heteroskedastic(den, W)
    if args.dump_dinf:
        write_matrix(nbhd.dInf, ds.ids, args.dump_dinf)
    if args.dump_ystar:
        write_matrix(np.where(den.mask, den.Ystar, np.nan), ds.ids, args.dump_ystar)
    write_matrix(d2.d2, ds.ids, args.out or sys.stdout)
    return 0


def cmd_mc(args):
    if args.preset:
        kw = {"reps": args.reps, "seed": args.seed, "workers": args.threads}
        if args.preset == "table2":
            kw["fast"] = args.fast
        cfgs = PRESETS[args.preset](**{k: v for k, v in kw.items() if v is not None})
    else:
        names = args.estimators.split(",")
        ests = tuple(EstimatorConfig(name=nm.strip(), link="logistic" if args.dgp.startswith("logi") and
                                     nm.strip() == "single-index" else "identity") for nm in names)
        cfgs = [McConfig(dgp=DgpSpec(kind=args.dgp, n=args.n, rho=args.rho, missing_rate=args.missing_rate),
                         estimators=ests, reps=args.reps or 100, seed=args.seed, workers=args.threads)]
    cfgs = with_workers(cfgs, args.threads)
    summaries = []
    for k, cfg in enumerate(cfgs):
        summaries.append(run_mc(cfg, dump=args.dump, append=k > 0))
    layout = args.layout or (args.preset if args.preset else "plain")
    sys.stdout.write(format_table(summaries, layout) + "\n")
    if args.out:
        _emit({"summaries": [s.to_dict() for s in summaries]}, args.out)
    return 0


def cmd_validate(args):
    discrete = args.discrete.split(",") if args.discrete else None
    try:
        ds = ingest(args.nodes, args.edges, args.mask, missing_implicit=args.missing_implicit,
                    absent_as_zero=args.absent_as_zero, discrete=discrete)
    except DyadnetError as exc:
        _emit({"ok": False, "error": str(exc)}, args.out)
        return 1
    report = validate_dataset(ds)
    _emit({**report.to_dict(), "summary": report.summary(), "ids": list(ds.ids)}, args.out)
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyadnet", description="Dyadic regression with nonparametric "
                                     "unobserved heterogeneity: simulation, estimation and Monte Carlo.")
    parser.add_argument("--version", action="version", version=f"dyadnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset and write CSVs plus a truth JSON")
    _common(p)
    p.add_argument("--dgp", default="gauss", choices=["gauss", "logit", "gaussian-homophily", "logistic-homophily"])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--param", action="append", help="DGP parameter override key=value (repeatable)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate the covariate coefficients from CSV data")
    _common(p)
    _data_args(p)
    _nbhd_args(p)
    p.add_argument("--estimator", default="kernel", choices=["kernel", "nn1", "fe", "logit-mle", "single-index"])
    p.add_argument("--distance", default="homo", choices=["homo", "hetero"])
    p.add_argument("--link", default="identity", choices=["identity", "logit", "logistic", "exp", "exponential"])
    p.add_argument("--kernel", default="epa", choices=["epa", "epanechnikov", "uniform", "triangular"])
    p.add_argument("--bandwidth", default="rot", help="'rot' or a fixed squared bandwidth")
    p.add_argument("--clamp-eps", type=float, default=None, help="clamp for denoised values before the inverse link")
    p.add_argument("--g-hat", action="store_true", help="also report pair fixed effects and partial effects")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("distances", help="write the estimated pseudo-distance matrix as CSV")
    _common(p)
    _data_args(p)
    _nbhd_args(p)
    p.add_argument("--method", default="homo", choices=["homo", "hetero"])
    p.add_argument("--dump-dinf", default=None, help="also write the similarity distance matrix")
    p.add_argument("--dump-ystar", default=None, help="also write the denoised outcome matrix")
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("mc", help="run a Monte Carlo design and print a summary table")
    _common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--fast", action="store_true", help="table2 at n=200")
    p.add_argument("--dump", default=None, help="per-replication estimates CSV")
    p.add_argument("--layout", choices=["table1", "table2", "plain"], default=None)
    p.add_argument("--dgp", default="gauss")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--estimators", default="fe,kernel,nn1")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("validate", help="check a dataset and report problems")
    _common(p)
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--missing-implicit", action="store_true")
    p.add_argument("--absent-as-zero", action="store_true")
    p.add_argument("--discrete", default=None)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except DyadnetError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
