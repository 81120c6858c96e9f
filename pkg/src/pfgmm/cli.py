"""Command-line interface: simulate, fit, benchmark and report subcommands.

Configuration can come from an INI file (section.key, see README), from a
previously emitted run manifest, or from flags; flags take precedence over
file values.  Every run writes a JSON manifest echoing each effective
parameter so reruns reproduce identical delimited outputs.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import FitOptions, fit_mple, fit_pls
from .data import (
    ActiveSet,
    ConditioningError,
    CovStructure,
    DataError,
    DimensionError,
    InvalidParameterError,
    read_csv,
)
from .estimator import InstrumentError, asymptotic_diagnostics, fit_pfgmm
from .penalties import parse_penalty
from .proxy import ProxySpec
from .report import render_report
from .second_stage import (
    RankDeficiencyError,
    ReducedModel,
    fit_reduced_ml,
    fit_reduced_reml,
    fit_residual_ml,
)
from .simulate import (
    EndoConfig,
    EndoSet,
    LambdaPolicy,
    SimConfig,
    run_study,
    run_sweep,
    write_aggregate_csv,
    write_cells_csv,
    write_rep_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (InvalidParameterError, DimensionError, ValueError, KeyError)
_DATA_ERRORS = (DataError, OSError, InstrumentError)
_NUMERIC_ERRORS = (ConditioningError, RankDeficiencyError, RuntimeError)

# defaults for every tunable the CLI understands; all of them are echoed
# into the manifest
DEFAULTS = {
    "seed": 7,
    "threads": 0,  # 0 -> PFGMM_THREADS env var, else 1
    "out": "results",
    "reps": 25,
    "estimators": "pfgmm",
    "penalty": "scad:lambda=0.1,a=3.7",
    "lambda_policy": "",
    "lam": 0.1,
    "unpenalized": "1,2",
    "rho": 0.5,
    "endo": "none",
    "endo_set": "set1",
    "strength": 6.0,
    "n_groups": 25,
    "group_size": 6,
    "p": 300,
    "q": 2,
    "data": "",
    "estimator": "pfgmm",
    "table": 1,
    "figure": 0,
    "input": "",
    "prefix": "figure",
}


def _resolve_threads(value):
    if value and int(value) > 0:
        return int(value)
    env = os.environ.get("PFGMM_THREADS", "")
    return max(1, int(env)) if env.strip().isdigit() else 1


def _read_config_file(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"cannot read config file {path}")
    flat = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            flat[key] = val
    return flat


def _read_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    if "config" not in manifest:
        raise DataError("manifest has no config block")
    return {k: v for k, v in manifest["config"].items()}


def _collect(args, keys):
    """Merge defaults, config file / manifest values and CLI flags."""
    merged = {k: DEFAULTS[k] for k in keys}
    file_vals = {}
    if getattr(args, "from_manifest", None):
        file_vals = _read_manifest(args.from_manifest)
    elif getattr(args, "config", None):
        file_vals = _read_config_file(args.config)
    for k, v in file_vals.items():
        if k in merged:
            merged[k] = type(DEFAULTS[k])(v) if DEFAULTS[k] is not None else v
    for k in keys:
        flag = getattr(args, k, None)
        if flag is not None:
            merged[k] = flag
    return merged


def _sim_config(cfg_vals):
    endo = None
    if cfg_vals["endo"] != "none":
        level = {
            "level1": "level1",
            "level2_intercept": "level2_intercept",
            "level2_slope": "level2_slope",
        }.get(cfg_vals["endo"])
        if level is None:
            raise InvalidParameterError(f"unknown endo mode {cfg_vals['endo']!r}")
        endo = EndoConfig(
            level=level,
            strength=float(cfg_vals["strength"]),
            subset=EndoSet.parse(cfg_vals["endo_set"]),
        )
    return SimConfig(
        n_groups=int(cfg_vals["n_groups"]),
        group_size=int(cfg_vals["group_size"]),
        p=int(cfg_vals["p"]),
        q=int(cfg_vals["q"]),
        rho=float(cfg_vals["rho"]),
        endo=endo,
        seed=int(cfg_vals["seed"]),
        reps=int(cfg_vals["reps"]),
    )


def _fit_options(cfg_vals):
    unpen = tuple(
        int(s) for s in str(cfg_vals["unpenalized"]).split(",") if s.strip()
    )
    return FitOptions(unpenalized=unpen)


def _policies(cfg_vals):
    text = str(cfg_vals["lambda_policy"]).strip()
    if not text:
        return None
    return LambdaPolicy.parse(text)


def _write_manifest(out_dir, command, cfg_vals, seed, t0, outputs):
    manifest = {
        "command": command,
        "config": {k: cfg_vals[k] for k in sorted(cfg_vals)},
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "versions": {
            "pfgmm": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "wall_time_s": round(time.time() - t0, 3),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_SIM_KEYS = (
    "seed", "threads", "out", "reps", "estimators", "penalty", "lambda_policy",
    "unpenalized", "rho", "endo", "endo_set", "strength", "n_groups",
    "group_size", "p", "q",
)


def cmd_simulate(args):
    cfg_vals = _collect(args, _SIM_KEYS)
    t0 = time.time()
    cfg = _sim_config(cfg_vals)
    estimators = [e.strip() for e in str(cfg_vals["estimators"]).split(",") if e.strip()]
    study = run_study(
        cfg,
        estimators,
        penalty=parse_penalty(cfg_vals["penalty"]),
        lambda_policy=_policies(cfg_vals),
        opts=_fit_options(cfg_vals),
        threads=_resolve_threads(cfg_vals["threads"]),
    )
    out_dir = Path(cfg_vals["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rep_path = out_dir / "reps.csv"
    agg_path = out_dir / "aggregate.csv"
    write_rep_csv(rep_path, study.summaries)
    write_aggregate_csv(agg_path, study)
    if study.failures:
        print(f"warning: {len(study.failures)} replication fits failed", file=sys.stderr)
    _write_manifest(out_dir, "simulate", cfg_vals, cfg.seed, t0, [rep_path, agg_path])
    print(f"wrote {rep_path} and {agg_path}")
    return EXIT_OK


_FIT_KEYS = ("seed", "out", "data", "estimator", "penalty", "lam", "unpenalized")


def cmd_fit(args):
    cfg_vals = _collect(args, _FIT_KEYS)
    t0 = time.time()
    if not cfg_vals["data"]:
        raise InvalidParameterError("fit requires --data")
    ds = read_csv(cfg_vals["data"])
    pen = parse_penalty(cfg_vals["penalty"]).with_lam(float(cfg_vals["lam"]))
    opts = _fit_options(cfg_vals) if str(cfg_vals["unpenalized"]).strip() else FitOptions()
    estimator = str(cfg_vals["estimator"]).lower()
    cov = CovStructure.diagonal(ds.q)

    se_map = None
    if estimator == "mple":
        fit = fit_mple(ds, pen, opts=opts, cov=cov)
        theta, sigma2 = fit.eta
        beta = fit.beta
    elif estimator == "pls":
        fit = fit_pls(ds, pen, opts=opts)
        res = fit_residual_ml(ds, fit.beta, cov=cov)
        theta, sigma2 = res.theta, res.sigma2
        beta = fit.beta
    elif estimator in ("pfgmm", "pfgmm+2mle", "pfgmm+2reml"):
        fit = fit_pfgmm(ds, pen, opts=opts)
        beta = fit.beta.copy()
        if estimator == "pfgmm" or not len(fit.active_set):
            res = fit_residual_ml(ds, fit.beta, cov=cov)
            theta, sigma2 = res.theta, res.sigma2
        else:
            reduced = ReducedModel.from_dataset(ds, fit.active_set)
            refit = (fit_reduced_ml if estimator.endswith("2mle") else fit_reduced_reml)(
                reduced, cov=cov
            )
            beta = np.zeros(ds.p)
            beta[fit.active_set.positions] = refit.beta_S
            theta, sigma2 = refit.theta, refit.sigma2
        if len(fit.active_set):
            diag = asymptotic_diagnostics(ds, fit, cov=cov)
            se_map = {
                f"x_{j}": float(se)
                for j, se in zip(fit.active_set.indices, diag.se)
            }
    else:
        raise InvalidParameterError(f"unknown estimator {estimator!r}")

    active = ActiveSet.from_beta(beta)
    out_dir = Path(cfg_vals["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    fit_path = out_dir / "fit.json"
    payload = {
        "estimator": estimator,
        "n": ds.n,
        "p": ds.p,
        "q": ds.q,
        "active_set": [f"x_{j}" for j in active.indices],
        "beta": {f"x_{j}": float(beta[j - 1]) for j in active.indices},
        "eta": {"theta": [float(t) for t in np.ravel(theta)], "sigma2": float(sigma2)},
        "standard_errors": se_map,
        "objective": None if math.isnan(fit.objective) else float(fit.objective),
        "converged": bool(fit.converged),
    }
    with open(fit_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, "fit", cfg_vals, int(cfg_vals["seed"]), t0, [fit_path])
    print(f"wrote {fit_path}")
    return EXIT_OK


_BENCH_KEYS = (
    "seed", "threads", "out", "reps", "penalty", "unpenalized", "rho",
    "table", "figure", "n_groups", "group_size", "p", "q",
)

_TABLE_CELLS = {
    1: [("none", None, 0.0)]
    + [(lvl, tag, 6.0) for lvl in ("level1", "level2_intercept", "level2_slope")
       for tag in ("set1", "set2", "set3", "set4")],
    2: [("none", None, 0.0)],
    3: [("level1", tag, 6.0) for tag in ("set1", "set2", "set3", "set4")],
}

_TABLE_ESTIMATORS = {
    1: ("mple",),
    2: ("pls", "pfgmm", "pfgmm+2mle", "pfgmm+2reml"),
    3: ("pls", "pfgmm", "pfgmm+2mle", "pfgmm+2reml"),
}

_FIGURE_SWEEPS = {
    1: ("level1", 0.5), 2: ("level1", 0.0),
    3: ("level2_intercept", 0.5), 4: ("level2_slope", 0.5),
}


def cmd_benchmark(args):
    cfg_vals = _collect(args, _BENCH_KEYS)
    t0 = time.time()
    base = _sim_config({**cfg_vals, "endo": "none", "endo_set": "set1",
                        "strength": 0.0, "estimators": ""})
    threads = _resolve_threads(cfg_vals["threads"])
    opts = _fit_options(cfg_vals)
    pen = parse_penalty(cfg_vals["penalty"])
    out_dir = Path(cfg_vals["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    if int(cfg_vals["figure"]):
        fig = int(cfg_vals["figure"])
        if fig not in _FIGURE_SWEEPS:
            raise InvalidParameterError("figure must be 1-4")
        level, rho = _FIGURE_SWEEPS[fig]
        cfg = dataclasses.replace(base, rho=rho)
        rows = run_sweep(
            cfg, ("pls", "pfgmm"), level,
            sets=("set1", "set2", "set3", "set4"),
            strengths=(0.0, 0.2, 0.5, 1.5, 6.0),
            penalty=pen, opts=opts, threads=threads,
        )
        cells_path = out_dir / f"figure{fig}.csv"
        write_cells_csv(cells_path, rows)
        outputs.append(cells_path)
        outputs.extend(render_report(cells_path, out_dir, prefix=f"figure{fig}"))
    else:
        table = int(cfg_vals["table"])
        if table not in _TABLE_CELLS:
            raise InvalidParameterError("table must be 1, 2 or 3")
        rows = []
        for level, tag, strength in _TABLE_CELLS[table]:
            endo = None if level == "none" else EndoConfig(
                level=level, strength=strength, subset=EndoSet.parse(tag)
            )
            cfg = dataclasses.replace(base, endo=endo)
            study = run_study(
                cfg, _TABLE_ESTIMATORS[table], penalty=pen, opts=opts,
                threads=threads,
            )
            for row in study.aggregate():
                rows.append({
                    "endogeneity": level,
                    "endo_set": tag or "none",
                    **row,
                })
        table_path = out_dir / f"table{table}.csv"
        cols = ["endogeneity", "endo_set", "estimator", "stat", "n_reps",
                "S_size", "TP", "PE", "beta_1", "beta_2", "beta_3", "beta_4",
                "beta_5", "beta_N", "sigma2", "theta1", "theta2"]
        lines = [",".join(cols)]
        for row in rows:
            vals = []
            for c in cols:
                v = row.get(c, "")
                if isinstance(v, float):
                    vals.append("" if math.isnan(v) else format(v, ".10g"))
                else:
                    vals.append(str(v))
            lines.append(",".join(vals))
        table_path.write_text("\n".join(lines) + "\n")
        outputs.append(table_path)

    _write_manifest(out_dir, "benchmark", cfg_vals, int(cfg_vals["seed"]), t0, outputs)
    print("wrote " + ", ".join(str(p) for p in outputs))
    return EXIT_OK


_REPORT_KEYS = ("out", "input", "prefix")


def cmd_report(args):
    cfg_vals = _collect(args, _REPORT_KEYS)
    t0 = time.time()
    if not cfg_vals["input"]:
        raise InvalidParameterError("report requires --input")
    written = render_report(cfg_vals["input"], cfg_vals["out"], prefix=cfg_vals["prefix"])
    _write_manifest(cfg_vals["out"], "report", cfg_vals, 0, t0, written)
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pfgmm",
        description="Fixed-effects selection in mixed models under endogeneity",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file (flags override)")
        sp.add_argument("--from-manifest", help="rerun from an emitted manifest")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed for all randomness")

    sim = sub.add_parser("simulate", help="run one synthetic study cell")
    common(sim)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--estimators", help="comma list: mple,pls,pfgmm,pfgmm+2mle,pfgmm+2reml")
    sim.add_argument("--penalty", help="e.g. scad:lambda=0.1,a=3.7")
    sim.add_argument("--lambda-policy", dest="lambda_policy",
                     help="fixed:<v> | bic[:g1,g2,..] | exbic[:g1,g2,..]")
    sim.add_argument("--unpenalized", help="comma list of 1-based indices")
    sim.add_argument("--rho", type=float, help="AR-1 covariate correlation")
    sim.add_argument("--endo", choices=["none", "level1", "level2_intercept",
                                        "level2_slope"])
    sim.add_argument("--endo-set", dest="endo_set",
                     help="set1|set2|set3|set4|custom:i,j,..")
    sim.add_argument("--strength", type=float, help="rho_e or rho_b")
    sim.add_argument("--n-groups", dest="n_groups", type=int)
    sim.add_argument("--group-size", dest="group_size", type=int)
    sim.add_argument("--p", type=int)
    sim.add_argument("--q", type=int)
    sim.add_argument("--threads", type=int)
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit one estimator to a CSV dataset")
    common(fit)
    fit.add_argument("--data", help="CSV with columns group_id,y,x_1..,z_1..")
    fit.add_argument("--estimator",
                     choices=["mple", "pls", "pfgmm", "pfgmm+2mle", "pfgmm+2reml"])
    fit.add_argument("--penalty")
    fit.add_argument("--lambda", dest="lam", type=float)
    fit.add_argument("--unpenalized")
    fit.set_defaults(func=cmd_fit)

    bench = sub.add_parser("benchmark", help="reproduce a study table or figure")
    common(bench)
    bench.add_argument("--table", type=int, help="1, 2 or 3")
    bench.add_argument("--figure", type=int, help="1-4 (active-set sweeps)")
    bench.add_argument("--reps", type=int)
    bench.add_argument("--penalty")
    bench.add_argument("--unpenalized")
    bench.add_argument("--rho", type=float)
    bench.add_argument("--n-groups", dest="n_groups", type=int)
    bench.add_argument("--group-size", dest="group_size", type=int)
    bench.add_argument("--p", type=int)
    bench.add_argument("--q", type=int)
    bench.add_argument("--threads", type=int)
    bench.set_defaults(func=cmd_benchmark)

    rep = sub.add_parser("report", help="render figures from emitted tables")
    common(rep)
    rep.add_argument("--input", help="cells or aggregate CSV")
    rep.add_argument("--prefix")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
