"""Command-line interface: ``matchcohort analyze | simulate | reproduce``.

Errors are reported on standard error as one line ``E:<code>:<kind>: message``
and the process exits with ``<code>``: 1 for usage or parameter errors, 2 for
input-data errors, 3 for numerical (estimation) failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import experiments as ex
from .data import (
    AllPairSummary,
    PairedCohort,
    Schema,
    filter_discordant,
    ingest_pairs,
    parse_counts,
    write_cohort,
)
from .errors import DataError, EstimationError, MatchCohortError, ParameterError
from .estimators import (
    DEFAULT_QUAD_ORDER,
    fit_clr,
    fit_crude_all,
    fit_crude_discordant,
    fit_explicit,
    fit_mixed_all,
    fit_mixed_discordant,
    fit_within_between,
)
from .numerics import DEFAULT_TOL, DesignSpec
from .simulation import (
    CovariateSimConfig,
    TwinSimConfig,
    clr_limit,
    derive_seed_stream,
    generate_covariate_sample,
    generate_discordant_outcome_sample,
    generate_twin_sample,
    marginal_psi_m,
    solve_outcome_joint,
    standardized_psi,
    true_psi,
)

SEED_ENV = "MATCHCOHORT_SEED"

ANALYZE_METHODS = (
    "explicit",
    "clr",
    "mixed-discordant",
    "crude-discordant",
    "crude-all",
    "within-between-linear",
    "within-between-saturated",
    "mixed-all",
    "mixed-all-naive",
)
# methods that need exposure-discordant pairs only
DISCORDANT_ONLY = {"clr", "mixed-discordant", "crude-discordant"}
ALL_SET = ("clr", "mixed-discordant", "crude-discordant", "crude-all", "within-between-saturated", "mixed-all")

REPRODUCE_TARGETS = ("table2", "fig_power_psi", "fig_power_phi", "fig_level_phi", "sensitivity")
PSI_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
PHI_GRID = (4.0, 7.0, 10.0, 13.0, 16.0, 19.0, 22.0)

EXIT_CODES = ((ParameterError, 1), (DataError, 2), (EstimationError, 3))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="matchcohort", description="Analysis and simulation of 1:1 matched cohort and twin data.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug output)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="estimate the exposure effect from pair data or counts")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="CSV/TSV file of subjects (long format) or pairs (--wide)")
    src.add_argument("--counts", help="inline counts, e.g. t=0,u=4,v=2,w=0, or JSON")
    a.add_argument("--method", default="all",
                   help="comma-separated methods from: all, " + ", ".join(ANALYZE_METHODS))
    a.add_argument("--wide", action="store_true", help="input has one row per pair")
    a.add_argument("--delimiter", choices=[",", "tab"], help="force the field delimiter")
    a.add_argument("--pair-id", default="pair_id")
    a.add_argument("--member", default="member")
    a.add_argument("--exposure", default="exposure")
    a.add_argument("--outcome", default="outcome")
    a.add_argument("--covariates", default="", help="comma-separated confounders for the explicit model")
    a.add_argument("--interactions", default="", help="comma-separated products for the explicit model, e.g. V:W")
    a.add_argument("--discordant-only", action="store_true",
                   help="drop exposure-concordant pairs before the discordant-pair methods")
    a.add_argument("--continuity", action="store_true", help="add 0.5 to every cell (clr, crude-discordant)")
    a.add_argument("--demo-naive-bias", action="store_true",
                   help="permit mixed-all-naive, whose intercept ignores the exposure pattern (biased)")
    a.add_argument("--quad-order", type=int, default=DEFAULT_QUAD_ORDER)
    a.add_argument("--tol", type=float, default=DEFAULT_TOL)
    a.add_argument("--json", action="store_true", help="write JSON instead of TSV")

    s = sub.add_parser("simulate", help="generate a synthetic cohort in the canonical CSV format")
    s.add_argument("--model", required=True, choices=["twin", "discordant-outcome", "covariate"])
    s.add_argument("--config", help="flat key=value or JSON file of model parameters (flags override)")
    s.add_argument("--pairs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--phi", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--theta", type=float)
    s.add_argument("--sigma", type=float)
    s.add_argument("--psi-c", type=float)
    s.add_argument("--p", type=float)
    s.add_argument("--q", type=float)
    s.add_argument("--c", type=float)
    s.add_argument("--alpha", type=_floats)
    s.add_argument("--gamma", type=_floats)
    s.add_argument("--keep-latent", action="store_true", help="also write the latent pair intercept as covariate b")
    s.add_argument("--out", help="cohort file (default: standard output)")
    s.add_argument("--sidecar", help="oracle JSON file (default: <out>.json when --out is given)")

    r = sub.add_parser("reproduce", help="run a Monte Carlo reproduction")
    r.add_argument("target", choices=REPRODUCE_TARGETS)
    r.add_argument("--reps", type=int, default=500)
    r.add_argument("--pairs", type=int, default=2000)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1, help="worker processes; output does not depend on it")
    r.add_argument("--quad-order", type=int, default=DEFAULT_QUAD_ORDER)
    r.add_argument("--grid", type=_floats, help="override the sweep grid")
    r.add_argument("--psi-c", type=float, default=0.4, help="fixed psi_c for fig_power_phi")
    r.add_argument("--phi", type=float, default=4.0, help="fixed phi for fig_power_psi")
    r.add_argument("--out", default=".", help="directory for output files")
    r.add_argument("--json", action="store_true", help="print JSON instead of TSV/CSV on standard output")
    return p


# --------------------------------------------------------------------------
# analyze


def cohort_from_summary(summary: AllPairSummary) -> PairedCohort:
    """Expand pair-pattern counts into a cohort (exposed member first)."""
    d = summary.discordant
    rows = []
    rows += [((1, 0), (1, 1))] * d.t + [((1, 0), (1, 0))] * d.u + [((1, 0), (0, 1))] * d.v + [((1, 0), (0, 0))] * d.w
    for x, counts in ((0, summary.unexposed), (1, summary.exposed)):
        for k, y in enumerate(((0, 0), (1, 0), (1, 1))):
            rows += [((x, x), y)] * counts[k]
    x = np.array([r[0] for r in rows], dtype=np.int8).reshape(-1, 2)
    y = np.array([r[1] for r in rows], dtype=np.int8).reshape(-1, 2)
    ids = tuple(f"c{i + 1}" for i in range(len(rows)))
    return PairedCohort(ids, x, y, source="expanded counts")


def _parse_methods(text, has_covariates):
    names = [m.strip().replace("_", "-") for m in text.split(",") if m.strip()]
    if not names:
        raise UsageError("no method given")
    out = []
    for m in names:
        if m == "all":
            out += list(ALL_SET) + (["explicit"] if has_covariates else [])
        elif m in ANALYZE_METHODS:
            out.append(m)
        else:
            raise UsageError(f"unknown method {m!r}; choose from all, {', '.join(ANALYZE_METHODS)}")
    seen = []
    for m in out:
        if m not in seen:
            seen.append(m)
    return seen, "all" in names


def _load(args):
    if args.counts is not None:
        parsed = parse_counts(args.counts)
        summary = parsed if isinstance(parsed, AllPairSummary) else AllPairSummary(discordant=parsed)
        return cohort_from_summary(summary)
    path = Path(args.input)
    if not path.is_file():
        raise DataError(f"input file not found: {args.input}")
    delim = {"tab": "\t", ",": ","}.get(args.delimiter)
    schema = Schema(args.pair_id, args.member, args.exposure, args.outcome, wide=args.wide, delimiter=delim)
    return ingest_pairs(str(path), schema)


def _run_method(m, cohort, args, filter_first):
    disc = filter_discordant(cohort) if filter_first and m in DISCORDANT_ONLY else cohort
    if m == "clr":
        return fit_clr(disc, continuity=args.continuity)
    if m == "crude-discordant":
        return fit_crude_discordant(disc, continuity=args.continuity)
    if m == "mixed-discordant":
        return fit_mixed_discordant(disc, quad_order=args.quad_order, tol=args.tol)
    if m == "crude-all":
        return fit_crude_all(cohort)
    if m == "within-between-linear":
        return fit_within_between(cohort, "linear", tol=args.tol)
    if m == "within-between-saturated":
        return fit_within_between(cohort, "saturated", tol=args.tol)
    if m == "mixed-all":
        return fit_mixed_all(cohort, quad_order=args.quad_order, tol=args.tol)
    if m == "mixed-all-naive":
        if not args.demo_naive_bias:
            raise UsageError("mixed-all-naive demonstrates a biased model; add --demo-naive-bias to run it")
        return fit_mixed_all(cohort, "naive", quad_order=args.quad_order, tol=args.tol, allow_naive=True)
    if m == "explicit":
        covs = [c.strip() for c in args.covariates.split(",") if c.strip()]
        inter = [tuple(t.strip().split(":")) for t in args.interactions.split(",") if t.strip()]
        if any(len(t) != 2 for t in inter):
            raise UsageError("interactions must be written as A:B")
        return fit_explicit(cohort, DesignSpec.from_covariates(covs, interactions=inter), tol=args.tol)
    raise UsageError(f"unknown method {m!r}")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


REPORT_COLUMNS = ("method", "estimand", "estimate", "se", "ci_low", "ci_high", "z", "p", "n_pairs")


def reports_to_tsv(reports) -> str:
    lines = ["\t".join(REPORT_COLUMNS + ("nuisance",))]
    for rep in reports:
        rec = rep.to_record()
        nuis = ";".join(f"{k}={_fmt(float(v))}" for k, v in rep.nuisance.items())
        lines.append("\t".join([_fmt(rec[c]) for c in REPORT_COLUMNS] + [nuis]))
    return "\n".join(lines) + "\n"


def reports_to_json(reports) -> str:
    out = []
    for rep in reports:
        rec = rep.to_record()
        rec["diagnostics"] = rep.diagnostics
        out.append(rec)
    return ex.to_json_text(out)


def cmd_analyze(args, stdout) -> int:
    has_cov = bool(args.covariates.strip())
    methods, is_all = _parse_methods(args.method, has_cov)
    cohort = _load(args)
    filter_first = is_all or args.discordant_only
    reports = [_run_method(m, cohort, args, filter_first) for m in methods]
    stdout.write(reports_to_json(reports) if args.json else reports_to_tsv(reports))
    return 0


# --------------------------------------------------------------------------
# simulate


def _read_config(path):
    text = Path(path).read_text()
    s = text.strip()
    if s.startswith("{"):
        try:
            return json.loads(s)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON config: {exc}") from None
    cfg = {}
    for line in s.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {line!r} is not key=value")
        k, v = line.split("=", 1)
        v = v.strip()
        try:
            cfg[k.strip().replace("-", "_")] = _floats(v) if "," in v else float(v)
        except (ValueError, argparse.ArgumentTypeError):
            raise DataError(f"config value {v!r} for {k.strip()!r} is not numeric") from None
    return cfg


def _sim_params(args):
    cfg = _read_config(args.config) if args.config else {}
    flags = {"n_pairs": args.pairs, "seed": args.seed, "phi": args.phi, "rho": args.rho, "theta": args.theta,
             "sigma": args.sigma, "psi_c": args.psi_c, "p": args.p, "q": args.q, "c": args.c,
             "alpha": args.alpha, "gamma": args.gamma}
    if "pairs" in cfg:
        cfg["n_pairs"] = cfg.pop("pairs")
    cfg.update({k: v for k, v in flags.items() if v is not None})
    cfg.setdefault("seed", _default_seed())
    cfg.setdefault("n_pairs", 2000)
    for k in ("n_pairs", "seed"):
        if float(cfg[k]) != int(cfg[k]):
            raise ParameterError(f"{k} must be an integer")
        cfg[k] = int(cfg[k])
    return cfg


def _pick(cfg, allowed, model):
    extra = sorted(set(cfg) - set(allowed) - {"seed"})
    if extra:
        raise ParameterError(f"parameter(s) not used by the {model} model: {', '.join(extra)}")
    return {k: v for k, v in cfg.items() if k in allowed}


def cmd_simulate(args, stdout) -> int:
    cfg = _sim_params(args)
    rng = derive_seed_stream(cfg["seed"], 0)
    model = args.model
    if model == "twin":
        kw = _pick(cfg, ("phi", "psi_c", "n_pairs", "rho", "theta", "sigma"), model)
        conf = TwinSimConfig(seed=cfg["seed"], **kw)
        cohort = generate_twin_sample(conf, rng, keep_latent=args.keep_latent)
        ej = conf.exposure_joint
        oracle = {"psi_c": conf.psi_c, "psi_s": standardized_psi(conf), "psi_m": marginal_psi_m(conf),
                  "theta": conf.theta_value, "p_discordant": ej.discordance,
                  "exposure_joint": dict(zip(("p00", "p01", "p10", "p11"), ej.probabilities.tolist()))}
    elif model == "discordant-outcome":
        kw = _pick(cfg, ("p", "q", "c", "n_pairs"), model)
        missing = [k for k in ("p", "q", "c") if k not in kw]
        if missing:
            raise ParameterError(f"discordant-outcome model needs --{', --'.join(missing)}")
        oj = solve_outcome_joint(kw["p"], kw["q"], kw["c"])
        cohort = generate_discordant_outcome_sample(kw["p"], kw["q"], kw["c"], kw["n_pairs"], rng)
        oracle = {"clr_limit": clr_limit(kw["p"], kw["q"]), "true_psi": true_psi(kw["p"], kw["q"], kw["c"]),
                  "cells": {"pi00": oj.pi00, "pi01": oj.pi01, "pi10": oj.pi10, "pi11": oj.pi11}}
    else:
        kw = _pick(cfg, ("alpha", "gamma", "psi_c", "n_pairs"), model)
        kw = {k: tuple(v) if k in ("alpha", "gamma") else v for k, v in kw.items()}
        conf = CovariateSimConfig(seed=cfg["seed"], **kw)
        cohort = generate_covariate_sample(conf, rng, keep_latent=args.keep_latent)
        oracle = {"psi_c": conf.psi_c}
    sidecar = {"model": model, "parameters": cfg, "oracle": oracle}
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_cohort(cohort, fh)
    else:
        write_cohort(cohort, stdout)
    side = args.sidecar or (f"{args.out}.json" if args.out else None)
    if side:
        Path(side).write_text(ex.to_json_text(sidecar))
    return 0


# --------------------------------------------------------------------------
# reproduce


def _level_band(rate, reps):
    return abs(rate - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / reps)


def cmd_reproduce(args, stdout) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = {"n_pairs": args.pairs, "seed": seed, "workers": args.threads, "quad_order": args.quad_order}
    if args.reps < 1:
        raise ParameterError("--reps must be at least 1")
    target = args.target
    if target == "table2":
        rep = ex.run_table2(args.reps, **common)
        tsv = ex.summaries_to_tsv(rep.summaries)
        js = ex.to_json_text(rep)
        (out / "table2.tsv").write_text(tsv)
        (out / "table2.json").write_text(js)
        stdout.write(js if args.json else tsv)
        if any(s.degenerate for s in rep.summaries):
            warnings.warn("empirical standard errors undefined (fewer than 2 successful replicates)", stacklevel=1)
        return 0
    if target == "sensitivity":
        rep = ex.run_sensitivity_suite(args.reps, **common)
        blocks = []
        for name, r in rep.items():
            blocks.append(f"# {name}\n" + ex.summaries_to_tsv(r.summaries))
        tsv = "\n".join(blocks)
        js = ex.to_json_text(rep)
        (out / "sensitivity.tsv").write_text(tsv)
        (out / "sensitivity.json").write_text(js)
        stdout.write(js if args.json else tsv)
        return 0
    if target == "fig_power_psi":
        curve = ex.run_power_curve("psi_c_grid", args.grid or PSI_GRID, args.reps, phi_fixed=args.phi, **common)
    elif target == "fig_power_phi":
        curve = ex.run_power_curve("phi_grid", args.grid or PHI_GRID, args.reps, psi_c_fixed=args.psi_c, **common)
    else:
        curve = ex.run_power_curve("phi_grid", args.grid or PHI_GRID, args.reps, psi_c_fixed=0.0, **common)
    doc = curve.to_json()
    if target == "fig_level_phi":
        doc["level_in_band"] = [[_level_band(r, n) for r, n in zip(rr, nn)]
                                for rr, nn in zip(curve.rates.tolist(), curve.replicates.tolist())]
    csv_text = curve.to_csv()
    js = ex.to_json_text(doc)
    (out / f"{target}.csv").write_text(csv_text)
    (out / f"{target}.json").write_text(js)
    stdout.write(js if args.json else csv_text)
    return 0


# --------------------------------------------------------------------------


def _exit_code(exc):
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 3


def _one_line(msg):
    return " ".join(str(msg).split())


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                            format="%(levelname)s:%(name)s: %(message)s", stream=stderr)
        cmd = {"analyze": cmd_analyze, "simulate": cmd_simulate, "reproduce": cmd_reproduce}[args.command]
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda m, c, f, l, file=None, line=None: stderr.write(
                f"warning: {_one_line(m)}\n")
            return cmd(args, stdout)
    except UsageError as exc:
        stderr.write(f"E:1:usage: {_one_line(exc)}\n")
        return 1
    except MatchCohortError as exc:
        code = _exit_code(exc)
        stderr.write(f"E:{code}:{type(exc).__name__}: {_one_line(exc)}\n")
        return code
    except OSError as exc:
        stderr.write(f"E:2:{type(exc).__name__}: {_one_line(exc)}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
