"""Command-line interface.

Exit codes: 0 success, 2 input/validation error, 3 estimation failure
(including non-convergence without --allow-partial), 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import report as rpt
from .dataset import (
    BINARY,
    CATEGORICAL,
    CONTINUOUS,
    FormulaSpec,
    TableSchema,
    build_design,
    exclusion_counts,
    load_table,
    per_unit_transform,
    write_table,
)
from .decomposition import decompose, effect_by_dose
from .diagnostics import attrition_check, balance_table, density_export, skewness_test
from .errors import CoercionError, EstimationError, SfdecompError, ValidationError
from .frontier import jlms_index, sf_fit
from .linear_model import heterogeneous_ols, ols_fit
from .synthetic import ESTIMATORS, DgpConfig, generate, monte_carlo

log = logging.getLogger("sfdecomp")

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_USAGE = 0, 2, 3, 64

EPILOG = """exit codes:
  0   success, report written
  2   input or validation error (diagnostics on stderr)
  3   estimation failure, e.g. non-convergence without --allow-partial
  64  usage error (unknown flag, missing required flag)"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _add_io(p, data=True):
    g = p.add_argument_group("input/output")
    if data:
        g.add_argument("--data", required=True, help="delimited input file (UTF-8, header row)")
        g.add_argument("--delimiter", default=",", help="field delimiter of --data (default ',')")
        g.add_argument("--unit", default="unit", help="household id column (default 'unit')")
        g.add_argument("--period", default=None,
                       help="period column with baseline/followup labels (default: 'period' when present)")
        g.add_argument("--cluster", default="branch", help="randomization cluster column (default 'branch')")
        g.add_argument("--categorical", default="", help="comma list of categorical columns")
    g.add_argument("--config", default=None, help="JSON file with default option values (or DGP for simulate/montecarlo)")
    g.add_argument("--out", default=None, help="report path (default stdout)")
    g.add_argument("--format", choices=("json", "csv"), default="json", help="report format (default json)")


def _add_model(p, outcome_required=True):
    g = p.add_argument_group("model")
    g.add_argument("--outcome", required=False, default=None, help="outcome column")
    g.add_argument("--treatment", default="Z", help="binary treatment column (default 'Z')")
    g.add_argument("--inputs", default="", help="comma list of production inputs")
    g.add_argument("--log", default="all",
                   help="which of outcome/inputs to log: 'all', 'none' or a comma list (default all)")
    g.add_argument("--land", default=None, help="land column for per-unit normalization")
    g.add_argument("--per-unit", action="store_true", help="divide outcome and non-land inputs by --land")
    g.add_argument("--covariates", default="", help="comma list of frontier covariates")
    g.add_argument("--interactions", default="", help="comma list of variables interacted with the treatment")
    g.add_argument("--ineff", default="", help="comma list of inefficiency-variance determinants")
    g.add_argument("--noise", default="", help="comma list of noise-variance determinants")
    g.add_argument("--zero-policy", default="drop", help="'drop' (default) or 'shift:EPS' before logs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfdecomp", description="Frontier-shift / efficiency decomposition of treatment effects.",
                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        return sub.add_parser(name, help=help_, description=help_, epilog=EPILOG,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = cmd("validate", "load and check a data file; with model flags, also build the design")
    _add_io(p)
    _add_model(p)

    p = cmd("balance", "baseline balance table with a joint orthogonality test")
    _add_io(p)
    p.add_argument("--treatment", default="Z", help="binary treatment column (default 'Z')")
    p.add_argument("--variables", required=True, help="comma list of baseline variables")
    p.add_argument("--joint-adjustment", choices=("hotelling", "none"), default="hotelling",
                   help="small-sample form of the joint F (default hotelling)")

    p = cmd("attrition", "attrition rates and linear probability regressions")
    _add_io(p)
    p.add_argument("--treatment", default="Z", help="binary treatment column (default 'Z')")
    p.add_argument("--covariates", default="", help="comma list of baseline covariates for column 2")

    p = cmd("ols", "Cobb-Douglas OLS with cluster-robust errors")
    _add_io(p)
    _add_model(p)
    p.add_argument("--se-mode", choices=("cluster_cr1", "classical"), default="cluster_cr1", help="covariance type")
    p.add_argument("--profile", default="", help="name=value list for the heterogeneous marginal effect")

    for name, help_ in (("sfa", "normal/half-normal stochastic frontier"),
                        ("decompose", "frontier shift + efficiency decomposition")):
        p = cmd(name, help_)
        _add_io(p)
        _add_model(p)
        p.add_argument("--max-iter", type=int, default=500, help="optimizer iteration cap")
        p.add_argument("--se-mode", choices=("hessian", "cluster"), default="hessian", help="frontier covariance type")
        p.add_argument("--allow-partial", action="store_true", help="report non-converged fits with exit 0")
        p.add_argument("--profile", default="", help="name=value list of inefficiency determinants")

    p = cmd("dose", "effects by quantile bin of the dose among treated takers")
    _add_io(p)
    _add_model(p)
    p.add_argument("--dose", required=True, help="dose column (credit amount)")
    p.add_argument("--bins", type=int, default=10, help="number of quantile bins (default 10)")
    p.add_argument("--seed", type=int, required=True, help="bootstrap seed")
    p.add_argument("--boot", type=int, default=200, help="cluster-bootstrap replications (default 200)")
    p.add_argument("--plot-data", default=None, help="prefix for <prefix>_yield.csv / <prefix>_efficiency.csv")

    p = cmd("density", "kernel density of a column or of the fitted inefficiency index")
    _add_io(p)
    _add_model(p)
    p.add_argument("--column", default=None, help="column whose values are smoothed")
    p.add_argument("--jlms", action="store_true", help="fit the frontier and smooth its inefficiency index")
    p.add_argument("--grid-size", type=int, default=512, help="grid points (default 512)")
    p.add_argument("--bandwidth", default="silverman", help="'silverman' or a positive number")
    p.add_argument("--plot-data", default=None, help="write two-column x,density text here")

    p = cmd("simulate", "draw a synthetic data set from a DGP config")
    _add_io(p, data=False)
    p.add_argument("--seed", type=int, required=True, help="random seed")

    p = cmd("montecarlo", "Monte Carlo battery for one estimator")
    _add_io(p, data=False)
    p.add_argument("--estimator", choices=ESTIMATORS, required=True, help="estimator under test")
    p.add_argument("--reps", type=int, required=True, help="replications")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--se-mode", choices=("cluster_cr1", "classical"), default="cluster_cr1",
                   help="OLS covariance type for estimator=ols")
    return parser


def _apply_config(args, parser_defaults):
    if not getattr(args, "config", None) or args.command in ("simulate", "montecarlo"):
        return
    with open(args.config, "rb") as fh:
        data = json.loads(fh.read().decode("utf-8"))
    for key, val in data.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ValidationError(f"unknown option {key!r} in config file")
        if getattr(args, dest) == parser_defaults.get(dest):
            setattr(args, dest, ",".join(val) if isinstance(val, list) else val)


def _read_input(args, report, extra_kinds=None):
    raw = Path(args.data).read_bytes()
    report["inputs"][args.data] = rpt.digest(raw)
    header = next(csv.reader(io.StringIO(raw.decode("utf-8")), delimiter=args.delimiter), [])
    period = args.period or ("period" if "period" in header else None)
    kinds = {c: CATEGORICAL for c in _csv_list(args.categorical)}
    kinds.update(extra_kinds or {})
    schema = TableSchema(unit=args.unit, cluster=args.cluster, period=period, kinds=kinds)
    return load_table(raw, schema, delimiter=args.delimiter)


def _spec(args) -> FormulaSpec:
    if not args.outcome:
        raise ValidationError("--outcome is required")
    inputs = _csv_list(args.inputs)
    if args.log == "all":
        logged = set(inputs) | {args.outcome}
    elif args.log == "none":
        logged = set()
    else:
        logged = set(_csv_list(args.log))
    spec = FormulaSpec(
        outcome=args.outcome, treatment=args.treatment, cluster=args.cluster,
        inputs=[(c, c in logged) for c in inputs], log_outcome=args.outcome in logged,
        land_column=args.land, covariates=_csv_list(args.covariates),
        interactions=_csv_list(args.interactions), ineff_determinants=_csv_list(args.ineff),
        noise_determinants=_csv_list(args.noise) or None,
    )
    return spec


def _model_kinds(args) -> dict:
    kinds = {}
    if args.outcome:
        kinds[args.outcome] = CONTINUOUS
    for c in _csv_list(args.inputs):
        kinds[c] = CONTINUOUS
    kinds[args.treatment] = BINARY
    return kinds


def _design(args, report):
    table = _read_input(args, report, _model_kinds(args))
    spec = _spec(args)
    if args.per_unit:
        table = per_unit_transform(table, spec)
        spec = spec.normalized()
    design = build_design(table, spec, args.zero_policy)
    excl = list(table.exclusions) + list(design.excluded)
    report["exclusions"] = {"counts": exclusion_counts(excl), "rows": [[e.row, e.reason] for e in excl]}
    report["tables"]["sample"] = rpt.table(["rows_read", "rows_used", "rows_excluded", "clusters"],
                                           [[table.row_count + len(table.exclusions), design.n, len(excl),
                                             design.n_clusters]])
    return table, spec, design


def _profile(text) -> dict:
    out = {}
    for item in _csv_list(text):
        name, sep, val = item.partition("=")
        if not sep:
            raise ValidationError(f"profile entries look like name=value, got {item!r}")
        out[name.strip()] = float(val)
    return out


def _effects_table(effects) -> dict:
    return rpt.records_table([{"effect": key, **e.as_dict()} for key, e in effects.items() if e is not None])


def _coef_table(names, coef, se, stat, p=None) -> dict:
    cols = ["name", "coef", "std_error", "stat"] + (["p_value"] if p is not None else [])
    rows = [[n, c, s, t] + ([pp] if p is not None else []) for n, c, s, t, pp in
            zip(names, coef, se, stat, p if p is not None else [None] * len(names))]
    return rpt.table(cols, rows)


def _frontier_tables(fit, design, report):
    tab = fit.table()
    report["tables"]["frontier_params"] = _coef_table(list(tab.index), tab["coef"], tab["std_error"], tab["z_stat"])
    idx = jlms_index(fit, design)
    report["tables"]["frontier_fit"] = rpt.table(
        ["loglik", "start_loglik", "converged", "boundary_flag", "hessian_ok", "n_iterations", "n", "mean_u",
         "mean_te", "se_mode"],
        [[fit.loglik, fit.start_loglik, fit.converged, fit.boundary_flag, fit.hessian_ok, fit.n_iterations,
          fit.n, idx.mean_u, float(np.mean(idx.te)), fit.se_mode]])
    report["warnings"].extend(fit.warnings)
    return idx


def run_validate(args, report):
    table = _read_input(args, report, _model_kinds(args) if args.outcome else None)
    report["tables"]["table"] = rpt.table(["rows", "columns", "clusters"],
                                          [[table.row_count, len(table.columns), table[table.cluster].nunique()]])
    report["tables"]["columns"] = rpt.table(["name", "kind"], [[c, table.kind(c)] for c in table.columns
                                                               if c not in (table.unit, table.cluster, table.period)])
    if args.outcome:
        _design(args, report)
    return EXIT_OK


def run_balance(args, report):
    table = _read_input(args, report, {args.treatment: BINARY})
    if table.period is not None and (table[table.period] == "baseline").any():
        table = table.in_period("baseline")
    res = balance_table(table, _csv_list(args.variables), args.treatment, args.cluster, args.joint_adjustment)
    report["tables"]["balance"] = rpt.records_table([r.__dict__ for r in res.rows])
    report["tables"]["joint_test"] = rpt.table(
        ["F", "df1", "df2", "p_value", "adjustment", "clusters"],
        [[res.joint_F, res.joint_df[0], res.joint_df[1], res.joint_p, res.adjustment, res.n_clusters]])
    return EXIT_OK


def run_attrition(args, report):
    table = _read_input(args, report, {args.treatment: BINARY})
    res = attrition_check(table, args.treatment, _csv_list(args.covariates), args.cluster)
    report["tables"]["attrition_rates"] = rpt.table(
        ["control", "treatment", "overall", "n_baseline", "n_attrited"],
        [[res.rate_control, res.rate_treatment, res.rate_overall, res.n_baseline, res.n_attrited]])
    report["tables"]["attrition_effects"] = _effects_table(res.effects())
    report["warnings"].extend(res.warnings)
    return EXIT_OK


def run_ols(args, report):
    _, spec, design = _design(args, report)
    profile = _profile(args.profile)
    if profile:
        fit, me = heterogeneous_ols(design, profile, args.se_mode)
        report["tables"]["marginal_effect"] = _effects_table({"marginal_effect": me})
    else:
        fit = ols_fit(design, args.se_mode)
    tab = fit.table()
    report["tables"]["coefficients"] = _coef_table(list(tab.index), tab["coef"], tab["std_error"], tab["t_stat"],
                                                   tab["p_value"])
    report["tables"]["treatment_effect"] = _effects_table({"itt": fit.effect(spec.treatment)})
    sk = skewness_test(fit.residuals)
    report["tables"]["fit"] = rpt.table(
        ["n", "k", "clusters", "r_squared", "df", "se_mode", "m2", "m3", "skew_z", "skew_p", "skew_direction"],
        [[fit.n, fit.k, fit.n_clusters, fit.r_squared, fit.df, fit.se_mode, sk.m2, sk.m3, sk.z_stat, sk.p_value,
          sk.direction]])
    return EXIT_OK


def _check_converged(fit, args):
    if not fit.converged and not args.allow_partial:
        log.error("frontier fit did not converge (use --allow-partial to report it anyway)")
        return EXIT_ESTIMATION
    return EXIT_OK


def run_sfa(args, report):
    _, _, design = _design(args, report)
    fit = sf_fit(design, max_iter=args.max_iter, se_mode=args.se_mode)
    _frontier_tables(fit, design, report)
    return _check_converged(fit, args)


def run_decompose(args, report):
    _, _, design = _design(args, report)
    res = decompose(design, _profile(args.profile) or None, max_iter=args.max_iter, se_mode=args.se_mode)
    _frontier_tables(res.fit, design, report)
    report["tables"]["decomposition"] = _effects_table(res.effects())
    report["warnings"].extend(w for w in res.warnings if w not in report["warnings"])
    return _check_converged(res.fit, args)


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([rpt._cell(v) for v in rpt.clean(list(r))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def run_dose(args, report):
    table = _read_input(args, report, {**_model_kinds(args), args.dose: CONTINUOUS})
    spec = _spec(args)
    if args.per_unit:
        table = per_unit_transform(table, spec)
        spec = spec.normalized()
    res = effect_by_dose(table, spec, args.dose, args.bins, seed=args.seed, n_boot=args.boot,
                         zero_policy=args.zero_policy)
    rows = []
    for b in res.bins:
        ye = b.yield_effect
        rows.append({"bin": b.index, "lower": b.lower, "upper": b.upper, "n": b.n, "clusters": b.n_clusters,
                     "estimable": b.estimable, "yield_estimate": ye.estimate if ye else None,
                     "yield_std_error": ye.std_error if ye else None, "yield_lo": b.yield_ci[0],
                     "yield_hi": b.yield_ci[1], "efficiency_mean": b.efficiency_mean,
                     "efficiency_lo": b.efficiency_ci[0], "efficiency_hi": b.efficiency_ci[1]})
    report["tables"]["dose_bins"] = rpt.records_table(rows)
    report["tables"]["dose_summary"] = rpt.table(
        ["n_control", "n_treated", "excluded_treated", "control_efficiency", "level", "yield_cis_overlap"],
        [[res.n_control, res.n_treated, res.excluded_treated, res.control_efficiency, res.level,
          res.cis_overlap("yield")]])
    for panel in ("yield", "efficiency"):
        report["tables"][f"dose_plot_{panel}"] = rpt.table(["x", "estimate", "lo", "hi"], res.plot_rows(panel))
        if args.plot_data:
            _write_rows(f"{args.plot_data}_{panel}.csv", ["x", "estimate", "lo", "hi"], res.plot_rows(panel))
    return EXIT_OK


def run_density(args, report):
    if bool(args.column) == bool(args.jlms):
        raise ValidationError("give exactly one of --column or --jlms")
    bw = args.bandwidth if args.bandwidth == "silverman" else float(args.bandwidth)
    if args.jlms:
        _, _, design = _design(args, report)
        fit = sf_fit(design)
        values = _frontier_tables(fit, design, report).u_hat
    else:
        table = _read_input(args, report, {args.column: CONTINUOUS})
        values = table[args.column].dropna().to_numpy(float)
    est = density_export(values, args.grid_size, bw)
    if est.warning:
        report["warnings"].append(est.warning)
    report["tables"]["density"] = rpt.table(["x", "density"], est.rows())
    report["tables"]["density_meta"] = rpt.table(["n", "bandwidth", "grid_size"], [[len(values), est.bandwidth,
                                                                                   len(est.x)]])
    if args.plot_data:
        Path(args.plot_data).write_text(est.to_text(), encoding="utf-8")
    return EXIT_OK


def _dgp(args, report) -> DgpConfig:
    if not args.config:
        return DgpConfig(seed=args.seed)
    raw = Path(args.config).read_bytes()
    report["inputs"][args.config] = rpt.digest(raw)
    data = json.loads(raw.decode("utf-8"))
    data["seed"] = args.seed
    return DgpConfig.from_dict(data)


def run_simulate(args, report):
    cfg = _dgp(args, report)
    text = write_table(generate(cfg))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return None


def run_montecarlo(args, report):
    cfg = _dgp(args, report)
    res = monte_carlo(cfg, args.estimator, args.reps, args.seed, workers=args.workers, se_mode=args.se_mode)
    report["tables"]["montecarlo"] = rpt.records_table([p.__dict__ for p in res.params])
    report["tables"]["montecarlo_meta"] = rpt.table(
        ["estimator", "reps", "failures", "rejection_rate", *res.extra],
        [[res.estimator, res.reps, res.failures, res.rejection_rate, *res.extra.values()]])
    report["tables"]["dgp"] = rpt.table(["config"], [[json.dumps(rpt.clean(cfg.to_dict()), sort_keys=True)]])
    return EXIT_OK


COMMANDS = {
    "validate": run_validate, "balance": run_balance, "attrition": run_attrition, "ols": run_ols,
    "sfa": run_sfa, "decompose": run_decompose, "dose": run_dose, "density": run_density,
    "simulate": run_simulate, "montecarlo": run_montecarlo,
}


def _recorded_command(argv) -> list[str]:
    """argv without the output destination, so a report does not depend on where it is written."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    sub_defaults = {a.dest: a.default for a in parser._subparsers._group_actions[0].choices[args.command]._actions}

    report = rpt.new_report(_recorded_command(argv), getattr(args, "seed", None))
    try:
        _apply_config(args, sub_defaults)
        code = COMMANDS[args.command](args, report)
    except CoercionError as exc:
        for r, c, v in exc.issues:
            sys.stderr.write(f"row {r}, column {c}: cannot parse {v!r}\n")
        return EXIT_VALIDATION
    except ValidationError as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION
    except (EstimationError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"estimation error: {exc}\n")
        return EXIT_ESTIMATION
    except (OSError, SfdecompError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    if code is None:
        return EXIT_OK
    text = rpt.render(report, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
