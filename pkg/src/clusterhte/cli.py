"""Command-line interface: ``test``, ``simulate`` and ``compare``.

Exit codes: 0 on success, 2 for invalid input or data, 3 for numerical
failures.  Every error is reported on one stderr line starting with
``clusterhte: <kind>-error:``.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bootstrap import (
    BootstrapConfig,
    _as_test_result,
    default_workers,
    pairs_cluster_bootstrap_s1,
    wild_cluster_bootstrap_s2,
)
from .data import (
    CsvSchema,
    ExposureMapping,
    apply_exposure_mapping,
    load_clustered_csv,
)
from .errors import DataError, HteError, NumericalError
from .estimator import VARIANCE_CORRECTIONS, W2_COVARIANCES
from .inference import (
    TestConfig,
    _prepare,
    holm,
    report_json,
    report_table,
    s1_test,
    s2_test,
)
from .simulation import CATE_FORMS, DgpConfig, ols_cluster_comparison, power_table
from .teststat import SIGMA1_CONVENTIONS, SIGMA2_FORMS

__all__ = ["main", "build_parser", "parse_range", "read_config_file", "PRESETS"]

logger = logging.getLogger("clusterhte")

# simulate presets: design, varied parameter, its grid, test and method
PRESETS = {
    "paper-a1": dict(stat="s1", method="asymptotic", vary="beta1", beta0="1", beta1="-0.5:0.5:0.05"),
    "paper-a2": dict(stat="s2", method="asymptotic", vary="beta0", beta0="-0.5:0.5:0.05", beta1="1"),
    "paper-a4": dict(stat="s1", method="bootstrap", vary="beta1", beta0="1", beta1="-0.5:0.5:0.05"),
    "paper-a5": dict(stat="s2", method="bootstrap", vary="beta0", beta0="-0.5:0.5:0.05", beta1="1"),
    "paper-a6-s1": dict(stat="s1", method="bootstrap", vary="beta1", beta0="1", beta1="0", C=50, min_mass=2),
    "paper-a6-s2": dict(stat="s2", method="bootstrap", vary="beta0", beta0="0", beta1="1", C=50, min_mass=2),
}


class UsageError(DataError):
    """Invalid command-line or configuration input."""


def parse_range(text: str) -> list:
    """Parse ``"a:b:step"``, a comma list, or a single number."""
    text = str(text).strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0:
                raise ValueError
            lo, hi, step = parts
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            if n < 1:
                raise ValueError
            return [round(lo + i * step, 10) for i in range(n)]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse numeric range {text!r}") from None


def read_config_file(path) -> dict:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n} is not key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# option name -> (type, default); shared by flags and config file
_OPTIONS = {
    "input": (str, None),
    "cluster_col": (str, "cluster"),
    "y_col": (str, "y"),
    "t_col": (str, "t"),
    "x_cols": (str, "x"),
    "pi_col": (str, None),
    "delimiter": (str, ","),
    "exposure": (str, None),
    "alpha": (float, 0.05),
    "kappa": (str, "5.0"),
    "h": (str, None),
    "bandwidth_base": (str, "units"),
    "grid_points": (int, 50),
    "method": (str, "asymptotic"),
    "reps": (int, None),
    "seed": (int, 0),
    "workers": (int, None),
    "variance_correction": (str, "bessel"),
    "w2_covariance": (str, "symmetric"),
    "sigma2_form": (str, "gaussian"),
    "sigma1_convention": (str, "pairs"),
    "min_share": (float, 0.02),
    "min_mass": (float, 5.0),
    "output": (str, None),
    "format": (str, "table"),
    "dump_draws": (str, None),
    "stat": (str, "s1"),
    "beta0": (str, None),
    "beta1": (str, None),
    "C": (int, 150),
    "Nc": (int, 10),
    "levels": (str, "0.3,0.4,0.5,0.6"),
    "form": (str, "linear"),
    "rho_x": (float, 0.2),
    "error_sd": (float, 0.1),
    "boot_reps": (int, 399),
    "preset": (str, None),
    "long_output": (str, None),
}


def _add_common(p):
    p.add_argument("--config", help="flat key = value file; flags take precedence")
    p.add_argument("--alpha", type=float, help="significance level (default 0.05)")
    p.add_argument("--kappa", help="bandwidth constant(s), comma separated (default 5.0)")
    p.add_argument("--h", help="explicit bandwidth(s), comma separated; overrides --kappa")
    p.add_argument("--bandwidth-base", choices=("units", "clusters"),
                   help="sample size in the bandwidth rule (default units)")
    p.add_argument("--grid-points", type=int, help="integration grid size (default 50)")
    p.add_argument("--variance-correction", choices=VARIANCE_CORRECTIONS)
    p.add_argument("--w2-covariance", choices=W2_COVARIANCES)
    p.add_argument("--sigma2-form", choices=SIGMA2_FORMS)
    p.add_argument("--sigma1-convention", choices=SIGMA1_CONVENTIONS)
    p.add_argument("--min-mass", type=float,
                   help="smallest kernel mass per cell for a usable grid point (default 5)")
    p.add_argument("--min-share", type=float, help="overlap warning floor (default 0.02)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--workers", type=int, help="bootstrap threads (default $CLUSTERHTE_WORKERS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_input(p):
    p.add_argument("--input", help="CSV file with a header row")
    p.add_argument("--cluster-col", help="cluster id column (default cluster)")
    p.add_argument("--y-col", help="outcome column (default y)")
    p.add_argument("--t-col", help="treatment column (default t)")
    p.add_argument("--x-cols", help="covariate column(s), comma separated (default x)")
    p.add_argument("--pi-col", help="exposure column, if already computed")
    p.add_argument("--delimiter", help="field delimiter (default ,)")
    p.add_argument("--exposure", help="exposure mapping: ratio, loo or threshold:<c>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterhte",
        description="Kernel tests for heterogeneous treatment effects under clustered interference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("test", help="run both tests and the Holm classification on a CSV")
    _add_input(pt)
    _add_common(pt)
    pt.add_argument("--method", choices=("asymptotic", "bootstrap", "both"))
    pt.add_argument("--reps", type=int, help="bootstrap replications (default 399)")
    pt.add_argument("--output", help="write the JSON report here")
    pt.add_argument("--format", choices=("table", "json"), help="stdout format (default table)")
    pt.add_argument("--dump-draws", help="directory for bootstrap draw CSVs")

    ps = sub.add_parser("simulate", help="Monte Carlo rejection probabilities")
    _add_common(ps)
    ps.add_argument("--preset", choices=sorted(PRESETS))
    ps.add_argument("--stat", choices=("s1", "s2"))
    ps.add_argument("--method", choices=("asymptotic", "bootstrap"))
    ps.add_argument("--beta0", help="value or grid a:b:step")
    ps.add_argument("--beta1", help="value or grid a:b:step")
    ps.add_argument("--C", type=int, help="clusters (default 150)")
    ps.add_argument("--Nc", type=int, help="units per cluster (default 10)")
    ps.add_argument("--levels", help="exposure levels, comma separated")
    ps.add_argument("--form", choices=CATE_FORMS)
    ps.add_argument("--rho-x", type=float)
    ps.add_argument("--error-sd", type=float, help="outcome error standard deviation (default 0.1)")
    ps.add_argument("--reps", type=int, help="Monte Carlo replications (default 1000)")
    ps.add_argument("--boot-reps", type=int, help="bootstrap replications (default 399)")
    ps.add_argument("--output", help="CSV path (default stdout)")
    ps.add_argument("--long-output", help="also write long-format CSV for plotting")

    pc = sub.add_parser("compare", help="OLS with clustered errors next to the kernel tests")
    _add_input(pc)
    _add_common(pc)
    pc.add_argument("--output", help="write the JSON report here")
    pc.add_argument("--format", choices=("table", "json"))
    return parser


def _merge(args) -> dict:
    """Flags over config file over defaults."""
    cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    preset = getattr(args, "preset", None) or cfg.get("preset")
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        base = {k: str(v) for k, v in PRESETS[preset].items()}
        base.update(cfg)
        cfg = base
    out = {}
    for key, (typ, default) in _OPTIONS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in cfg:
            try:
                out[key] = typ(cfg[key])
            except ValueError:
                raise UsageError(f"config value {key} = {cfg[key]!r} is not a {typ.__name__}") from None
        else:
            out[key] = default
    out["vary"] = cfg.get("vary")
    return out


def _test_config(o) -> TestConfig:
    try:
        return TestConfig(
            alpha=o["alpha"],
            bandwidth_base=o["bandwidth_base"],
            grid_points=o["grid_points"],
            variance_correction=o["variance_correction"],
            w2_covariance=o["w2_covariance"],
            sigma2_form=o["sigma2_form"],
            sigma1_convention=o["sigma1_convention"],
            min_share=o["min_share"],
            min_mass=o["min_mass"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _bandwidth_configs(o, base: TestConfig) -> list:
    if o["h"]:
        return [replace(base, h=v) for v in parse_range(o["h"])]
    return [replace(base, kappa_h=v) for v in parse_range(o["kappa"])]


def _load(o):
    if not o["input"]:
        raise UsageError("--input is required")
    schema = CsvSchema(
        cluster=o["cluster_col"],
        y=o["y_col"],
        t=o["t_col"],
        x=[c.strip() for c in o["x_cols"].split(",") if c.strip()],
        pi=o["pi_col"],
        delimiter=o["delimiter"],
    )
    sample = load_clustered_csv(o["input"], schema)
    if o["exposure"]:
        try:
            mapping = ExposureMapping.parse(o["exposure"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        sample = apply_exposure_mapping(sample, mapping)
    elif not sample.has_exposure:
        raise UsageError("no exposure column; pass --exposure or --pi-col")
    return sample


def _workers(o) -> int:
    return o["workers"] if o["workers"] else default_workers()


def _emit(text, path=None):
    if path:
        Path(path).write_text(text + ("" if text.endswith("\n") else "\n"))
    else:
        sys.stdout.write(text + ("" if text.endswith("\n") else "\n"))


def cmd_test(args) -> int:
    o = _merge(args)
    method = o["method"]
    if method not in ("asymptotic", "bootstrap", "both"):
        raise UsageError(f"unknown method {method!r}")
    sample = _load(o)
    base = _test_config(o)
    boot = BootstrapConfig(reps=o["reps"] or 399, seed=o["seed"], workers=_workers(o))
    rows, holms, tables = [], [], []
    for cfg in _bandwidth_configs(o, base):
        h, grid, diag = _prepare(sample, cfg, None, None, True)
        results = []
        if method in ("asymptotic", "both"):
            results += [s1_test(sample, cfg, grid=grid, h=h, check_overlap=False),
                        s2_test(sample, cfg, grid=grid, h=h, check_overlap=False)]
        if method in ("bootstrap", "both"):
            r1 = pairs_cluster_bootstrap_s1(sample, grid, h, boot, cfg)
            r2 = wild_cluster_bootstrap_s2(sample, grid, h, boot, cfg)
            if o["dump_draws"]:
                out_dir = Path(o["dump_draws"])
                out_dir.mkdir(parents=True, exist_ok=True)
                tag = f"h{float(np.ravel(h)[0]):.4g}"
                r1.to_csv(out_dir / f"draws_S1_{tag}.csv")
                r2.to_csv(out_dir / f"draws_S2_{tag}.csv")
            results += [_as_test_result("H0_Pi", r1, cfg, h),
                        _as_test_result("H0_X", r2, cfg, h)]
        # Holm uses the asymptotic p-values when both are available
        mtp = holm((results[0].p_value, results[1].p_value), cfg.alpha)
        for r in results:
            r.diagnostics["kappa_h"] = None if cfg.h is not None else cfg.kappa_h
            if diag.warnings:
                r.diagnostics["overlap_warnings"] = list(diag.warnings)
        rows.extend(results)
        holms.append(mtp.to_dict())
        tables.append(report_table(results, mtp))
    doc = json.loads(report_json(rows))
    doc["holm"] = holms
    doc["sample"] = {"N": sample.N, "C": sample.C, "d": sample.d,
                     "levels": list(sample.exposure_levels)}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if o["output"]:
        _emit(text, o["output"])
    _emit(text if o["format"] == "json" else "\n\n".join(tables))
    return 0


def cmd_simulate(args) -> int:
    o = _merge(args)
    if o["reps"] is not None and o["reps"] < 1:
        raise UsageError("--reps must be >= 1")
    reps = o["reps"] or 1000
    stat = o["stat"].upper()
    beta0 = parse_range(o["beta0"]) if o["beta0"] else [0.0]
    beta1 = parse_range(o["beta1"]) if o["beta1"] else [0.0]
    vary = o["vary"]
    if vary is None:
        if len(beta0) > 1 and len(beta1) > 1:
            raise UsageError("only one of --beta0 and --beta1 may be a grid")
        vary = "beta0" if len(beta0) > 1 else "beta1"
    if (len(beta0) > 1 and vary != "beta0") or (len(beta1) > 1 and vary != "beta1"):
        raise UsageError("only one of --beta0 and --beta1 may be a grid")
    values = beta0 if vary == "beta0" else beta1
    design = DgpConfig(
        C=o["C"], N_c=o["Nc"], levels=tuple(parse_range(o["levels"])),
        beta0=beta0[0], beta1=beta1[0], cate_form=o["form"], rho_x=o["rho_x"],
        error_sd=o["error_sd"],
    )
    cfg = _test_config(o)
    bw = _bandwidth_configs(o, cfg)
    if len(bw) != 1:
        raise UsageError("simulate takes a single bandwidth")
    boot = BootstrapConfig(reps=o["boot_reps"], seed=o["seed"], workers=1)
    table = power_table(design, vary, values, stat, o["method"] or "asymptotic", reps,
                        seed=o["seed"], test_config=bw[0], boot_config=boot)
    _emit(table.to_csv(), o["output"])
    if o["long_output"]:
        _emit(table.to_long_csv(), o["long_output"])
    return 0


def cmd_compare(args) -> int:
    o = _merge(args)
    sample = _load(o)
    if sample.d != 1:
        raise UsageError("the parametric comparator needs exactly one covariate")
    ols = ols_cluster_comparison(sample)
    f_stat, f_p = ols.joint_test(("T*X", "T*Pi"))
    cfg = _bandwidth_configs(o, _test_config(o))
    results, tables = [], []
    for c in cfg:
        h, grid, _ = _prepare(sample, c, None, None, True)
        pair = [s1_test(sample, c, grid=grid, h=h, check_overlap=False),
                s2_test(sample, c, grid=grid, h=h, check_overlap=False)]
        results.extend(pair)
        tables.append(report_table(pair, holm((pair[0].p_value, pair[1].p_value), c.alpha)))
    doc = json.loads(report_json(results))
    doc["ols"] = ols.to_dict()
    doc["ols"]["interactions_joint"] = {"F": f_stat, "p": f_p}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if o["output"]:
        _emit(text, o["output"])
    if o["format"] == "json":
        _emit(text)
    else:
        _emit("OLS with cluster-robust errors\n" + ols.table()
              + f"\njoint test of T*X and T*Pi: F={f_stat:.3f} p={f_p:.3f}\n\n"
              + "Kernel tests\n" + "\n\n".join(tables))
    return 0


_COMMANDS = {"test": cmd_test, "simulate": cmd_simulate, "compare": cmd_compare}


_NEGATIVE = re.compile(r"^-[0-9.][0-9.,:eE+-]*$")


def _glue_negative_values(argv):
    # argparse reads "-0.5:0.5:0.05" as a flag; bind it to the preceding option
    out = []
    for arg in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and _NEGATIVE.match(arg):
            out[-1] = f"{out[-1]}={arg}"
        else:
            out.append(arg)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _glue_negative_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (DataError, ValueError) as exc:
        print(f"clusterhte: data-error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"clusterhte: data-error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, HteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"clusterhte: numerical-error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
