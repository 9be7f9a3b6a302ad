"""Command-line interface: ``dsense <command> [options]``.

Options may come from a JSON file (``--config``) whose keys are the long flag
names with dashes replaced by underscores; flags given on the command line
override the file. The seed falls back to the ``DSENSE_SEED`` environment
variable, then 0.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import load_csv
from .design_sensitivity import augmentation_gain, design_sensitivity_curve, trimming_gain
from .estimators import Design, fit_design
from .exceptions import (
    ConfigError,
    DataValidationError,
    DegenerateDataError,
    NumericalError,
    ParameterError,
    SchemaError,
    SingularDesignError,
)
from .planning import PlanningConfig, ds_from_planning, ds_from_planning_simulated, power_by_splitting
from .propensity import TrimRule, moments_from_arrays
from .sensitivity import ReplicateSet, SensitivitySpec, robustness_value
from .simulation import SWEEPS, sweep, sweep_frame

COMMANDS = ("fit", "sensitivity", "design-sensitivity", "plan", "power-split", "simulate")
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS = {
    "input": None,
    "outcome_col": None,
    "treatment_col": None,
    "covariate_cols": None,
    "trim_propensity": None,
    "trim_weight": None,
    "augment": "none",
    "lambda": [1.0, 1.5, 2.0],
    "r2": [0.0, 0.1, 0.25],
    "tau_grid": [0.5, 1.0, 1.5, 2.0],
    "reps": 1000,
    "alpha": 0.05,
    "seed": None,
    "planning_fraction": 0.1,
    "splits": 100,
    "workers": 1,
    "out_dir": "dsense_out",
    "outcome_sim": False,
    "proxy_r2": None,
    "sweep": None,
    "n": 1_000_000,
}
LIST_KEYS = ("covariate_cols", "lambda", "r2", "tau_grid")


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="dsense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dsense {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        s = sub.add_parser(cmd)
        s.add_argument("--config", help="JSON file with option values")
        s.add_argument("--input", help="input CSV")
        s.add_argument("--outcome-col")
        s.add_argument("--treatment-col")
        s.add_argument("--covariate-cols", type=_names, help="comma-separated covariate columns")
        s.add_argument("--trim-propensity", type=float, help="drop units with propensity above this")
        s.add_argument("--trim-weight", type=float, help="drop units with raw weight above this")
        s.add_argument("--augment", help="none, ols or column:<name>")
        s.add_argument("--lambda", type=_floats, help="MSM Lambda values")
        s.add_argument("--r2", type=_floats, help="VBM R^2 values")
        s.add_argument("--tau-grid", type=_floats, help="effect sizes for design sensitivity")
        s.add_argument("--reps", type=int, help="bootstrap replicates")
        s.add_argument("--alpha", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--planning-fraction", type=float)
        s.add_argument("--splits", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out-dir")
        s.add_argument("--outcome-sim", action="store_true", default=None,
                       help="plan: simulate analysis outcomes from a planning outcome model")
        s.add_argument("--proxy-r2", type=float, help="plan: proxy outcome model r^2")
        s.add_argument("--sweep", choices=SWEEPS, help="simulate: which sweep")
        s.add_argument("--n", type=int, help="simulate: draws per grid point")
    return p


def resolve_config(args, environ=None):
    """Merge defaults, the JSON config file and command-line flags."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in LIST_KEYS:
            if isinstance(file_cfg.get(key), str):
                file_cfg[key] = (_names if key == "covariate_cols" else _floats)(file_cfg[key])
        cfg.update({k: v for k, v in file_cfg.items() if k != "command"})
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["seed"] is None:
        env = environ.get("DSENSE_SEED")
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise ConfigError(f"DSENSE_SEED must be an integer, got {env!r}") from exc
    cfg["command"] = args.command
    _validate(cfg)
    return cfg


def _validate(cfg):
    cmd = cfg["command"]
    if cmd != "simulate":
        missing = [k for k in ("input", "outcome_col", "treatment_col", "covariate_cols") if not cfg[k]]
        if missing:
            raise ConfigError(f"{cmd} needs --{', --'.join(m.replace('_', '-') for m in missing)}")
    elif not cfg["sweep"]:
        raise ConfigError("simulate needs --sweep")
    if cfg["trim_propensity"] is not None and cfg["trim_weight"] is not None:
        raise ConfigError("give at most one of --trim-propensity and --trim-weight")
    aug = cfg["augment"]
    if aug not in ("none", "ols") and not str(aug).startswith("column:"):
        raise ConfigError(f"--augment must be none, ols or column:<name>, got {aug!r}")
    if not 0.0 < cfg["alpha"] < 1.0:
        raise ConfigError("--alpha must lie in (0, 1)")
    if cfg["reps"] < 2 or cfg["splits"] < 1 or cfg["workers"] < 1 or cfg["n"] < 2:
        raise ConfigError("--reps, --splits, --workers and --n must be positive (reps >= 2)")
    if any(not t > 0 for t in cfg["tau_grid"]):
        raise ConfigError("--tau-grid values must be positive")
    for lam in cfg["lambda"]:
        if not lam >= 1:
            raise ConfigError(f"--lambda values must be >= 1, got {lam}")
    for r2 in cfg["r2"]:
        if not 0 <= r2 < 1:
            raise ConfigError(f"--r2 values must lie in [0, 1), got {r2}")


def _trim_rule(cfg):
    if cfg["trim_propensity"] is not None:
        return TrimRule("propensity", cfg["trim_propensity"])
    if cfg["trim_weight"] is not None:
        return TrimRule("weight", cfg["trim_weight"])
    return None


def designs_from_config(cfg):
    """Menu of designs keyed by short label: plain, plus trim/aug when requested."""
    menu = {"plain": Design()}
    rule = _trim_rule(cfg)
    if rule is not None:
        menu["trim"] = Design(trim=rule)
    if cfg["augment"] != "none":
        menu["aug"] = Design(augment=cfg["augment"])
    return menu


def _load(cfg):
    extra = []
    if str(cfg["augment"]).startswith("column:"):
        extra.append(cfg["augment"].split(":", 1)[1])
    return load_csv(cfg["input"], cfg["outcome_col"], cfg["treatment_col"], cfg["covariate_cols"], extra)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(out_dir, name, frame):
    path = Path(out_dir) / name
    _atomic_write(path, frame.to_csv(index=False, float_format="%.6g"))
    return str(path)


def _fit_summary(fitted):
    m = moments_from_arrays(fitted.control_outcome, fitted.control_weights)
    est = fitted.estimate
    out = {
        "estimate": est.value,
        "estimator": fitted.design.kind,
        "treated_component": est.treated_component,
        "control_mean_component": est.control_mean_component,
        "n_treated_used": est.n_treated_used,
        "n_controls_used": est.n_controls_used,
        "moments": {"var_w": m.var_w, "var_y": m.var_y, "cor_wy": m.cor_wy},
        "propensity": {"coefficients": fitted.fit.coefficients.tolist(),
                       "converged": fitted.fit.converged, "iterations": fitted.fit.iterations,
                       "gradient_norm": fitted.fit.gradient_norm},
    }
    if fitted.weights.trim_rule is not None:
        out["trim"] = {"rule": fitted.weights.trim_rule.label(),
                       "controls_dropped": int((~fitted.weights.kept_mask).sum()),
                       "normalized_weight_cutoff": fitted.weights.normalized_cutoff}
    if fitted.model is not None:
        out["outcome_model"] = {"kind": fitted.model.kind, "training_r2": fitted.model.training_r2,
                                "residual_variance": fitted.model.residual_variance}
    return out


def cmd_fit(cfg, table):
    return {"designs": {k: _fit_summary(fit_design(table, d))
                        for k, d in designs_from_config(cfg).items()}}, {}


def cmd_sensitivity(cfg, table):
    results, rows = {}, []
    # every design reuses the same resample indices (common random numbers)
    for label, design in designs_from_config(cfg).items():
        reps = ReplicateSet(table, design, reps=cfg["reps"], seed=cfg["seed"], workers=cfg["workers"])
        entry = {"estimate": reps.full.value, "intervals": [], "robustness": {},
                 "note": "bootstrap intervals cover a superset of the effect interval (not sharp)"}
        specs = [SensitivitySpec("msm", g) for g in cfg["lambda"]] + \
                [SensitivitySpec("vbm", g) for g in cfg["r2"]]
        for spec in specs:
            est = reps.interval(spec, cfg["alpha"])
            rec = {"design": label, "model": spec.model, "gamma": spec.parameter,
                   "lower": est.lower, "upper": est.upper, "point": est.point,
                   "ci_lower": est.ci_lower, "ci_upper": est.ci_upper,
                   "rejects_zero": est.rejects_zero}
            entry["intervals"].append(rec)
            rows.append(rec)
        for model in ("msm", "vbm"):
            rv = robustness_value(table, design, model, alpha=cfg["alpha"], replicates=reps)
            entry["robustness"][model] = {"value": rv.value, "status": rv.status,
                                          "monotone": rv.monotone}
        results[label] = entry
    return {"designs": results}, {"sensitivity.csv": pd.DataFrame(rows)}


def cmd_design_sensitivity(cfg, table):
    menu = designs_from_config(cfg)
    fitted = {k: fit_design(table, d) for k, d in menu.items()}
    curve = pd.DataFrame(design_sensitivity_curve(fitted, cfg["tau_grid"]))
    order = ["tau"] + [f"r2_{k}" for k in fitted] + [f"lambda_{k}" for k in fitted]
    curve = curve[order]
    m_plain = moments_from_arrays(fitted["plain"].control_outcome, fitted["plain"].control_weights)
    gains = {}
    if "aug" in fitted:
        m_e = moments_from_arrays(fitted["aug"].control_outcome, fitted["aug"].control_weights)
        gains["augmentation"] = augmentation_gain(m_plain, m_e).__dict__
    if "trim" in fitted:
        m_t = moments_from_arrays(fitted["trim"].control_outcome, fitted["trim"].control_weights)
        gains["trimming"] = {**trimming_gain(m_plain, m_t).__dict__,
                             "assumes": "constant treatment effect"}
    report = {"curve": curve.to_dict(orient="records"), "gains": gains,
              "estimates": {k: f.value for k, f in fitted.items()}}
    return report, {"design_sensitivity.csv": curve}


def cmd_plan(cfg, table):
    pc = PlanningConfig(fraction=cfg["planning_fraction"], tau_grid=tuple(cfg["tau_grid"]),
                        seed=cfg["seed"], proxy_r2=cfg["proxy_r2"])
    rows = []
    fn = ds_from_planning_simulated if cfg["outcome_sim"] else ds_from_planning
    for label, design in designs_from_config(cfg).items():
        for tau in cfg["tau_grid"]:
            res = fn(table, pc, tau, design)
            rows.append({"design": label, "tau": tau, "r2": res["vbm"].value,
                         "lambda": res["msm"].value, "lambda_attained": res["msm"].attained})
    frame = pd.DataFrame(rows)
    mode = "simulated_outcomes" if cfg["outcome_sim"] else (
        "proxy_outcome" if cfg["proxy_r2"] is not None else "planning_sample")
    return {"mode": mode, "rows": rows}, {"planning.csv": frame}


def cmd_power_split(cfg, table):
    menu = designs_from_config(cfg)
    pc = PlanningConfig(fraction=cfg["planning_fraction"], n_splits=cfg["splits"],
                        menu=tuple(menu.values()), lambdas=tuple(cfg["lambda"]),
                        r2s=tuple(cfg["r2"]), alpha=cfg["alpha"], seed=cfg["seed"],
                        reps=cfg["reps"], workers=cfg["workers"])
    pt = power_by_splitting(table, pc)
    frame = pt.frame().rename(columns={d.label: k for k, d in menu.items()})
    return pt.to_dict(), {"power.csv": frame}


def cmd_simulate(cfg, _table):
    rows = sweep(cfg["sweep"], n=cfg["n"], seed=cfg["seed"], workers=cfg["workers"])
    failures = [r.flat() for r in rows if r.error]
    if failures:
        warnings.warn(f"{len(failures)} sweep points failed", RuntimeWarning, stacklevel=2)
    frame = sweep_frame(rows)
    return {"sweep": cfg["sweep"], "rows": frame.to_dict(orient="records")}, \
        {f"sweep_{cfg['sweep']}.csv": frame}


HANDLERS = {
    "fit": cmd_fit,
    "sensitivity": cmd_sensitivity,
    "design-sensitivity": cmd_design_sensitivity,
    "plan": cmd_plan,
    "power-split": cmd_power_split,
    "simulate": cmd_simulate,
}


def _exit_code(exc):
    if isinstance(exc, (ConfigError, ParameterError)):
        return EXIT_CONFIG
    if isinstance(exc, (SchemaError, DataValidationError, DegenerateDataError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, (NumericalError, SingularDesignError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return None


def run(cfg):
    """Execute a resolved config; returns (exit status, report dict)."""
    diagnostics = []
    report = {"command": cfg["command"], "config": cfg, "seed": cfg["seed"], "version": __version__}
    out_dir = Path(cfg["out_dir"])
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            table = None if cfg["command"] == "simulate" else _load(cfg)
            results, tables = HANDLERS[cfg["command"]](cfg, table)
        for w in caught:
            diagnostics.append({"category": w.category.__name__, "message": str(w.message)})
        files = [_write_csv(out_dir, name, frame) for name, frame in tables.items()]
        report.update(status="ok", results=results, files=files, diagnostics=diagnostics)
        code = 0
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        report.update(status="error", error={"type": type(exc).__name__, "message": str(exc)},
                      diagnostics=diagnostics)
    _atomic_write(out_dir / "report.json", json.dumps(_jsonable(report), indent=2))
    return code, report


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(json.dumps({"status": "error", "type": "ConfigError", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG
    print(f"dsense: running {cfg['command']}", file=sys.stderr)
    code, report = run(cfg)
    if code:
        print(json.dumps(_jsonable(report["error"])), file=sys.stderr)
    else:
        print(f"dsense: wrote {cfg['out_dir']}/report.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
