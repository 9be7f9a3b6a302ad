"""Planning-sample estimates of design sensitivity and power of design choices
estimated from repeated planning/analysis splits."""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from ._random import child_seed, rng_for
from .data import split_planning
from .design_sensitivity import FavorableSituation, design_sensitivity
from .estimators import Design, fit_design, fit_outcome_model
from .exceptions import ConfigError, DegenerateDataError, DsenseError, PlanningWarning
from .propensity import moments_from_arrays
from .sensitivity import ReplicateSet, SensitivitySpec

RESIDUAL_MODES = ("normal", "empirical")


@dataclass(frozen=True)
class PlanningConfig:
    fraction: float = 0.1
    n_splits: int = 100
    tau_grid: tuple = (1.0,)
    menu: tuple = (Design(),)
    lambdas: tuple = (1.0,)
    r2s: tuple = (0.0,)
    alpha: float = 0.05
    seed: int = 0
    reps: int = 200
    outcome_sim: bool = False
    proxy_r2: float | None = None
    residuals: str = "normal"
    planning_tau: float | None = None
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError(f"planning fraction must lie in (0, 1), got {self.fraction}")
        if self.n_splits < 1:
            raise ConfigError("n_splits must be at least 1")
        if any(not t > 0 for t in self.tau_grid):
            raise ConfigError("tau_grid entries must be positive")
        if not self.menu:
            raise ConfigError("estimator menu is empty")
        for lam in self.lambdas:
            SensitivitySpec("msm", lam)
        for r2 in self.r2s:
            SensitivitySpec("vbm", r2)
        if self.residuals not in RESIDUAL_MODES:
            raise ConfigError(f"residuals must be one of {RESIDUAL_MODES}")
        if self.proxy_r2 is not None and not 0.0 <= self.proxy_r2 < 1.0:
            raise ConfigError("proxy_r2 must lie in [0, 1)")


def _positions(table, sub):
    return np.flatnonzero(np.isin(table.unit_ids, sub.unit_ids))


def _both_models(situation):
    out = {}
    for model in ("vbm", "msm"):
        out[model] = design_sensitivity(situation, model)
    return out


def proxy_outcome(outcomes, r2, seed=0):
    """Fitted values and residuals from a proxy outcome model explaining about
    ``r2`` of the variance of ``outcomes``.

    The proxy covariate is ``sqrt(r2) * z + sqrt(1 - r2) * v`` with ``z`` the
    standardized outcomes and ``v`` independent standard normal noise.
    """
    y = np.asarray(outcomes, dtype=float)
    if not 0.0 <= r2 < 1.0:
        raise ConfigError(f"proxy r2 must lie in [0, 1), got {r2}")
    sd = y.std()
    if not sd > 0:
        raise DegenerateDataError("proxy outcome model needs nonconstant outcomes")
    z = (y - y.mean()) / sd
    v = rng_for(seed, "proxy_outcome").standard_normal(y.size)
    xs = math.sqrt(r2) * z + math.sqrt(1.0 - r2) * v
    design = np.column_stack([np.ones(y.size), xs])
    coef = np.linalg.lstsq(design, y, rcond=None)[0]
    fitted = design @ coef
    return fitted, y - fitted


def ds_from_planning(table, config, tau, design=Design(), split_seed=None):
    """Design sensitivities from a controls-only planning sample.

    Weights (and any trimming) come from the full sample. Outcome moments and
    the MSM control distribution use planning controls only, while the VBM
    weight variance uses every kept control. For an augmented design the
    outcome model is fit on the planning controls, or replaced by a proxy
    model when ``config.proxy_r2`` is set.
    """
    seed = config.seed if split_seed is None else split_seed
    split = split_planning(table, config.fraction, "controls_only", seed)
    return planning_design_sensitivity(table, tau, design, _positions(table, split.planning),
                                       proxy_r2=config.proxy_r2, seed=seed)


def planning_design_sensitivity(table, tau, design, planning_rows, proxy_r2=None, seed=0):
    """Design sensitivities with outcome information restricted to ``planning_rows``."""
    full = fit_design(table, Design(trim=design.trim))
    w_all = full.weights
    in_plan = np.isin(w_all.kept_index, planning_rows)
    if in_plan.sum() < 2:
        raise DegenerateDataError("fewer than 2 kept controls in the planning sample")
    if in_plan.sum() < 10:
        warnings.warn(f"planning sample has only {int(in_plan.sum())} kept controls",
                      PlanningWarning, stacklevel=2)
    rows = w_all.kept_index[in_plan]
    w = w_all.kept_weights[in_plan]
    y = table.outcome[rows]
    variant = "trimmed" if design.trim else "standard"
    if design.augment is not None or proxy_r2 is not None:
        variant = "augmented"
        if proxy_r2 is not None:
            _, y = proxy_outcome(y, proxy_r2, child_seed(seed, "proxy"))
        else:
            mask = np.zeros(table.n, dtype=bool)
            mask[rows] = True
            if design.augment == "ols":
                model = fit_outcome_model(table, "ols", features=design.features, mask=mask)
            else:
                model = fit_outcome_model(table, "external", column=design.augment.split(":", 1)[1],
                                          mask=mask)
            y = y - model.predict(table)[rows]
    pm = moments_from_arrays(y, w)
    var_w_full = float(np.var(w_all.kept_weights, ddof=1))
    # weight variance from the full sample, outcome moments from planning controls
    vbm_moments = replace(pm, var_w=var_w_full, zero_variance=pm.zero_variance or var_w_full <= 0)
    return _both_models(FavorableSituation(tau, y, w, variant, moments=vbm_moments))


def simulate_analysis_sample(table, config, design=Design(), split_seed=None):
    """Resampled analysis units with control outcomes simulated from a
    planning-sample outcome model; returns ``(simulated table, model)``.

    An OLS outcome model is fit on planning controls. Analysis units are
    resampled with replacement and given outcomes ``g(X) + eps``, where ``eps``
    is normal with the planning residual variance (or resampled planning
    residuals when ``config.residuals == "empirical"``).
    """
    seed = config.seed if split_seed is None else split_seed
    split = split_planning(table, config.fraction, "controls_only", seed)
    plan = split.planning
    model = fit_outcome_model(plan, "ols", features=design.features,
                              mask=np.ones(plan.n, dtype=bool))
    analysis = split.analysis
    rng = rng_for(seed, "simulated_outcomes")
    for _ in range(1000):
        idx = rng.integers(0, analysis.n, analysis.n)
        n1 = int(analysis.treatment[idx].sum())
        if 0 < n1 < analysis.n:
            break
    else:
        raise DegenerateDataError("could not draw a two-arm analysis resample")
    sim = analysis.subset(idx)
    g = model.predict(sim)
    if config.residuals == "normal":
        eps = math.sqrt(model.residual_variance) * rng.standard_normal(sim.n)
    else:
        resid = plan.outcome - model.predict(plan)
        eps = rng.choice(resid, size=sim.n, replace=True)
    return sim.with_outcome(g + eps), model


def ds_from_planning_simulated(table, config, tau, design=Design(), split_seed=None):
    """Design sensitivities of ``design`` fitted on a simulated analysis sample
    (see :func:`simulate_analysis_sample`)."""
    sim, _ = simulate_analysis_sample(table, config, design, split_seed)
    fitted = fit_design(sim, design)
    return _both_models(FavorableSituation.from_fit(fitted, tau))


# Power by splitting --------------------------------------------------------------

@dataclass
class SplitOutcome:
    index: int
    seed: int
    planning_ds: dict = field(default_factory=dict)
    chosen: dict = field(default_factory=dict)
    rejects: dict = field(default_factory=dict)
    error: str | None = None


def _gammas(config):
    return [("msm", float(g)) for g in config.lambdas] + [("vbm", float(g)) for g in config.r2s]


def _run_split(table, config, s):
    seed = child_seed(config.seed, "power_split", s)
    out = SplitOutcome(s, seed)
    labels = [d.label for d in config.menu]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            split = split_planning(table, config.fraction, "full_split", seed)
            for d in config.menu:
                fitted = fit_design(split.planning, d)
                tau = config.planning_tau if config.planning_tau is not None else fitted.value
                ds = {}
                for model in ("vbm", "msm"):
                    if tau > 0:
                        sit = FavorableSituation.from_fit(fitted, tau)
                        ds[model] = design_sensitivity(sit, model).value
                    else:
                        ds[model] = 0.0 if model == "vbm" else 1.0
                out.planning_ds[d.label] = ds
            for model in ("vbm", "msm"):
                scores = [out.planning_ds[lab][model] for lab in labels]
                out.chosen[model] = labels[int(np.argmax(scores))]
            for j, d in enumerate(config.menu):
                reps = ReplicateSet(split.analysis, d, reps=config.reps,
                                    seed=child_seed(seed, "analysis_bootstrap", j))
                for model, g in _gammas(config):
                    est = reps.interval(SensitivitySpec(model, g), config.alpha)
                    out.rejects[(model, g, d.label)] = bool(est.rejects_zero)
    except (DsenseError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class PowerTable:
    """Rejection proportions over splits keyed by (model, gamma, estimator).

    The ``"chosen"`` column uses, per split and model, the estimator with the
    largest planning-sample design sensitivity; it is listed only when the
    menu has two or more estimators.
    """

    estimators: list
    rows: list
    selection: dict
    n_splits: int
    n_failed: int
    failures: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def power(self, model, gamma, estimator):
        if estimator == "chosen" and len(self.estimators) == 1:
            estimator = self.estimators[0]
        for r in self.rows:
            if r["model"] == model and r["gamma"] == gamma and r["estimator"] == estimator:
                return r["power"]
        raise KeyError((model, gamma, estimator))

    def frame(self):
        """Wide layout: one row per (model, gamma), one column per estimator."""
        long = pd.DataFrame(self.rows)
        wide = long.pivot_table(index=["model", "gamma"], columns="estimator",
                                values="power", sort=False).reset_index()
        cols = ["model", "gamma", *self.estimators]
        if len(self.estimators) > 1:
            cols.append("chosen")
        wide = wide[cols]
        wide.columns.name = None
        return wide

    def to_csv(self, path):
        self.frame().to_csv(path, index=False, float_format="%.4f")

    def to_dict(self):
        return {"estimators": self.estimators, "rows": self.rows, "selection": self.selection,
                "n_splits": self.n_splits, "n_failed": self.n_failed,
                "failures": self.failures, "diagnostics": self.diagnostics}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def power_by_splitting(table, config, full_sample=True):
    """Power of each menu estimator (and of the planning-chosen one) as the
    share of random planning/analysis splits whose analysis-sample sensitivity
    analysis rejects zero.

    Every split refits propensity and outcome models within its own samples.
    Splits that fail are excluded and counted, with a warning.
    """
    labels = [d.label for d in config.menu]
    if len(set(labels)) != len(labels):
        raise ConfigError("menu estimators must have distinct labels")
    if config.workers <= 1:
        outs = [_run_split(table, config, s) for s in range(config.n_splits)]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outs = list(pool.map(_run_split, [table] * config.n_splits,
                                 [config] * config.n_splits, range(config.n_splits)))
    ok = [o for o in outs if o.error is None]
    failed = [{"split": o.index, "error": o.error} for o in outs if o.error is not None]
    diagnostics = []
    if failed:
        msg = f"{len(failed)} of {config.n_splits} splits failed and were excluded"
        warnings.warn(msg, PlanningWarning, stacklevel=2)
        diagnostics.append(msg)
    if not ok:
        raise DegenerateDataError("every split failed")

    full_flags = {}
    if full_sample:
        for j, d in enumerate(config.menu):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                reps = ReplicateSet(table, d, reps=config.reps,
                                    seed=child_seed(config.seed, "full_bootstrap", j))
            for model, g in _gammas(config):
                est = reps.interval(SensitivitySpec(model, g), config.alpha)
                full_flags[(model, g, d.label)] = bool(est.rejects_zero)

    rows = []
    for model, g in _gammas(config):
        for lab in labels:
            p = float(np.mean([o.rejects[(model, g, lab)] for o in ok]))
            rows.append({"model": model, "gamma": g, "estimator": lab, "power": p,
                         "full_sample_reject": full_flags.get((model, g, lab))})
        chosen = [o.rejects[(model, g, o.chosen[model])] for o in ok]
        if len(labels) > 1:
            rows.append({"model": model, "gamma": g, "estimator": "chosen",
                         "power": float(np.mean(chosen)), "full_sample_reject": None})
    selection = {model: {lab: float(np.mean([o.chosen[model] == lab for o in ok]))
                         for lab in labels} for model in ("vbm", "msm")}
    return PowerTable(labels, rows, selection, len(ok), len(failed), failed, diagnostics)
