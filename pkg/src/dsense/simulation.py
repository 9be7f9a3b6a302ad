"""Favorable-situation data-generating process and simulation sweeps for the
drivers, heterogeneity and misspecification experiments."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from ._random import child_seed, rng_for
from .data import ObservationTable
from .design_sensitivity import FavorableSituation, ds_msm, ds_vbm
from .estimators import fit_outcome_model, residualize
from .exceptions import ConfigError, DsenseError, ParameterError
from .propensity import TrimRule, att_weights, fit_logistic, trim_weights, weight_moments

SWEEPS = ("drivers", "heterogeneity", "misspecification")


@dataclass(frozen=True)
class DgpConfig:
    """``X ~ N(mu_x, sigma_x^2)``, ``P(Z=1|X) = expit(beta_pi X)``,
    ``Y = beta_y X + (tau0 + beta_tau X) Z + u`` with ``u ~ N(0, sigma_y^2)``."""

    mu_x: float = 0.0
    sigma_x: float = 1.0
    beta_pi: float = 1.0
    beta_y: float = 1.0
    sigma_y: float = 1.0
    tau0: float = 1.0
    beta_tau: float = 0.0
    n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_x > 0:
            raise ParameterError("sigma_x must be positive")
        if self.sigma_y < 0:
            raise ParameterError("sigma_y must be nonnegative")
        if self.n < 2:
            raise ParameterError("n must be at least 2")


def _draw(config):
    # fixed stream order: x, treatment uniforms, noise; tau0 and beta_tau
    # never touch the stream, so heterogeneous and constant-effect draws align
    rng = rng_for(config.seed, "dgp")
    x = config.mu_x + config.sigma_x * rng.standard_normal(config.n)
    z = (rng.random(config.n) < expit(config.beta_pi * x)).astype(np.int8)
    u = config.sigma_y * rng.standard_normal(config.n)
    return x, z, u


def sample_dgp(config):
    """Draw one study; the individual effects are kept in ``extra["tau_i"]``."""
    x, z, u = _draw(config)
    tau_i = config.tau0 + config.beta_tau * x
    y = config.beta_y * x + tau_i * z + u
    return ObservationTable(outcome=y, treatment=z, covariates=x[:, None],
                            covariate_names=("x",), extra={"tau_i": tau_i})


def calibrate_tau0(config, target_att):
    """``tau0`` giving a sample ATT of ``target_att`` on this config's draw.

    The ATT is ``tau0 + beta_tau * mean(X | Z=1)`` and the draw does not depend
    on ``tau0``, so the calibration is a direct solve.
    """
    x, z, _ = _draw(config)
    if not z.any():
        raise ParameterError("draw has no treated units")
    return float(target_att - config.beta_tau * x[z == 1].mean())


# Sweep grids ------------------------------------------------------------------

# (block, tau, beta_y, beta_pi, sigma_y) for each row of the drivers experiment
DRIVERS_GRID = (
    [("effect_size", t, 1.0, 1.0, 1.0) for t in (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)]
    + [("outcome_variance", 1.0, b, 1.0, b) for b in (0.5, 1.0, 1.5, 2.0, 2.5)]
    + [("weight_variance", 1.0, by, bp, sy) for by, bp, sy in
       ((0.80, 0.50, 1.11), (0.88, 0.75, 1.07), (1.00, 1.00, 1.00),
        (1.17, 1.25, 0.88), (1.40, 1.50, 0.65), (1.64, 1.75, 0.14))]
    + [("correlation", 1.0, by, 1.0, sy) for by, sy in
       ((-1.4, 0.46), (-1.2, 0.80), (-1.0, 1.00), (-0.8, 1.14), (-0.6, 1.24), (-0.4, 1.30),
        (-0.2, 1.34), (0.0, 1.35), (0.2, 1.34), (0.4, 1.30), (0.6, 1.24), (0.8, 1.14),
        (1.0, 1.00), (1.2, 0.80), (1.4, 0.46))]
)
HETEROGENEITY_GRID = (-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0)
HETEROGENEITY_SETUP = {"sigma_x": math.sqrt(2.0), "cutoff": 0.9, "target_att": 2.23}
OUTCOME_MODELS = ("correct", "noise", "misspec1", "misspec2", "misspec3")
MISSPEC_SIGMAS = (0.5, 1.0, 1.5, 2.0, 3.0)
MISSPEC_TAU = 1.5


def default_grid(kind):
    if kind == "drivers":
        return [dict(block=b, tau=t, beta_y=by, beta_pi=bp, sigma_y=sy)
                for b, t, by, bp, sy in DRIVERS_GRID]
    if kind == "heterogeneity":
        return [dict(beta_tau=b) for b in HETEROGENEITY_GRID]
    if kind == "misspecification":
        return [dict(model=m, sigma_y=s) for m in OUTCOME_MODELS for s in MISSPEC_SIGMAS]
    raise ConfigError(f"unknown sweep {kind!r}; expected one of {SWEEPS}")


@dataclass
class SweepRow:
    kind: str
    index: int
    params: dict
    values: dict = field(default_factory=dict)
    n: int = 0
    seed: int = 0
    error: str | None = None

    def flat(self):
        return {"index": self.index, **self.params, **self.values, "n": self.n,
                "seed": self.seed, "error": self.error or ""}


def _plain_summary(table):
    fit = fit_logistic(table)
    weights = att_weights(fit, table)
    return fit, weights, weight_moments(weights, table)


def _drivers_point(p, n, seed):
    cfg = DgpConfig(beta_pi=p["beta_pi"], beta_y=p["beta_y"], sigma_y=p["sigma_y"],
                    tau0=p["tau"], n=n, seed=seed)
    table = sample_dgp(cfg)
    _, weights, m = _plain_summary(table)
    sit = FavorableSituation(p["tau"], table.outcome[weights.kept_index], weights.kept_weights,
                             moments=m)
    return {"var_y": m.var_y, "var_w": m.var_w, "cor_wy": m.cor_wy,
            "lambda": ds_msm(sit).value, "r2": ds_vbm(sit).value}


def _heterogeneity_point(p, n, seed, sigma_x, cutoff, target_att):
    base = DgpConfig(sigma_x=sigma_x, beta_tau=p["beta_tau"], n=n, seed=seed)
    cfg = replace(base, tau0=calibrate_tau0(base, target_att))
    table = sample_dgp(cfg)
    tau_i = table.extra["tau_i"]
    fit, weights, m = _plain_summary(table)
    trimmed = trim_weights(weights, fit, TrimRule("propensity", cutoff))
    mt = weight_moments(trimmed, table)
    att = float(tau_i[table.treated].mean())
    att_trim = float(tau_i[trimmed.treated_mask].mean())
    y = table.outcome
    sit = FavorableSituation(att, y[weights.kept_index], weights.kept_weights, moments=m)
    sit_t = FavorableSituation(att_trim, y[trimmed.kept_index], trimmed.kept_weights,
                               "trimmed", moments=mt)
    lam, lam_t = ds_msm(sit).value, ds_msm(sit_t).value
    r2, r2_t = ds_vbm(sit).value, ds_vbm(sit_t).value
    return {"tau0": cfg.tau0, "att": att, "trimmed_att": att_trim,
            "lambda": lam, "lambda_trim": lam_t, "lambda_change": lam_t - lam,
            "r2": r2, "r2_trim": r2_t, "r2_change": r2_t - r2,
            "var_y": m.var_y, "var_y_trim": mt.var_y, "cor_wy": m.cor_wy, "cor_wy_trim": mt.cor_wy,
            "controls_trimmed": int(weights.n_kept - trimmed.n_kept)}


def outcome_features(model, x, seed):
    """Regressor used by each outcome model in the misspecification sweep."""
    if model == "correct":
        return x
    if model == "noise":
        return rng_for(seed, "noise_feature").standard_normal(x.shape[0])
    if model == "misspec1":
        return x ** 3
    if model == "misspec2":
        return np.exp(x / 2.0)
    if model == "misspec3":
        # log(x^4) is undefined only on the null event x == 0
        return np.log(np.maximum(x ** 4, 1e-300))
    raise ConfigError(f"unknown outcome model {model!r}")


def _misspecification_point(p, n, seed, tau):
    cfg = DgpConfig(sigma_y=p["sigma_y"], tau0=tau, n=n, seed=seed)
    table = sample_dgp(cfg)
    _, weights, m = _plain_summary(table)
    feat = outcome_features(p["model"], table.covariates[:, 0], seed)
    wtable = ObservationTable(table.outcome, table.treatment, feat[:, None])
    model = fit_outcome_model(wtable)
    e = residualize(wtable, model)
    me = weight_moments(weights, table, outcome_override=e)
    y = table.outcome
    sit = FavorableSituation(tau, y[weights.kept_index], weights.kept_weights, moments=m)
    sit_e = FavorableSituation(tau, e[weights.kept_index], weights.kept_weights, "augmented",
                               moments=me)
    lam, lam_a = ds_msm(sit).value, ds_msm(sit_e).value
    r2, r2_a = ds_vbm(sit).value, ds_vbm(sit_e).value
    return {"cor_wy": m.cor_wy, "var_y": m.var_y, "cor_we": me.cor_wy, "var_e": me.var_y,
            "lambda": lam, "lambda_aug": lam_a, "lambda_change": lam_a - lam,
            "r2": r2, "r2_aug": r2_a, "r2_change": r2_a - r2}


def _run_point(kind, index, params, n, seed):
    point_seed = child_seed(seed, f"sweep:{kind}", index)
    row = SweepRow(kind, index, dict(params), n=n, seed=point_seed)
    try:
        if kind == "drivers":
            row.values = _drivers_point(params, n, point_seed)
        elif kind == "heterogeneity":
            setup = {**HETEROGENEITY_SETUP, **{k: params[k] for k in HETEROGENEITY_SETUP if k in params}}
            row.values = _heterogeneity_point(params, n, point_seed, **setup)
        else:
            row.values = _misspecification_point(params, n, point_seed, params.get("tau", MISSPEC_TAU))
    except (DsenseError, ArithmeticError, np.linalg.LinAlgError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def sweep(kind, grid=None, n=1_000_000, seed=0, workers=1):
    """Run one of the simulation sweeps; each grid point gets its own derived seed.

    Failures at a grid point are recorded in the row's ``error`` field and the
    sweep continues.
    """
    if kind not in SWEEPS:
        raise ConfigError(f"unknown sweep {kind!r}; expected one of {SWEEPS}")
    grid = default_grid(kind) if grid is None else list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    args = [(kind, i, p, n, seed) for i, p in enumerate(grid)]
    if workers <= 1:
        return [_run_point(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, *zip(*args)))


def sweep_frame(rows):
    return pd.DataFrame([r.flat() for r in rows])


def sweep_json(rows):
    return json.dumps([asdict(r) for r in rows], indent=2, default=float)
