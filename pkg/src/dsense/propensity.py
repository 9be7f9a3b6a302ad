"""Logistic propensity model, ATT weights, trimming and weight/outcome moments."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .exceptions import (
    DegenerateDataError,
    OverlapWarning,
    ParameterError,
    SeparationWarning,
    SingularDesignError,
)

PROB_EPS = 1e-12
GRAD_TOL = 1e-8
MAX_ITER = 100
SEPARATION_COEF = 30.0


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Maximum-likelihood logistic regression of treatment on covariates.

    ``coefficients`` are on the original covariate scale (intercept first).
    ``gradient_norm`` is the max-norm of the average score in the internal
    standardized parametrization, which is what the convergence test uses.
    """

    coefficients: np.ndarray
    fitted_probabilities: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    diagnostics: tuple = ()

    def predict(self, covariates):
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        p = expit(self.coefficients[0] + x @ self.coefficients[1:])
        return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _neg_loglik(eta, z):
    # sum log(1 + exp(eta)) - z * eta, stable for large |eta|
    return float(np.sum(np.logaddexp(0.0, eta) - z * eta))


def fit_logistic(table, init=None, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Fit ``P(Z=1|X) = expit(b0 + X b)`` by Newton-Raphson with step halving.

    Covariates are standardized internally, which leaves the MLE unchanged and
    keeps the Hessian well conditioned. ``init`` optionally warm-starts the
    solver with original-scale coefficients.
    """
    x = table.covariates
    z = table.treatment.astype(float)
    n, d = x.shape
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    if np.any(scale <= 1e-12 * np.maximum(1.0, np.abs(center))):
        raise SingularDesignError("a covariate column is constant (collinear with intercept)")
    design = np.empty((n, d + 1))
    design[:, 0] = 1.0
    design[:, 1:] = (x - center) / scale
    if np.linalg.matrix_rank(design) < d + 1:
        raise SingularDesignError("covariate design matrix is rank deficient")

    if init is None:
        beta = np.zeros(d + 1)
        zbar = z.mean()
        beta[0] = np.log(zbar / (1.0 - zbar))
    else:
        init = np.asarray(init, dtype=float)
        beta = np.empty(d + 1)
        beta[1:] = init[1:] * scale
        beta[0] = init[0] + init[1:] @ center

    eta = design @ beta
    dev = _neg_loglik(eta, z)
    converged = False
    separated = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = design.T @ (z - p) / n
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= tol:
            converged = True
            it -= 1
            break
        wts = p * (1.0 - p)
        hess = (design.T * wts) @ design / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            eta_c = design @ cand
            dev_c = _neg_loglik(eta_c, z)
            if dev_c <= dev + 1e-12 * abs(dev):
                break
            t *= 0.5
        improvement = dev - dev_c
        beta, eta, dev = cand, eta_c, dev_c
        if np.max(np.abs(beta[1:])) > SEPARATION_COEF and improvement < 1e-3 * max(dev, 1.0):
            separated = True
            break

    coef = np.empty(d + 1)
    coef[1:] = beta[1:] / scale
    coef[0] = beta[0] - coef[1:] @ center
    diagnostics = []
    if separated or not converged:
        msg = ("logistic fit shows separation (coefficients diverging); "
               "fitted propensities are unreliable") if separated else (
               f"logistic fit did not converge in {max_iter} iterations")
        warnings.warn(msg, SeparationWarning, stacklevel=2)
        diagnostics.append(msg)
        converged = False
    raw = expit(eta)
    return PropensityFit(
        coefficients=coef,
        fitted_probabilities=np.clip(raw, PROB_EPS, 1.0 - PROB_EPS),
        converged=converged,
        iterations=it,
        gradient_norm=grad_norm,
        diagnostics=tuple(diagnostics),
    )


@dataclass(frozen=True)
class TrimRule:
    """Drop units whose propensity exceeds ``value`` (``kind="propensity"``) or
    whose raw ATT weight exceeds ``value`` (``kind="weight"``)."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind == "propensity":
            if not 0.5 < self.value <= 1.0:
                raise ParameterError(f"propensity cutoff must lie in (0.5, 1], got {self.value}")
        elif self.kind == "weight":
            if not self.value > 0:
                raise ParameterError(f"weight cutoff must be positive, got {self.value}")
        else:
            raise ParameterError(f"unknown trim rule kind {self.kind!r}")

    @property
    def propensity_cutoff(self):
        # w = p / (1 - p) > m  <=>  p > m / (1 + m)
        return self.value if self.kind == "propensity" else self.value / (1.0 + self.value)

    def label(self):
        return f"{self.kind}:{self.value:g}"


@dataclass(frozen=True, eq=False)
class WeightSet:
    """ATT weights for the control units of a table.

    ``control_index`` gives the table rows the weights belong to. Treated
    units carry weight 1; ``treated_mask`` marks the treated rows that remain
    in the estimand after trimming.
    """

    control_index: np.ndarray
    raw_weights: np.ndarray
    control_weights: np.ndarray
    kept_mask: np.ndarray
    treated_mask: np.ndarray
    normalized: bool
    trim_rule: TrimRule | None = None
    normalized_cutoff: float | None = None
    diagnostics: tuple = field(default=())

    @property
    def kept_weights(self):
        return self.control_weights[self.kept_mask]

    @property
    def kept_index(self):
        return self.control_index[self.kept_mask]

    @property
    def n_kept(self):
        return int(self.kept_mask.sum())


def att_weights(fit, table, normalize=True):
    """Control weights ``w = p / (1 - p)``; optionally rescaled to mean 1."""
    p_raw = fit.fitted_probabilities
    if p_raw.shape[0] != table.n:
        raise ValueError("propensity fit and table are not aligned")
    control_index = np.flatnonzero(table.controls)
    p = p_raw[control_index]
    diagnostics = []
    extreme = control_index[p >= 1.0 - PROB_EPS]
    if extreme.size:
        msg = f"{extreme.size} control units have propensity at the clamp 1-{PROB_EPS:g}: rows {extreme[:10].tolist()}"
        warnings.warn(msg, OverlapWarning, stacklevel=2)
        diagnostics.append(msg)
    raw = p / (1.0 - p)
    w = raw / raw.mean() if normalize else raw.copy()
    return WeightSet(
        control_index=control_index,
        raw_weights=raw,
        control_weights=w,
        kept_mask=np.ones(control_index.size, dtype=bool),
        treated_mask=table.treated.copy(),
        normalized=normalize,
        diagnostics=tuple(diagnostics),
    )


def trim_weights(weights, fit, rule):
    """Drop units above the cutoff and renormalize the kept control weights.

    Controls with propensity strictly above the cutoff are removed, and so are
    treated units above it, so the treated mean targets the trimmed estimand.
    A weight cutoff ``m`` is applied through its propensity equivalent
    ``m / (1 + m)``; units exactly at the cutoff are kept.
    """
    if not isinstance(rule, TrimRule):
        raise TypeError("rule must be a TrimRule")
    a = rule.propensity_cutoff
    p = fit.fitted_probabilities
    keep_controls = weights.kept_mask & (p[weights.control_index] <= a)
    keep_treated = weights.treated_mask & (p <= a)
    if not keep_controls.any():
        raise DegenerateDataError(f"trim rule {rule.label()} removes every control unit")
    if not keep_treated.any():
        raise DegenerateDataError(f"trim rule {rule.label()} removes every treated unit")
    raw = weights.raw_weights
    w = np.zeros_like(raw)
    w[keep_controls] = raw[keep_controls] / raw[keep_controls].mean()
    m_raw = a / (1.0 - a) if a < 1.0 else np.inf
    return replace(
        weights,
        control_weights=w,
        kept_mask=keep_controls,
        treated_mask=keep_treated,
        normalized=True,
        trim_rule=rule,
        normalized_cutoff=m_raw / raw.mean(),
    )


@dataclass(frozen=True)
class WeightMoments:
    var_w: float
    var_y: float
    cor_wy: float
    mean_wy: float
    n_controls: int
    zero_variance: bool = False


def moments_from_arrays(y, w):
    """Sample moments of kept control (outcome, weight) pairs."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    m = y.size
    if m < 2:
        raise DegenerateDataError("moments need at least two kept controls")
    var_w = float(np.var(w, ddof=1))
    var_y = float(np.var(y, ddof=1))
    mean_wy = float(np.dot(w, y) / w.sum())
    zero = var_w <= 0.0 or var_y <= 0.0
    if zero:
        cor = 0.0
    else:
        cov = float(np.dot(w - w.mean(), y - y.mean()) / (m - 1))
        cor = float(np.clip(cov / np.sqrt(var_w * var_y), -1.0, 1.0))
    return WeightMoments(var_w=var_w, var_y=var_y, cor_wy=cor, mean_wy=mean_wy,
                         n_controls=m, zero_variance=zero)


def weight_moments(weights, table, outcome_override=None):
    """var(w), var(Y), cor(w, Y) and the Hajek control mean over kept controls.

    ``outcome_override`` (one value per table row) replaces ``Y``, e.g. with
    outcome-model residuals for the augmented design.
    """
    y = table.outcome if outcome_override is None else np.asarray(outcome_override, dtype=float)
    if y.shape[0] != table.n:
        raise ValueError("outcome_override must have one value per unit")
    return moments_from_arrays(y[weights.kept_index], weights.kept_weights)
