"""Effect intervals under the variance-based (VBM) and marginal (MSM) sensitivity
models, percentile-bootstrap confidence intervals and the robustness value."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._random import rng_for
from .estimators import fit_design
from .exceptions import (
    BootstrapWarning,
    DegenerateDataError,
    NumericalError,
    ParameterError,
    SingularDesignError,
)
from .propensity import moments_from_arrays

MODELS = ("vbm", "msm")
LAMBDA_CAP = 1e4
R2_CAP = 1.0 - 1e-9
GAMMA_TOL = 1e-3
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class SensitivitySpec:
    """Sensitivity model and parameter: R^2 in [0, 1) (vbm) or Lambda >= 1 (msm)."""

    model: str
    parameter: float

    def __post_init__(self):
        if self.model not in MODELS:
            raise ParameterError(f"unknown sensitivity model {self.model!r}")
        p = self.parameter
        if self.model == "vbm" and not 0.0 <= p < 1.0:
            raise ParameterError(f"R^2 must lie in [0, 1), got {p}")
        if self.model == "msm" and not p >= 1.0:
            raise ParameterError(f"Lambda must be >= 1, got {p}")

    @property
    def null_value(self):
        return 0.0 if self.model == "vbm" else 1.0

    def with_parameter(self, value):
        return SensitivitySpec(self.model, value)


@dataclass(frozen=True)
class EffectIntervalEstimate:
    lower: float
    upper: float
    point: float
    ci_lower: float | None = None
    ci_upper: float | None = None
    alpha: float | None = None
    bootstrap_reps: int = 0
    spec: SensitivitySpec | None = None

    @property
    def rejects_zero(self):
        """Whether the confidence interval (or the point interval) excludes 0."""
        lo = self.lower if self.ci_lower is None else self.ci_lower
        hi = self.upper if self.ci_upper is None else self.ci_upper
        return lo > 0 or hi < 0


# VBM ------------------------------------------------------------------------

def vbm_bound(var_w, var_y, cor, r2):
    """Worst-case bias ``sqrt(1 - cor^2) * sqrt(r2 / (1 - r2) * var_y * var_w)``."""
    if not 0.0 <= r2 < 1.0:
        raise ParameterError(f"R^2 must lie in [0, 1), got {r2}")
    return math.sqrt(max(1.0 - cor * cor, 0.0)) * math.sqrt(r2 / (1.0 - r2) * var_y * var_w)


def vbm_interval(estimate, moments, r2):
    """Effect interval ``[tau - B, tau + B]`` under the variance-based model."""
    b = vbm_bound(moments.var_w, moments.var_y, moments.cor_wy, r2)
    tau = estimate.value
    return EffectIntervalEstimate(tau - b, tau + b, tau, spec=SensitivitySpec("vbm", r2))


# MSM ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SortedControls:
    """Control (outcome, weight) pairs in descending outcome order with the
    prefix sums used by the cutoff enumeration."""

    y: np.ndarray
    w: np.ndarray
    cum_w: np.ndarray
    cum_wy: np.ndarray

    @classmethod
    def build(cls, y, w):
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        if y.size == 0:
            raise DegenerateDataError("MSM extrema need at least one control")
        order = np.argsort(-y, kind="stable")
        ys, ws = y[order], w[order]
        zero = np.zeros(1)
        return cls(ys, ws, np.concatenate([zero, np.cumsum(ws)]),
                   np.concatenate([zero, np.cumsum(ws * ys)]))

    def max_mean(self, lam):
        """max over cutoffs a of the Hajek mean with the top-a weights times
        ``lam`` and the rest divided by ``lam``."""
        if lam < 1.0:
            raise ParameterError(f"Lambda must be >= 1, got {lam}")
        tw, twy = self.cum_w[-1], self.cum_wy[-1]
        num = lam * self.cum_wy + (twy - self.cum_wy) / lam
        den = lam * self.cum_w + (tw - self.cum_w) / lam
        ok = den > 0
        return float(np.max(num[ok] / den[ok]))


def msm_max_mean(y, w, lam):
    return SortedControls.build(y, w).max_mean(lam)


def msm_min_mean(y, w, lam):
    return -SortedControls.build(-np.asarray(y, dtype=float), w).max_mean(lam)


def msm_extrema(y, w, treated_mean, lam):
    """Effect interval under the marginal sensitivity model.

    ``y`` and ``w`` are the kept control outcomes (or residuals) and weights;
    ``treated_mean`` is the treated component of the estimator. The extrema of
    the weighted control mean over ``w* in [w / lam, lam * w]`` sit at a sorted
    cutoff vertex, so they are found exactly by enumerating cutoffs.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    point = treated_mean - float(np.dot(w, y) / w.sum())
    if lam == 1.0:
        # the box collapses to w; return the point exactly rather than a rounded copy
        return EffectIntervalEstimate(point, point, point, spec=SensitivitySpec("msm", lam))
    hi = msm_max_mean(y, w, lam)
    lo = msm_min_mean(y, w, lam)
    return EffectIntervalEstimate(
        lower=min(treated_mean - hi, point),
        upper=max(treated_mean - lo, point),
        point=point,
        spec=SensitivitySpec("msm", lam),
    )


def interval_for(fitted, spec):
    """Effect interval of a :class:`FittedDesign` under ``spec``."""
    y, w = fitted.control_outcome, fitted.control_weights
    if spec.model == "msm":
        return msm_extrema(y, w, fitted.treated_component, spec.parameter)
    m = moments_from_arrays(y, w)
    return vbm_interval(fitted.estimate, m, spec.parameter)


# Bootstrap -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Replicate:
    value: float
    treated: float
    var_w: float
    var_y: float
    cor: float
    desc: SortedControls
    asc: SortedControls

    def interval(self, spec):
        if spec.model == "vbm":
            b = vbm_bound(self.var_w, self.var_y, self.cor, spec.parameter)
            return self.value - b, self.value + b
        lam = spec.parameter
        if lam == 1.0:
            return self.value, self.value
        lo = self.treated - self.desc.max_mean(lam)
        hi = self.treated + self.asc.max_mean(lam)
        return min(lo, self.value), max(hi, self.value)


def _summarize(fitted):
    y, w = fitted.control_outcome, fitted.control_weights
    m = moments_from_arrays(y, w) if y.size >= 2 else None
    return _Replicate(
        value=fitted.value,
        treated=fitted.treated_component,
        var_w=m.var_w if m else 0.0,
        var_y=m.var_y if m else 0.0,
        cor=m.cor_wy if m else 0.0,
        desc=SortedControls.build(y, w),
        asc=SortedControls.build(-y, w),
    )


def _run_replicates(table, design, seed, start, stop, init):
    out = []
    redraws = 0
    sep = 0
    for r in range(start, stop):
        rng = rng_for(seed, "bootstrap", r)
        for _ in range(MAX_REDRAWS):
            idx = rng.integers(0, table.n, table.n)
            z = table.treatment[idx]
            n1 = int(z.sum())
            if n1 == 0 or n1 == table.n:
                redraws += 1
                continue
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    fitted = fit_design(table.subset(idx), design, init=init)
                sep += sum(1 for c in caught if "separation" in str(c.message)
                           or "converge" in str(c.message))
                out.append(_summarize(fitted))
                break
            except (DegenerateDataError, SingularDesignError):
                redraws += 1
        else:
            raise NumericalError(f"bootstrap replicate {r} stayed degenerate after {MAX_REDRAWS} redraws")
    return out, redraws, sep


class ReplicateSet:
    """Bootstrap replicates of a design, fitted once and reused for every
    sensitivity parameter.

    Replicate ``r`` draws its resample from the stream ``(seed, "bootstrap", r)``,
    so the set is identical for any number of workers.
    """

    def __init__(self, table, design, reps=1000, seed=0, workers=1, full=None):
        if reps < 2:
            raise ParameterError("bootstrap needs at least 2 replicates")
        if reps < 200:
            warnings.warn(f"{reps} bootstrap replicates is below the recommended 200",
                          BootstrapWarning, stacklevel=2)
        self.table = table
        self.design = design
        self.reps = reps
        self.seed = seed
        self.full = fit_design(table, design) if full is None else full
        init = self.full.fit.coefficients
        if workers <= 1 or reps < 2 * workers:
            parts = [_run_replicates(table, design, seed, 0, reps, init)]
        else:
            bounds = np.linspace(0, reps, workers + 1).astype(int)
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = [pool.submit(_run_replicates, table, design, seed, int(a), int(b), init)
                        for a, b in zip(bounds[:-1], bounds[1:])]
                parts = [f.result() for f in futs]
        self.replicates = [rep for p in parts for rep in p[0]]
        self.redraws = sum(p[1] for p in parts)
        self.separation_warnings = sum(p[2] for p in parts)
        self.diagnostics = []
        if self.redraws > 0.01 * reps:
            msg = f"{self.redraws} degenerate bootstrap resamples were redrawn ({reps} replicates)"
            warnings.warn(msg, BootstrapWarning, stacklevel=2)
            self.diagnostics.append(msg)
        if self.separation_warnings:
            msg = f"{self.separation_warnings} bootstrap replicates had propensity-fit separation or non-convergence"
            warnings.warn(msg, BootstrapWarning, stacklevel=2)
            self.diagnostics.append(msg)
        self._values = np.array([r.value for r in self.replicates])

    @property
    def values(self):
        return self._values

    def bounds(self, spec):
        """Arrays of replicate lower and upper interval endpoints."""
        pairs = np.array([rep.interval(spec) for rep in self.replicates])
        return pairs[:, 0], pairs[:, 1]

    def interval(self, spec, alpha=0.05):
        point = interval_for(self.full, spec)
        lo, hi = self.bounds(spec)
        return EffectIntervalEstimate(
            lower=point.lower,
            upper=point.upper,
            point=point.point,
            ci_lower=float(np.quantile(lo, alpha / 2)),
            ci_upper=float(np.quantile(hi, 1 - alpha / 2)),
            alpha=alpha,
            bootstrap_reps=self.reps,
            spec=spec,
        )


def percentile_bootstrap_ci(table, design, spec, reps=1000, alpha=0.05, seed=0, workers=1,
                            replicates=None):
    """Percentile bootstrap CI ``[q_{a/2}(L*), q_{1-a/2}(U*)]`` for the effect interval.

    Each replicate resamples whole units, refits the propensity model, redoes
    trimming and refits the outcome model before computing its interval.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if replicates is None:
        replicates = ReplicateSet(table, design, reps=reps, seed=seed, workers=workers)
    return replicates.interval(spec, alpha)


@dataclass(frozen=True)
class RobustnessValue:
    """Largest sensitivity parameter at which the CI still excludes zero.

    ``status`` is "ok", "not_significant" (CI covers 0 at the null parameter)
    or "unbounded" (still significant at the search cap; ``value`` is inf).
    """

    model: str
    value: float
    status: str
    sign: int = 0
    monotone: bool = True
    iterations: int = 0


def robustness_value(table, design, model, alpha=0.05, reps=1000, seed=0, workers=1,
                     replicates=None, tol=GAMMA_TOL):
    """Bisection for the robustness value on a fixed set of bootstrap replicates."""
    if model not in MODELS:
        raise ParameterError(f"unknown sensitivity model {model!r}")
    if replicates is None:
        replicates = ReplicateSet(table, design, reps=reps, seed=seed, workers=workers)
    spec0 = SensitivitySpec(model, 0.0 if model == "vbm" else 1.0)
    base = replicates.interval(spec0, alpha)
    if base.ci_lower > 0:
        sign = 1
    elif base.ci_upper < 0:
        sign = -1
    else:
        return RobustnessValue(model, spec0.null_value, "not_significant")

    def rejects(g):
        est = replicates.interval(spec0.with_parameter(g), alpha)
        return est.ci_lower > 0 if sign > 0 else est.ci_upper < 0

    lo = spec0.null_value
    it = 0
    if model == "msm":
        hi = 2.0
        while rejects(hi):
            lo = hi
            if hi >= LAMBDA_CAP:
                return RobustnessValue(model, math.inf, "unbounded", sign)
            hi = min(2.0 * hi, LAMBDA_CAP)
    else:
        hi = R2_CAP
        if rejects(hi):
            return RobustnessValue(model, math.inf, "unbounded", sign)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        it += 1
        if rejects(mid):
            lo = mid
        else:
            hi = mid
    # spot-check monotonicity of the predicate on either side of the root
    below = np.linspace(spec0.null_value, lo, 6)
    above = np.linspace(hi, hi + (hi - spec0.null_value), 4)[1:]
    if model == "vbm":
        above = above[above < R2_CAP]
    monotone = all(rejects(g) for g in below) and not any(rejects(g) for g in above)
    if not monotone:
        warnings.warn(f"rejection predicate is not monotone in the {model} parameter; "
                      "robustness value is the bisection root", BootstrapWarning, stacklevel=2)
    return RobustnessValue(model, lo, "ok", sign, monotone, it)
