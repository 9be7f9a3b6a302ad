"""Design sensitivity of weighted designs under the VBM and MSM, gain criteria
for augmentation and trimming, and the asymptotic power approximation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .exceptions import DegenerateDataError, NumericalError, ParameterError
from .propensity import moments_from_arrays
from .sensitivity import LAMBDA_CAP, ReplicateSet, SortedControls, interval_for

VARIANTS = ("standard", "trimmed", "augmented")
R2_SENTINEL = 1.0 - 1e-12


@dataclass(frozen=True, eq=False)
class FavorableSituation:
    """A hypothesized effect ``tau`` with an empirical control distribution.

    ``y`` holds control outcomes (residuals for ``variant="augmented"``) and
    ``w`` their weights, both restricted to kept controls. ``moments`` may
    override the moments computed from ``(y, w)``; the planning workflow uses
    this to combine full-sample weight variance with planning-sample outcomes.
    """

    tau: float
    y: np.ndarray
    w: np.ndarray
    variant: str = "standard"
    moments: object = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if y.size == 0 or y.shape != w.shape:
            raise DegenerateDataError("favorable situation needs matching, nonempty control samples")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    def resolved_moments(self):
        return self.moments if self.moments is not None else moments_from_arrays(self.y, self.w)

    @classmethod
    def from_fit(cls, fitted, tau, moments=None):
        variant = "augmented" if fitted.design.augment else (
            "trimmed" if fitted.design.trim else "standard")
        return cls(tau, fitted.control_outcome, fitted.control_weights, variant, moments)


@dataclass(frozen=True)
class DesignSensitivityResult:
    model: str
    value: float
    attained: bool = True
    flags: tuple = ()
    diagnostics: dict = field(default_factory=dict)


def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"design sensitivity needs a positive effect, got tau={tau}")


def ds_vbm(situation):
    """``R2 = a^2 / (1 + a^2)`` with ``a^2 = tau^2 / ((1 - cor^2) var_w var_y)``."""
    _check_tau(situation.tau)
    m = situation.resolved_moments()
    denom = (1.0 - m.cor_wy ** 2) * m.var_w * m.var_y
    if m.var_w <= 0 or m.var_y <= 0:
        return DesignSensitivityResult("vbm", R2_SENTINEL, True, ("no-confounding-possible",),
                                       {"a2": math.inf})
    if denom <= 0:
        return DesignSensitivityResult("vbm", R2_SENTINEL, True, ("perfect-correlation",),
                                       {"a2": math.inf})
    a2 = situation.tau ** 2 / denom
    return DesignSensitivityResult("vbm", a2 / (1.0 + a2), True, (), {"a2": a2})


def msm_rhs(situation, lam):
    """Largest weighted control mean reachable with weights in ``[w/lam, lam w]``."""
    return SortedControls.build(situation.y, situation.w).max_mean(lam)


def ds_msm(situation, tol=1e-10, max_iter=200):
    """Solve ``msm_rhs(lam) = hajek mean + tau`` for the MSM design sensitivity.

    Returns ``inf`` with ``attained=False`` when the target is at or beyond the
    largest positive-weight control outcome, which no finite Lambda can reach.
    """
    _check_tau(situation.tau)
    sc = SortedControls.build(situation.y, situation.w)
    hajek = float(sc.cum_wy[-1] / sc.cum_w[-1])
    target = hajek + situation.tau
    y_sup = float(np.max(situation.y[situation.w > 0]))
    diag = {"target": target, "hajek_mean": hajek, "sup": y_sup}
    if target >= y_sup:
        return DesignSensitivityResult("msm", math.inf, False, ("sample-bounded",), diag)
    lo, hi = 1.0, 2.0
    while sc.max_mean(hi) < target:
        lo = hi
        if hi >= LAMBDA_CAP:
            diag["bracket"] = (lo, hi)
            return DesignSensitivityResult("msm", math.inf, False, ("beyond-cap",), diag)
        hi = min(2.0 * hi, LAMBDA_CAP)
    it = 0
    while hi - lo > tol * hi and it < max_iter:
        mid = 0.5 * (lo + hi)
        if sc.max_mean(mid) < target:
            lo = mid
        else:
            hi = mid
        it += 1
    root = 0.5 * (lo + hi)
    resid = sc.max_mean(root) - target
    diag.update(iterations=it, bracket=(lo, hi), residual=resid)
    if abs(resid) > 1e-6 * (1.0 + abs(target)):
        raise NumericalError(f"MSM design sensitivity root check failed (residual {resid:.3g})")
    return DesignSensitivityResult("msm", root, True, (), diag)


def design_sensitivity(situation, model):
    return ds_vbm(situation) if model == "vbm" else ds_msm(situation)


# Gain criteria ----------------------------------------------------------------

@dataclass(frozen=True)
class GainVerdict:
    """``improves`` when ``lhs < rhs`` strictly; equality counts as no gain."""

    verdict: str
    lhs: float
    rhs: float
    factors: dict
    flags: tuple = ()

    @property
    def improves(self):
        return self.verdict == "improves"


def augmentation_gain(moments_y, moments_e):
    """Augmentation raises the VBM design sensitivity iff
    ``var(e) < (1 - cor(w,Y)^2) / (1 - cor(w,e)^2) * var(Y)``."""
    ce2 = moments_e.cor_wy ** 2
    if ce2 >= 1.0:
        return GainVerdict("undefined", moments_e.var_y, math.nan, {}, ("cor(w,e)=1",))
    factor = (1.0 - moments_y.cor_wy ** 2) / (1.0 - ce2)
    lhs = moments_e.var_y
    rhs = factor * moments_y.var_y
    verdict = "improves" if lhs < rhs else "does_not"
    return GainVerdict(verdict, lhs, rhs, {"correlation_factor": factor, "var_y": moments_y.var_y})


def trimming_gain(moments_full, moments_trim, effect_ratio=1.0):
    """Trimming raises the VBM design sensitivity iff
    ``var(w|trim)/var(w) < [(1 - cor^2)/(1 - cor_trim^2)] * [var(Y)/var(Y|trim)]``.

    The criterion assumes a constant effect. ``effect_ratio`` (``tau_trim / tau``)
    generalizes it by multiplying the right side by its square.
    """
    ct2 = moments_trim.cor_wy ** 2
    if ct2 >= 1.0 or moments_full.var_w <= 0 or moments_trim.var_y <= 0:
        return GainVerdict("undefined", math.nan, math.nan, {}, ("degenerate-moments",))
    a = moments_trim.var_w / moments_full.var_w
    b = (1.0 - moments_full.cor_wy ** 2) / (1.0 - ct2)
    c = moments_full.var_y / moments_trim.var_y
    rhs = b * c * effect_ratio ** 2
    verdict = "improves" if a < rhs else "does_not"
    return GainVerdict(verdict, a, rhs, {"a_weight_variance": a, "b_correlation": b,
                                         "c_outcome_variance": c, "effect_ratio": effect_ratio})


# Power --------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerInput:
    n: int
    tau_w: float
    xi: float
    sigma_w: float
    sigma_nu: float
    alpha: float = 0.05

    def __post_init__(self):
        if not (self.sigma_w > 0 and self.sigma_nu > 0):
            raise ParameterError("sigma_w and sigma_nu must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")


def power_formula(inp):
    """``1 - Phi((k * sigma_nu + sqrt(n) (xi - tau_w)) / sigma_w)`` with
    ``k = Phi^{-1}(1 - alpha)``, the upper-alpha normal critical value."""
    k = norm.ppf(1.0 - inp.alpha)
    z = (k * inp.sigma_nu + math.sqrt(inp.n) * (inp.xi - inp.tau_w)) / inp.sigma_w
    return float(norm.sf(z))


def power_inputs_from_bootstrap(table, design, spec, reps=1000, seed=0, alpha=0.05,
                                workers=1, replicates=None):
    """Plug-in power inputs: ``sigma_w`` and ``sigma_nu`` are sqrt(n) times the
    bootstrap standard deviations of the estimate and of the lower bound, and
    ``xi`` is the estimate minus the lower bound."""
    if replicates is None:
        replicates = ReplicateSet(table, design, reps=reps, seed=seed, workers=workers)
    full = interval_for(replicates.full, spec)
    lo, _ = replicates.bounds(spec)
    rn = math.sqrt(table.n)
    return PowerInput(
        n=table.n,
        tau_w=full.point,
        xi=full.point - full.lower,
        sigma_w=rn * float(np.std(replicates.values, ddof=1)),
        sigma_nu=rn * float(np.std(lo, ddof=1)),
        alpha=alpha,
    )


# Reports ------------------------------------------------------------------------

def design_sensitivity_curve(fitted_designs, tau_grid):
    """Rows ``{tau, <label>_r2, <label>_lambda}`` over ``tau_grid`` for a dict of
    fitted designs keyed by label (constant effect assumed for trimmed designs)."""
    rows = []
    for tau in tau_grid:
        row = {"tau": float(tau)}
        for label, fitted in fitted_designs.items():
            sit = FavorableSituation.from_fit(fitted, tau)
            row[f"r2_{label}"] = ds_vbm(sit).value
            row[f"lambda_{label}"] = ds_msm(sit).value
        rows.append(row)
    return rows
