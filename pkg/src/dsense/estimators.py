"""ATT point estimators: Hajek weighted, augmented and trimmed designs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DegenerateDataError, SingularDesignError
from .propensity import TrimRule, att_weights, fit_logistic, trim_weights

OUTCOME_KINDS = ("ols", "external")


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Baseline outcome model ``g(X)`` used by the augmented estimator.

    For ``kind="ols"`` the model is least squares of Y on an intercept and
    ``features(X)`` (the covariates themselves by default), trained on
    control units. ``kind="external"`` reads predictions from an extra column.
    """

    kind: str
    coefficients: np.ndarray | None
    training_r2: float
    residual_variance: float
    features: object = None
    column: str | None = None

    def predict(self, table):
        if self.kind == "external":
            return table.extra[self.column]
        f = _feature_matrix(table.covariates, self.features)
        return self.coefficients[0] + f @ self.coefficients[1:]


def _feature_matrix(x, features):
    f = x if features is None else np.asarray(features(x), dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    return f


def fit_outcome_model(table, kind="ols", column=None, features=None, mask=None):
    """Fit ``g`` on control units (or on rows in ``mask`` when given).

    Parameters
    ----------
    kind : {"ols", "external"}
    column : str, optional
        Extra column holding external predictions (``kind="external"``).
    features : callable, optional
        Maps the covariate matrix to regressors, e.g. ``lambda x: x ** 3``.
    mask : bool array, optional
        Training rows; defaults to the controls.
    """
    if kind not in OUTCOME_KINDS:
        raise ConfigError(f"unknown outcome model kind {kind!r}")
    train = table.controls if mask is None else np.asarray(mask, dtype=bool)
    y = table.outcome[train]
    tss = float(np.sum((y - y.mean()) ** 2))

    if kind == "external":
        if column not in table.extra:
            raise ConfigError(f"external prediction column {column!r} not loaded")
        resid = y - table.extra[column][train]
        ssr = float(resid @ resid)
        r2 = 1.0 - ssr / tss if tss > 0 else 0.0
        return OutcomeModel("external", None, float(np.clip(r2, 0.0, 1.0)),
                            ssr / max(y.size - 1, 1), column=column)

    f = _feature_matrix(table.covariates[train], features)
    n0, d = f.shape
    if n0 < d + 2:
        raise DegenerateDataError(f"outcome model needs at least {d + 2} training controls, got {n0}")
    design = np.column_stack([np.ones(n0), f])
    if not np.isfinite(design).all():
        raise SingularDesignError("outcome-model features are not finite")
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < d + 1:
        raise SingularDesignError("outcome-model design matrix is rank deficient")
    resid = y - design @ coef
    ssr = float(resid @ resid)
    r2 = 1.0 - ssr / tss if tss > 0 else 1.0
    return OutcomeModel(
        kind="ols",
        coefficients=coef,
        training_r2=float(np.clip(r2, 0.0, 1.0)),
        residual_variance=ssr / (n0 - d - 1),
        features=features,
    )


def residualize(table, model):
    """``e = Y - g(X)`` for every unit."""
    return table.outcome - model.predict(table)


@dataclass(frozen=True)
class AttEstimate:
    value: float
    estimator_kind: str
    n_treated_used: int
    n_controls_used: int
    control_mean_component: float
    treated_component: float


def _hajek(y, w):
    total = w.sum()
    if not total > 0:
        raise DegenerateDataError("all kept control weights are zero")
    return float(np.dot(w, y) / total)


def hajek_att(table, weights):
    """Treated mean minus the Hajek-weighted control mean over kept units."""
    y_t = table.outcome[weights.treated_mask]
    if y_t.size == 0:
        raise DegenerateDataError("no treated units kept")
    treated = float(y_t.mean())
    control = _hajek(table.outcome[weights.kept_index], weights.kept_weights)
    kind = "plain" if weights.trim_rule is None else "trimmed"
    return AttEstimate(treated - control, kind, int(y_t.size), weights.n_kept, control, treated)


def augmented_att(table, weights, model):
    """Augmented estimator ``mean(Y|T) - [hajek(Y - g | C) + mean(g | T)]``."""
    g = model.predict(table)
    tm = weights.treated_mask
    if not tm.any():
        raise DegenerateDataError("no treated units kept")
    e = table.outcome - g
    treated = float(table.outcome[tm].mean())
    control = _hajek(e[weights.kept_index], weights.kept_weights) + float(g[tm].mean())
    return AttEstimate(treated - control, "augmented", int(tm.sum()), weights.n_kept, control, treated)


@dataclass(frozen=True)
class Design:
    """An estimator choice: optional trimming rule and optional augmentation.

    ``augment`` is ``None``, ``"ols"`` or ``"column:<name>"``.
    """

    trim: TrimRule | None = None
    augment: str | None = None
    features: object = None

    def __post_init__(self):
        if self.augment not in (None, "ols") and not str(self.augment).startswith("column:"):
            raise ConfigError(f"augment must be None, 'ols' or 'column:<name>', got {self.augment!r}")

    @property
    def kind(self):
        if self.augment and self.trim:
            return "trimmed_augmented"
        if self.augment:
            return "augmented"
        return "trimmed" if self.trim else "plain"

    @property
    def label(self):
        if self.trim is None:
            return self.kind
        return f"{self.kind}({self.trim.label()})"


@dataclass(frozen=True, eq=False)
class FittedDesign:
    """A design fitted to one table.

    Every supported estimator has the form ``treated_component - hajek(control_outcome, w)``,
    where ``control_outcome`` is Y (plain, trimmed) or the residual e
    (augmented) over kept controls. The sensitivity and design-sensitivity
    code only needs this reduced form.
    """

    design: Design
    estimate: AttEstimate
    treated_component: float
    control_outcome: np.ndarray
    control_weights: np.ndarray
    fit: object
    weights: object
    model: OutcomeModel | None

    @property
    def value(self):
        return self.estimate.value


def fit_design(table, design, init=None):
    """Fit propensity model, weights, trimming and outcome model for ``design``."""
    fit = fit_logistic(table, init=init)
    weights = att_weights(fit, table)
    if design.trim is not None:
        weights = trim_weights(weights, fit, design.trim)
    model = None
    y = table.outcome
    tm = weights.treated_mask
    if design.augment is None:
        est = hajek_att(table, weights)
        treated = est.treated_component
        control_outcome = y[weights.kept_index]
    else:
        if design.augment == "ols":
            model = fit_outcome_model(table, "ols", features=design.features)
        else:
            model = fit_outcome_model(table, "external", column=design.augment.split(":", 1)[1])
        est = augmented_att(table, weights, model)
        e = residualize(table, model)
        treated = float(e[tm].mean())
        control_outcome = e[weights.kept_index]
        if design.trim is not None:
            est = AttEstimate(est.value, design.kind, est.n_treated_used, est.n_controls_used,
                              est.control_mean_component, est.treated_component)
    return FittedDesign(
        design=design,
        estimate=est,
        treated_component=treated,
        control_outcome=control_outcome,
        control_weights=weights.kept_weights,
        fit=fit,
        weights=weights,
        model=model,
    )
