"""Observational study tables: CSV ingestion, validation and planning splits."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ._random import rng_for
from .exceptions import (
    ConfigError,
    DataValidationError,
    DegenerateDataError,
    SchemaError,
)

SPLIT_MODES = ("controls_only", "full_split")


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Outcome, binary treatment and numeric covariates for ``n`` units.

    ``unit_ids`` are row indices of the source table and survive subsetting,
    so a planning or bootstrap sample can always be traced back to its rows.
    ``extra`` holds additional numeric columns (e.g. external outcome-model
    predictions) aligned with the units.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    outcome_name: str = "y"
    treatment_name: str = "z"
    unit_ids: np.ndarray | None = None
    extra: dict = field(default_factory=dict)
    require_both_arms: bool = True

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float).ravel()
        z_raw = np.asarray(self.treatment)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        if z_raw.shape[0] != n or x.shape[0] != n:
            raise DataValidationError("outcome, treatment and covariates must have equal length")
        if x.shape[1] < 1:
            raise DataValidationError("at least one covariate column is required")
        bad = ~np.isin(z_raw, (0, 1))
        if bad.any():
            rows = np.flatnonzero(bad)[:10].tolist()
            raise DataValidationError(f"treatment must be 0 or 1; offending rows: {rows}")
        z = z_raw.astype(np.int8)
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise DataValidationError("missing or non-finite values in outcome/covariates")
        if n < 2:
            raise DegenerateDataError(f"need at least 2 units, got {n}")
        n1 = int(z.sum())
        if self.require_both_arms and (n1 == 0 or n1 == n):
            raise DegenerateDataError("both a treated and a control unit are required")
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataValidationError("covariate_names does not match covariate columns")
        ids = np.arange(n) if self.unit_ids is None else np.asarray(self.unit_ids, dtype=np.int64)
        extra = {}
        for key, col in self.extra.items():
            col = np.asarray(col, dtype=float).ravel()
            if col.shape[0] != n:
                raise DataValidationError(f"extra column {key!r} has wrong length")
            extra[key] = col
        for arr in (y, z, x, ids, *extra.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "treatment", z)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "extra", extra)

    @property
    def n(self):
        return self.outcome.shape[0]

    @property
    def treated(self):
        return self.treatment == 1

    @property
    def controls(self):
        return self.treatment == 0

    @property
    def n_treated(self):
        return int(self.treatment.sum())

    @property
    def n_controls(self):
        return self.n - self.n_treated

    def subset(self, index, require_both_arms=None):
        """Rows ``index`` (integer positions or boolean mask) as a new table."""
        index = np.asarray(index)
        if require_both_arms is None:
            require_both_arms = self.require_both_arms
        return ObservationTable(
            outcome=self.outcome[index],
            treatment=self.treatment[index],
            covariates=self.covariates[index],
            covariate_names=self.covariate_names,
            outcome_name=self.outcome_name,
            treatment_name=self.treatment_name,
            unit_ids=self.unit_ids[index],
            extra={k: v[index] for k, v in self.extra.items()},
            require_both_arms=require_both_arms,
        )

    def with_outcome(self, outcome):
        return ObservationTable(
            outcome=outcome,
            treatment=self.treatment,
            covariates=self.covariates,
            covariate_names=self.covariate_names,
            outcome_name=self.outcome_name,
            treatment_name=self.treatment_name,
            unit_ids=self.unit_ids,
            extra=self.extra,
            require_both_arms=self.require_both_arms,
        )

    def to_frame(self):
        cols = {self.outcome_name: self.outcome, self.treatment_name: self.treatment}
        for j, name in enumerate(self.covariate_names):
            cols[name] = self.covariates[:, j]
        cols.update(self.extra)
        return pd.DataFrame(cols)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def load_csv(path, outcome, treatment, covariates, extra=()):
    """Read a CSV file into a validated :class:`ObservationTable`.

    Parameters
    ----------
    path : str or Path
        UTF-8 CSV with a header row.
    outcome, treatment : str
        Column names for Y and Z.
    covariates : sequence of str
        One or more numeric covariate columns.
    extra : sequence of str
        Additional numeric columns to carry along (e.g. external predictions).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    covariates = list(covariates)
    if not covariates:
        raise SchemaError("schema must name at least one covariate column")
    frame = pd.read_csv(path, dtype=str, encoding="utf-8", keep_default_na=False)
    wanted = [outcome, treatment, *covariates, *extra]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise SchemaError(f"columns not found in {path.name}: {missing}")

    values = {}
    bad_rows = set()
    for col in dict.fromkeys(wanted):
        parsed = pd.to_numeric(frame[col].str.strip(), errors="coerce")
        bad_rows.update(np.flatnonzero(parsed.isna().to_numpy()).tolist())
        values[col] = parsed.to_numpy(dtype=float)
    if bad_rows:
        rows = sorted(bad_rows)
        raise DataValidationError(f"unparseable or empty cells in rows {rows[:20]}")

    z = values[treatment]
    nonbinary = np.flatnonzero(~np.isin(z, (0.0, 1.0)))
    if nonbinary.size:
        raise DataValidationError(
            f"treatment column {treatment!r} must be 0/1; offending rows: {nonbinary[:20].tolist()}"
        )
    return ObservationTable(
        outcome=values[outcome],
        treatment=z.astype(np.int8),
        covariates=np.column_stack([values[c] for c in covariates]),
        covariate_names=tuple(covariates),
        outcome_name=outcome,
        treatment_name=treatment,
        extra={c: values[c] for c in extra},
    )


@dataclass(frozen=True, eq=False)
class SplitResult:
    planning: ObservationTable
    analysis: ObservationTable
    mode: str
    seed: int


def split_planning(table, fraction, mode="controls_only", seed=0):
    """Randomly split ``table`` into planning and analysis samples.

    ``controls_only`` draws ``round(fraction * n_controls)`` planning units from
    the controls and leaves every treated unit in the analysis sample.
    ``full_split`` draws ``round(fraction * n)`` units, stratified by arm so
    both samples keep treated and control units.
    """
    if mode not in SPLIT_MODES:
        raise ConfigError(f"unknown split mode {mode!r}")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"planning fraction must lie in (0, 1), got {fraction}")
    rng = rng_for(seed, "split_planning")
    treated_idx = np.flatnonzero(table.treated)
    control_idx = np.flatnonzero(table.controls)

    if mode == "controls_only":
        k = int(round(fraction * control_idx.size))
        if k < 2:
            raise DegenerateDataError(f"planning sample would hold {k} controls (< 2)")
        if k >= control_idx.size:
            raise DegenerateDataError("planning sample would leave no analysis controls")
        plan = np.sort(rng.choice(control_idx, size=k, replace=False))
    else:
        k = int(round(fraction * table.n))
        if k < 2:
            raise DegenerateDataError(f"planning sample would hold {k} units (< 2)")
        k1 = int(round(k * treated_idx.size / table.n))
        k1 = min(max(k1, 1), treated_idx.size - 1)
        k0 = k - k1
        if k0 < 1 or k0 > control_idx.size - 1 or k1 < 1:
            raise DegenerateDataError("stratified split cannot keep both arms in both samples")
        plan = np.sort(np.concatenate([
            rng.choice(treated_idx, size=k1, replace=False),
            rng.choice(control_idx, size=k0, replace=False),
        ]))
    in_plan = np.zeros(table.n, dtype=bool)
    in_plan[plan] = True
    # a controls_only planning sample has no treated arm by construction
    planning = table.subset(in_plan, require_both_arms=(mode == "full_split"))
    return SplitResult(planning=planning, analysis=table.subset(~in_plan), mode=mode, seed=seed)

