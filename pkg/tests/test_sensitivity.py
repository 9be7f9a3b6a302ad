import itertools
import math

import numpy as np
import pytest

from dsense.data import ObservationTable
from dsense.estimators import AttEstimate, Design, fit_design
from dsense.exceptions import BootstrapWarning, ParameterError
from dsense.propensity import WeightMoments
from dsense.sensitivity import (
    ReplicateSet,
    SensitivitySpec,
    interval_for,
    msm_extrema,
    msm_max_mean,
    msm_min_mean,
    percentile_bootstrap_ci,
    robustness_value,
    vbm_bound,
    vbm_interval,
)
from dsense.simulation import DgpConfig, sample_dgp


def vertex_extrema(y, w, lam):
    """Oracle: weighted mean at every vertex of the box [w/lam, lam w]."""
    best_hi, best_lo = -np.inf, np.inf
    for s in itertools.product((lam, 1.0 / lam), repeat=len(y)):
        ws = w * np.array(s)
        v = np.dot(ws, y) / ws.sum()
        best_hi, best_lo = max(best_hi, v), min(best_lo, v)
    return best_lo, best_hi


def est(v):
    return AttEstimate(v, "plain", 1, 1, 0.0, v)


def moments(var_w, var_y, cor):
    return WeightMoments(var_w, var_y, cor, 0.0, 10)


def test_vbm_zero_r2():
    iv = vbm_interval(est(0.7), moments(1.3, 1.8, 0.5), 0.0)
    assert iv.lower == iv.upper == 0.7


def test_vbm_unit_case():
    assert vbm_bound(1.0, 1.0, 0.0, 0.5) == pytest.approx(1.0)


def test_vbm_table_row():
    b = vbm_bound(1.29, 1.82, 0.54, 0.37)
    oracle = math.sqrt(1 - 0.54 ** 2) * math.sqrt(0.37 / 0.63 * 1.82 * 1.29)
    assert b == pytest.approx(oracle, rel=1e-14)
    # the bound sits at the effect size tau = 1 near the design sensitivity
    assert abs(b - 1.0) < 0.015


def test_vbm_bad_r2():
    with pytest.raises(ParameterError):
        vbm_interval(est(1.0), moments(1, 1, 0), 1.0)


def test_vbm_width_increasing():
    r2 = np.linspace(0, 0.999999, 200)
    widths = [vbm_bound(1.3, 1.8, 0.4, r) for r in r2]
    assert np.all(np.diff(widths) > 0)
    assert vbm_bound(1.3, 1.8, 0.4, 1 - 1e-15) > 1e6


def test_msm_identity():
    iv = msm_extrema([1.0, 2.0, 5.0], [1.0, 2.0, 0.5], 4.0, 1.0)
    assert iv.lower == pytest.approx(iv.point) and iv.upper == pytest.approx(iv.point)


def test_msm_two_point_hand_value():
    assert msm_max_mean([1.0, 0.0], [1.0, 1.0], 2.0) == pytest.approx(0.8, abs=1e-15)


@pytest.mark.parametrize("lam", [1.5, 2.0, 5.0])
def test_msm_matches_vertex_enumeration(lam):
    rng = np.random.default_rng(int(lam * 10))
    for m in range(1, 13):
        y = rng.normal(size=m)
        w = rng.exponential(size=m) + 0.01
        lo, hi = vertex_extrema(y, w, lam)
        assert msm_max_mean(y, w, lam) == pytest.approx(hi, rel=1e-12)
        assert msm_min_mean(y, w, lam) == pytest.approx(lo, rel=1e-12)


def test_msm_monotone_in_lambda(rng):
    y, w = rng.normal(size=300), rng.exponential(size=300)
    lams = np.linspace(1, 20, 60)
    hi = [msm_max_mean(y, w, l) for l in lams]
    lo = [msm_min_mean(y, w, l) for l in lams]
    assert np.all(np.diff(hi) >= 0) and np.all(np.diff(lo) <= 0)


def test_msm_tie_order_invariance(rng):
    y = rng.integers(0, 4, 60).astype(float)
    w = rng.exponential(size=60)
    perm = rng.permutation(60)
    for lam in (1.3, 2.0, 7.0):
        assert msm_max_mean(y, w, lam) == pytest.approx(msm_max_mean(y[perm], w[perm], lam), rel=1e-13)


def test_shift_and_scale(rng):
    y, w = rng.normal(size=100), rng.exponential(size=100)
    w = w / w.mean()
    base = msm_extrema(y, w, 1.0, 2.5)
    shifted = msm_extrema(y + 3.0, w, 1.0 + 3.0, 2.5)
    assert shifted.lower == pytest.approx(base.lower, abs=1e-12)
    assert shifted.upper == pytest.approx(base.upper, abs=1e-12)
    mh = msm_max_mean(y, w, 2.5)
    assert msm_max_mean(y + 3.0, w, 2.5) == pytest.approx(mh + 3.0, abs=1e-12)
    assert msm_max_mean(4.0 * y, w, 2.5) == pytest.approx(4.0 * mh, rel=1e-12)
    assert vbm_bound(1.3, 4 * 4 * 1.8, 0.3, 0.2) == pytest.approx(4 * vbm_bound(1.3, 1.8, 0.3, 0.2))


def test_lambda_below_one():
    with pytest.raises(ParameterError):
        msm_max_mean([1.0], [1.0], 0.9)
    with pytest.raises(ParameterError):
        SensitivitySpec("msm", 0.5)
    with pytest.raises(ParameterError):
        SensitivitySpec("other", 1)


@pytest.fixture(scope="module")
def study():
    return sample_dgp(DgpConfig(n=500, seed=5))


@pytest.fixture(scope="module")
def reps(study):
    return ReplicateSet(study, Design(), reps=200, seed=3)


def test_bootstrap_deterministic(study, reps):
    again = ReplicateSet(study, Design(), reps=200, seed=3)
    np.testing.assert_array_equal(reps.values, again.values)
    spec = SensitivitySpec("msm", 1.5)
    assert reps.interval(spec) == again.interval(spec)


def test_bootstrap_worker_invariance(study):
    with pytest.warns(BootstrapWarning):
        a = ReplicateSet(study, Design(augment="ols"), reps=40, seed=8, workers=1)
    with pytest.warns(BootstrapWarning):
        b = ReplicateSet(study, Design(augment="ols"), reps=40, seed=8, workers=3)
    np.testing.assert_array_equal(a.values, b.values)
    for spec in (SensitivitySpec("vbm", 0.1), SensitivitySpec("msm", 2.0)):
        np.testing.assert_array_equal(a.bounds(spec)[0], b.bounds(spec)[0])


def test_null_gamma_is_ordinary_percentile_ci(reps):
    for spec in (SensitivitySpec("msm", 1.0), SensitivitySpec("vbm", 0.0)):
        iv = reps.interval(spec, 0.05)
        assert iv.ci_lower == pytest.approx(np.quantile(reps.values, 0.025), abs=1e-12)
        assert iv.ci_upper == pytest.approx(np.quantile(reps.values, 0.975), abs=1e-12)


def test_ci_contains_effect_interval(reps):
    for spec in (SensitivitySpec("msm", 1.3), SensitivitySpec("msm", 2.0), SensitivitySpec("vbm", 0.1)):
        iv = reps.interval(spec)
        assert iv.ci_lower <= iv.lower <= iv.point <= iv.upper <= iv.ci_upper


def test_interval_for_matches_direct(study):
    fd = fit_design(study, Design())
    iv = interval_for(fd, SensitivitySpec("msm", 2.0))
    direct = msm_extrema(fd.control_outcome, fd.control_weights, fd.treated_component, 2.0)
    assert iv == direct


def test_few_reps_warns(study):
    with pytest.warns(BootstrapWarning, match="below the recommended"):
        percentile_bootstrap_ci(study, Design(), SensitivitySpec("msm", 1.0), reps=20, seed=1)


def test_degenerate_resamples_are_redrawn():
    # 2 treated in 12 units: many resamples miss the treated arm entirely
    t = sample_dgp(DgpConfig(n=12, seed=0, beta_pi=0.0))
    z = np.zeros(12, int)
    z[:2] = 1
    t = ObservationTable(t.outcome, z, t.covariates)
    with pytest.warns(BootstrapWarning):
        rs = ReplicateSet(t, Design(), reps=50, seed=0)
    assert len(rs.replicates) == 50 and rs.redraws > 0


def test_robustness_not_significant(rng):
    n = 400
    x = rng.normal(size=n)
    z = (rng.random(n) < 0.5).astype(int)
    y = rng.normal(size=n)
    t = ObservationTable(y, z, x)
    rv = robustness_value(t, Design(), "msm", reps=200, seed=0)
    assert rv.status == "not_significant"


def test_robustness_increases_with_effect():
    base = DgpConfig(n=800, seed=2)
    vals = {}
    for tau in (1.0, 2.0):
        t = sample_dgp(DgpConfig(**{**base.__dict__, "tau0": tau}))
        rs = ReplicateSet(t, Design(), reps=200, seed=4)
        vals[tau] = (robustness_value(t, Design(), "msm", replicates=rs),
                     robustness_value(t, Design(), "vbm", replicates=rs))
    for k in range(2):
        assert vals[1.0][k].status == vals[2.0][k].status == "ok"
        assert vals[2.0][k].value > vals[1.0][k].value
        assert vals[1.0][k].monotone


def test_robustness_is_boundary(reps):
    rv = robustness_value(None, None, "msm", replicates=reps)
    assert rv.status == "ok"
    assert reps.interval(SensitivitySpec("msm", rv.value)).ci_lower > 0
    assert reps.interval(SensitivitySpec("msm", rv.value + 2e-3)).ci_lower <= 0
