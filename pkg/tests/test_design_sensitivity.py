import math

import numpy as np
import pytest
from scipy.stats import norm

from dsense.design_sensitivity import (
    FavorableSituation,
    PowerInput,
    augmentation_gain,
    ds_msm,
    ds_vbm,
    msm_rhs,
    power_formula,
    power_inputs_from_bootstrap,
    trimming_gain,
)
from dsense.estimators import Design
from dsense.exceptions import ParameterError
from dsense.propensity import WeightMoments, moments_from_arrays
from dsense.sensitivity import SensitivitySpec, vbm_bound
from dsense.simulation import DgpConfig, sample_dgp


def wm(var_w, var_y, cor):
    return WeightMoments(var_w, var_y, cor, 0.0, 100)


def sit_from_moments(tau, var_w, var_y, cor):
    return FavorableSituation(tau, np.zeros(2), np.ones(2), moments=wm(var_w, var_y, cor))


def two_point(n=1000):
    y = np.r_[np.ones(n), np.zeros(n)]
    return y, np.ones(2 * n)


def test_vbm_unit_case():
    assert ds_vbm(sit_from_moments(1.0, 1, 1, 0)).value == pytest.approx(0.5)


def test_vbm_small_tau():
    assert ds_vbm(sit_from_moments(1e-8, 1, 1, 0)).value < 1e-15


def test_vbm_table_row():
    assert ds_vbm(sit_from_moments(1.0, 1.29, 1.82, 0.54)).value == pytest.approx(0.375, abs=0.005)


def test_vbm_zero_variance_flag():
    r = ds_vbm(FavorableSituation(1.0, [1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    assert "no-confounding-possible" in r.flags and 0.999 < r.value < 1


def test_nonpositive_tau():
    y, w = two_point(10)
    with pytest.raises(ParameterError):
        ds_msm(FavorableSituation(0.0, y, w))
    with pytest.raises(ParameterError):
        ds_vbm(FavorableSituation(-1.0, y, w))


def test_rhs_identity_and_two_point():
    y, w = two_point()
    sit = FavorableSituation(0.25, y, w)
    assert msm_rhs(sit, 1.0) == pytest.approx(0.5)
    # dense theta-grid oracle of the population sup for the two-point law
    lam = 2.0
    theta = np.arange(0, 1 + 1e-4, 1e-4)
    # share theta of the upper point's mass is scaled up (the rest of the mass down)
    top = np.minimum(theta, 0.5)
    num = lam * top * 1 + (0.5 - top) / lam * 1
    den = lam * theta + (1 - theta) / lam
    assert msm_rhs(sit, lam) == pytest.approx(np.max(num / den), abs=1e-6)
    assert msm_rhs(sit, lam) == pytest.approx(lam ** 2 / (lam ** 2 + 1))


def test_rhs_monotone_random(rng):
    for _ in range(100):
        m = rng.integers(2, 60)
        sit = FavorableSituation(1.0, rng.normal(size=m), rng.exponential(size=m))
        assert msm_rhs(sit, 3.0) >= msm_rhs(sit, 2.0)


def test_rhs_limit_is_max_outcome(rng):
    y, w = rng.normal(size=20), rng.exponential(size=20)
    w[np.argmax(y)] = 0.0
    sit = FavorableSituation(1.0, y, w)
    assert msm_rhs(sit, 1e6) == pytest.approx(np.max(y[w > 0]), abs=1e-6)


def test_msm_two_point_sqrt3():
    y, w = two_point()
    r = ds_msm(FavorableSituation(0.25, y, w))
    assert r.attained
    assert abs(r.value - math.sqrt(3)) < 1e-6
    assert abs(r.diagnostics["residual"]) <= 1e-6 * (1 + r.diagnostics["target"])


def test_msm_sample_bounded():
    y, w = two_point(5)
    r = ds_msm(FavorableSituation(0.6, y, w))
    assert r.value == math.inf and not r.attained


def test_msm_nondecreasing_in_tau(rng):
    y, w = rng.normal(size=500), rng.exponential(size=500)
    vals = [ds_msm(FavorableSituation(t, y, w)).value for t in np.linspace(0.05, 2.0, 30)]
    assert np.all(np.diff(vals) >= 0)


def test_vbm_matches_numeric_root(rng):
    for _ in range(20):
        var_w, var_y, cor, tau = rng.uniform(0.1, 5), rng.uniform(0.1, 5), rng.uniform(-0.95, 0.95), rng.uniform(0.05, 3)
        closed = ds_vbm(sit_from_moments(tau, var_w, var_y, cor)).value
        lo, hi = 0.0, 1.0 - 1e-15
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if vbm_bound(var_w, var_y, cor, mid) < tau:
                lo = mid
            else:
                hi = mid
        assert closed == pytest.approx(0.5 * (lo + hi), abs=1e-10)


def test_augmentation_gain_identity(rng):
    y, w = rng.normal(size=200), rng.exponential(size=200)
    m = moments_from_arrays(y, w)
    assert augmentation_gain(m, m).verdict == "does_not"


def test_augmentation_gain_table_row():
    g = augmentation_gain(wm(1.3, 1.84, 0.54), wm(1.3, 1.01, 0.0))
    assert g.improves
    assert g.rhs == pytest.approx((1 - 0.54 ** 2) * 1.84, rel=1e-12)
    assert g.rhs == pytest.approx(1.303, abs=1e-3)
    tau = 1.5
    before = ds_vbm(sit_from_moments(tau, 1.3, 1.84, 0.54)).value
    after = ds_vbm(sit_from_moments(tau, 1.3, 1.01, 0.0)).value
    assert before == pytest.approx(0.57, abs=0.02) and after == pytest.approx(0.63, abs=0.02)


def test_augmentation_gain_undefined():
    g = augmentation_gain(wm(1, 1, 0.5), wm(1, 1, 1.0))
    assert g.verdict == "undefined"


def test_trimming_gain_identity():
    m = wm(1.3, 2.0, 0.5)
    assert trimming_gain(m, m).verdict == "does_not"


def test_trimming_gain_caption_values():
    full = wm(1.3, 2.48, 0.5)
    trim = wm(0.9, 2.4, 0.6)
    g = trimming_gain(full, trim)
    assert g.rhs == pytest.approx((0.75 / 0.64) * (2.48 / 2.4), rel=1e-12)
    assert g.rhs == pytest.approx(1.211, abs=1e-3)
    assert g.improves
    assert set(g.factors) >= {"a_weight_variance", "b_correlation", "c_outcome_variance"}


def test_power_hand_value():
    p = power_formula(PowerInput(n=100, tau_w=1.0, xi=0.0, sigma_w=2.0, sigma_nu=2.0, alpha=0.05))
    assert p == pytest.approx(1 - norm.cdf(norm.ppf(0.95) - 5), rel=1e-12)
    assert p == pytest.approx(0.9996, abs=1e-4)


def test_power_boundary_independent_of_n():
    vals = [power_formula(PowerInput(n, 1.0, 1.0, 1.5, 0.8, 0.05)) for n in (10, 1000, 10 ** 6)]
    assert np.allclose(vals, 1 - norm.cdf(norm.ppf(0.95) * 0.8 / 1.5))


def test_power_phase_transition():
    assert power_formula(PowerInput(10 ** 7, 1.0, 1.1, 1, 1)) < 1e-6
    assert power_formula(PowerInput(10 ** 7, 1.0, 0.9, 1, 1)) > 1 - 1e-6


def test_power_input_validation():
    with pytest.raises(ParameterError):
        PowerInput(10, 1, 0, 0.0, 1)


def test_power_inputs_from_bootstrap():
    t = sample_dgp(DgpConfig(n=5000, seed=7))
    inp1 = power_inputs_from_bootstrap(t, Design(), SensitivitySpec("msm", 1.0), reps=200, seed=1)
    assert inp1.xi == 0.0
    assert inp1.sigma_nu == pytest.approx(inp1.sigma_w, rel=0.10)
    inp0 = power_inputs_from_bootstrap(t, Design(), SensitivitySpec("vbm", 0.0), reps=200, seed=1)
    assert inp0.xi == 0.0


# invariances ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_scale_and_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    y, w = rng.normal(size=300), rng.exponential(size=300)
    w = w / w.mean()
    tau = 0.4
    base = FavorableSituation(tau, y, w)
    lam, r2 = ds_msm(base).value, ds_vbm(base).value
    for c in (0.1, 3.0, 250.0):
        s = FavorableSituation(c * tau, c * y, w)
        assert ds_msm(s).value == pytest.approx(lam, rel=1e-9)
        assert ds_vbm(s).value == pytest.approx(r2, rel=1e-12)
    for c in (-5.0, 2.0, 1e3):
        s = FavorableSituation(tau, y + c, w)
        assert ds_msm(s).value == pytest.approx(lam, rel=1e-9)
        assert ds_vbm(s).value == pytest.approx(r2, rel=1e-9)


def test_vbm_increasing_in_tau():
    vals = [ds_vbm(sit_from_moments(t, 1.3, 1.8, 0.5)).value for t in np.linspace(0.01, 5, 50)]
    assert np.all(np.diff(vals) > 0)
