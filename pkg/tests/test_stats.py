import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from rwdre.oracle.iid import deviation_tail
from rwdre.stats import (
    FCLTTest,
    LDBRateEstimator,
    SpeedEstimator,
    StatsError,
    VarianceGrowthEstimator,
    covariance,
    fit_log_linear,
    paired_l1_drop,
    summarize,
)
from rwdre.walk import Ensemble, simulate

CRAMER_FAIR_02 = 0.6 * math.log(1.2) + 0.4 * math.log(0.8)


def gaussian_ensemble(n_runs, times, d=1, drift=0.0, scale=1.0, seed=0):
    gen = np.random.default_rng(seed)
    times = np.asarray(times)
    gaps = np.diff(np.concatenate([[0], times]))
    inc = gen.normal(size=(n_runs, len(times), d)) * np.sqrt(gaps)[None, :, None] * scale
    inc += drift * gaps[None, :, None]
    pos = np.cumsum(inc, axis=1)
    if times[0] == 0:
        pos[:, 0] = 0.0
    return Ensemble(times, pos, np.arange(n_runs))


def test_deterministic_walk_speed():
    times = np.array([0, 10, 20, 40])
    pos = np.repeat((times[:, None] * np.array([1, -2]))[None], 5, axis=0)
    est = SpeedEstimator().fit(Ensemble(times, pos, np.arange(5)))
    assert est.v_.tolist() == [1.0, -2.0]
    assert (est.stderr_ == 0).all()
    assert (est.l1_curve_ == 0).all()


def test_speed_needs_two_runs():
    with pytest.raises(StatsError):
        SpeedEstimator().fit(gaussian_ensemble(1, [0, 5]))


def test_speed_matches_iid_drift(m1, iid07):
    ens = simulate(m1, iid07, 4000, 200, seed=1, record_times=[0, 50, 200])
    est = SpeedEstimator().fit(ens)
    assert abs(est.v_[0] - 0.2) < 4 * est.stderr_[0]
    drop, se = paired_l1_drop(ens, 50, 200, est.v_)
    assert drop > 0 and drop > 3 * se


def test_fit_log_linear_recovers_exact_exponential():
    t = np.arange(10, 60, 10)
    fit = fit_log_linear(t, 0.5 * np.exp(-0.1 * t), 10 ** 6)
    assert fit["c"] == pytest.approx(0.1, rel=1e-9)
    assert math.exp(fit["log_C"]) == pytest.approx(0.5, rel=1e-9)


def test_fit_log_linear_refuses_degenerate_tails():
    with pytest.raises(StatsError):
        fit_log_linear([1, 2, 3], [0.0, 0.0, 0.0], 100)
    with pytest.raises(StatsError):
        fit_log_linear([1, 2, 3], [1.0, 1.0, 1.0], 100)
    with pytest.raises(StatsError):
        fit_log_linear([1, 2, 3, 4], [1.0, 0.5, 0.0, 0.0], 100)


def test_ldb_large_eps_errors(m1, iid07):
    ens = simulate(m1, iid07, 200, 50, seed=2, record_times=[0, 10, 20, 50])
    with pytest.raises(StatsError):
        LDBRateEstimator(eps=5.0, v=[0.2]).fit(ens)
    with pytest.raises(StatsError):
        LDBRateEstimator(eps=0.0).fit(ens)


def test_ldb_calibration_on_exact_tails(m1, iid05):
    times = np.arange(500, 4001, 500)
    tails = [deviation_tail(iid05, m1, int(t), 0.2, v=0.0) for t in times]
    fit = fit_log_linear(times, tails, 10 ** 12)
    assert abs(fit["c"] - CRAMER_FAIR_02) <= 0.10 * CRAMER_FAIR_02


def test_ldb_estimator_positive_rate(m1, iid05):
    ens = simulate(m1, iid05, 20_000, 200, seed=3, record_times=[0, 25, 50, 100, 150, 200])
    est = LDBRateEstimator(eps=0.2, v=[0.0]).fit(ens)
    assert est.significant_
    assert 0.5 * CRAMER_FAIR_02 < est.c_ < 1.5 * CRAMER_FAIR_02


@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_chebyshev_holds_on_any_sample(seed, eps):
    ens = gaussian_ensemble(50, [0, 3, 7, 12], drift=0.3, seed=seed)
    est = VarianceGrowthEstimator(theta=[1.0], v=[0.1], eps=eps).fit(ens)
    assert est.chebyshev_ok_


def test_variance_slope_for_diffusive_walk():
    ens = gaussian_ensemble(40_000, [0, 100, 200, 300, 400], scale=math.sqrt(2.0))
    est = VarianceGrowthEstimator().fit(ens)
    assert est.slope_ == pytest.approx(2.0, rel=0.05)


def test_variance_slope_zero_for_deterministic_walk():
    times = np.array([0, 1, 2, 3])
    pos = np.repeat(times[None, :, None], 10, axis=0)
    est = VarianceGrowthEstimator(v=[1.0]).fit(Ensemble(times, pos, np.arange(10)))
    assert est.slope_ == 0.0 and (est.variance_ == 0).all()


def test_variance_growth_needs_three_times():
    with pytest.raises(StatsError):
        VarianceGrowthEstimator().fit(gaussian_ensemble(10, [0, 1, 2]))
    with pytest.raises(StatsError):
        VarianceGrowthEstimator(theta=[0.0]).fit(gaussian_ensemble(10, [0, 1, 2, 3]))


def test_covariance_is_psd_and_consistent():
    ens = gaussian_ensemble(20_000, [0, 50], d=2, seed=4)
    S = covariance(ens)
    assert np.linalg.eigvalsh(S).min() >= 0
    assert np.allclose(S, np.eye(2), atol=0.05)


def test_fclt_requires_positive_sigma2():
    ens = gaussian_ensemble(100, [0, 25, 50, 100])
    with pytest.raises(StatsError):
        FCLTTest(v=[0.0], sigma2=0.0).fit(ens)
    with pytest.raises(StatsError):
        FCLTTest(v=[0.0], Sigma=[[0.0]]).fit(ens)


def test_fclt_pvalues_are_uniform_under_the_null():
    pvals = []
    for rep in range(40):
        ens = gaussian_ensemble(1000, [0, 25, 50, 100], scale=1.5, seed=100 + rep)
        f = FCLTTest(v=[0.0], sigma2=2.25, jitter=False).fit(ens)
        pvals.extend(r["p_value"] for r in f.ks_ if r["s"] == 1.0)
    assert sps.kstest(pvals, "uniform").pvalue > 1e-3


def test_fclt_detects_wrong_variance():
    ens = gaussian_ensemble(5000, [0, 25, 50, 100], scale=1.3, seed=5)
    assert not FCLTTest(v=[0.0], sigma2=1.0).fit(ens).passed_
    good = FCLTTest(v=[0.0], sigma2=1.69).fit(ens)
    assert good.passed_ and good.covariance_ok_


def test_fclt_whitened_matrix_form():
    ens = gaussian_ensemble(5000, [0, 250, 500, 1000], d=2, seed=6)
    f = FCLTTest(v=[0.0, 0.0], Sigma=np.eye(2)).fit(ens)
    assert f.passed_ and len(f.ks_) == 6


def test_fclt_on_lattice_walk(m1, iid05):
    ens = simulate(m1, iid05, 4000, 400, seed=7, record_times=[0, 100, 200, 400])
    f = FCLTTest(v=[0.0], sigma2=1.0).fit(ens)
    assert f.passed_ and f.covariance_ok_


def test_summarize_round_trip(m1, iid07):
    ens = simulate(m1, iid07, 300, 40, seed=8, record_times=[0, 10, 20, 30, 40])
    s = summarize(ens, eps=(0.2,), sigma2=0.96).to_dict()
    assert s["n_runs"] == 300 and s["horizon"] == 40
    assert len(s["ldb_points"]["0.2"]) == 4
    assert s["fclt"] is not None and "ks" in s["fclt"]
