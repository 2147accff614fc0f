import math

import numpy as np
import pytest
from scipy import stats as sps

from rwdre.core import JumpKernel, ModelSpec, observation_events
from rwdre.coupling import CoinParams, coin_walk
from rwdre.env import TorusMarkov
from rwdre.mixing import (
    MixingEstimate,
    cesaro_nu,
    estimate_phi_hat,
    estimate_phi_tilde,
    exact_phi_tilde,
    phi_tilde_by_event,
    phi_tilde_upper_bound,
    verify_md_bound,
)
from rwdre.oracle import bruteforce as bf
from rwdre.oracle.chain import build_joint_chain, lep_window_law
from rwdre.walk import ellipticity_report, simulate


@pytest.fixture(scope="module")
def lazy():
    return ModelSpec(1, 2, ((0,),), ((0,),), JumpKernel(np.array([[1.0], [1.0]])))


def test_iid_coefficients_vanish(m1, iid07):
    assert estimate_phi_tilde(iid07, m1, 3).value == 0.0
    assert estimate_phi_hat(iid07, m1, 2).value == 0.0
    assert phi_tilde_upper_bound(iid07, m1, 1).value == 0.0


@pytest.mark.parametrize("t", [1, 2, 3, 5])
def test_single_site_torus(lazy, t):
    law = TorusMarkov.flip(1, 0.2)
    exact = estimate_phi_tilde(law, lazy, t, k_max=2)
    assert exact.value == pytest.approx(0.6 ** (t + 1) / 2, abs=1e-12)
    assert exact.value <= phi_tilde_upper_bound(law, lazy, t).value


def test_phi_tilde_matches_bruteforce(m1, m2):
    assert estimate_phi_tilde(m2, m1, 2, k_max=3, h=2).value == pytest.approx(bf.phi_tilde(m2, m1, 2, 3, 2), abs=1e-10)


def test_whole_cone_dominates_finite_windows(m1, m2):
    for t in (1, 2):
        whole = exact_phi_tilde(m2, m1, t)
        assert estimate_phi_tilde(m2, m1, t, k_max=3, h=2).value <= whole + 1e-12
        assert phi_tilde_by_event(m2, m1, t)[0][1] == pytest.approx(whole)


def test_m2_reference_values(m1, m2):
    assert [round(exact_phi_tilde(m2, m1, n), 6) for n in (1, 2, 3)] == [0.08, 0.032, 0.0128]


@pytest.mark.parametrize("t", [1, 2])
def test_phi_hat_matches_bruteforce(m1, m2, t):
    assert estimate_phi_hat(m2, m1, t, h=2, k_max=2).value == pytest.approx(bf.phi_hat(m2, m1, t, 2, 2), abs=1e-10)


def test_phi_hat_nonincreasing(m1, m2):
    vals = [estimate_phi_hat(m2, m1, t, h=3, k_max=2).value for t in range(0, 12)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] < vals[0]


def test_same_history_gives_zero(m1, m2):
    ev = next(e for e in observation_events(m1, 2) if e.depth == 2)
    assert estimate_phi_hat(m2, m1, 1, histories=[ev, ev]).value == 0.0
    assert estimate_phi_hat(m2, m1, 1, h=0).value == 0.0


def test_site_chain_exact_below_bound(m1, sites):
    for t in (1, 2, 3):
        exact = estimate_phi_tilde(sites, m1, t, k_max=2).value
        assert exact <= phi_tilde_upper_bound(sites, m1, t).value
        assert estimate_phi_tilde(sites, m1, t, k_max=2, h=2).value <= exact + 1e-12


def test_mc_lower_bound_is_below_exact(m1, m2, sites):
    for law in (m2, sites):
        mc = estimate_phi_tilde(law, m1, 1, k_max=1, h=1, method="mc", budget=1, block_size=4000)
        assert mc.mode == "mc_lower_bound" and mc.budget_exhausted
        assert mc.value <= estimate_phi_tilde(law, m1, 1, k_max=1, h=1).value
        assert mc.value > 0
    hat = estimate_phi_hat(m2, m1, 1, h=1, k_max=1, method="mc", budget=1, block_size=2000)
    assert hat.value <= estimate_phi_hat(m2, m1, 1, h=1, k_max=1).value


def test_mc_is_monotone_in_family(m1, m2):
    kw = dict(method="mc", block_size=600, seed=5)
    a = estimate_phi_tilde(m2, m1, 1, k_max=1, h=1, budget=1, **kw).value
    b = estimate_phi_tilde(m2, m1, 1, k_max=2, h=1, budget=1, **kw).value
    c = estimate_phi_tilde(m2, m1, 1, k_max=2, h=2, budget=1, **kw).value
    d = estimate_phi_tilde(m2, m1, 1, k_max=2, h=2, budget=2, **kw).value
    assert a <= b <= c <= d


def test_mixing_estimate_validation():
    with pytest.raises(ValueError):
        MixingEstimate("phi_tilde", 1, 1.5, "exact")
    with pytest.raises(ValueError):
        MixingEstimate("phi_bar", 1, 0.5, "exact")
    with pytest.raises(ValueError):
        MixingEstimate("phi_hat", 1, 0.5, "guess")
    d = MixingEstimate("phi_hat", 2, 0.25, "exact").to_dict()
    assert d["value"] == 0.25 and d["mode"] == "exact"


def test_estimator_argument_checks(m1, m2):
    with pytest.raises(ValueError):
        estimate_phi_tilde(m2, m1, 0)
    with pytest.raises(ValueError):
        estimate_phi_hat(m2, m1, -1)
    with pytest.raises(ValueError):
        estimate_phi_hat(m2, m1, 1, method="fast")


def test_cesaro_k1_iid_is_product_law(m1, iid07):
    nu = cesaro_nu(iid07, m1, h=1, k=1, n_runs=20_000, seed=3)
    expected = (iid07.p[:, None] * m1.kernel.rows).reshape(-1)
    counts = np.round(nu.probabilities * 20_000)
    assert sps.chisquare(counts, expected * counts.sum()).pvalue > 1e-3


def test_cesaro_m2_matches_exact_average(m1, m2):
    k, h, N = 20, 1, 10_000
    nu = cesaro_nu(m2, m1, h=h, k=k, n_runs=N, seed=4)
    chain = build_joint_chain(m2, m1)
    mu = m2.stationary.copy()
    exact = np.zeros_like(nu.probabilities)
    for _ in range(k):
        mu = mu @ chain.transition
        exact += lep_window_law(chain, mu, 0, h) / k
    assert (np.abs(nu.probabilities - exact) <= 4 * nu.stderr + 1e-12).all()
    limit = cesaro_nu(m2, m1, h=h, method="exact")
    assert limit.probabilities.sum() == pytest.approx(1.0)
    assert limit.mean_jump[0] == pytest.approx(0.0, abs=1e-12)


def test_verify_md_bound_iid(m1, iid07):
    coin = CoinParams(0.25, (1,), 2 * math.log(4))
    rep = verify_md_bound(iid07, m1, coin, (4, 16, 64))
    assert rep.ok and rep.violations == []
    assert all(r.phi_hat == 0.0 for r in rep.rows)
    with pytest.raises(ValueError):
        verify_md_bound(iid07, m1, coin, (4,), phi_tilde="guess")


def test_degenerate_kernel_has_unit_coin(m2):
    spec = ModelSpec(1, 2, ((0,),), ((1,),), JumpKernel(np.array([[1.0], [1.0]])))
    rep = ellipticity_report(spec)
    assert rep.eps_b == 1.0
    coin = CoinParams.for_condition_b(spec)
    a = coin_walk(spec, m2, 5, 8, seed=0, coin=coin)
    b = simulate(spec, m2, 5, 8, seed=0)
    assert (a.positions[:, -1, 0] == 8).all() and (b.positions[:, -1, 0] == 8).all()
