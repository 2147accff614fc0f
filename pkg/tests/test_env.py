import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rwdre.core import BackwardPath, ObservationEvent, SpaceTimeCell, observation_events
from rwdre.env import (
    EnvRealization,
    IIDField,
    InconsistentHistory,
    SiteChain,
    TorusMarkov,
    conditional_observation_law,
    dobrushin,
    filter_event,
    law_from_dict,
    sample_window,
    site_chain_time0_laws,
)
from rwdre.oracle import bruteforce

def test_iid_symbol_frequencies(iid07):
    real = EnvRealization(iid07, 3)
    syms = [real.read(SpaceTimeCell((x,), t)) for x in range(100) for t in range(100)]
    assert abs(np.mean(syms) - 0.7) < 3 * np.sqrt(0.21 / len(syms))


def test_reads_are_cached_and_order_free(sites):
    cells = [SpaceTimeCell((x,), t) for t in range(5) for x in range(-3, 4)]
    a = EnvRealization(sites, 11)
    b = EnvRealization(sites, 11)
    fwd = [a.read(c) for c in cells]
    back = [b.read(c) for c in reversed(cells)][::-1]
    assert fwd == back == [a.read(c) for c in cells]


def test_sample_window_agrees_with_read(m2):
    cells = [SpaceTimeCell((x,), t) for t in range(3) for x in range(3)]
    w = sample_window(m2, cells, 5)
    real = EnvRealization(m2, 5)
    assert all(w[c] == real.read(c) for c in cells)


def test_site_chain_stationary_and_transition_frequencies(sites):
    real = EnvRealization(sites, 9)
    path = [real.read(SpaceTimeCell((0,), t)) for t in range(20_000)]
    flips = np.mean(np.diff(path) != 0)
    assert abs(flips - 0.3) < 3 * np.sqrt(0.21 / 20_000)


def test_flip_torus_environment_law_is_uniform(m2):
    np.testing.assert_allclose(m2.stationary, np.full(8, 1 / 8), atol=1e-12)


def test_torus_simulated_state_frequencies(m2):
    counts = np.zeros(8)
    real = EnvRealization(m2, 4)
    for t in range(40_000):
        counts[real.torus_state(t)] += 1
    # successive states are correlated; a loose check with the mixing time ~ 3
    assert np.abs(counts / counts.sum() - m2.stationary).max() < 0.01


def test_translation_invariance_check():
    P = np.zeros((4, 4))
    P[:, 1] = 1.0
    with pytest.raises(ValueError):
        TorusMarkov(L=2, d=1, alphabet_size=2, transition=P)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_filter_matches_bruteforce_posterior(m1, m2, k):
    worst = 0.0
    for ev in observation_events(m1, k):
        if ev.depth != k:
            continue
        try:
            mu = filter_event(m2, m1, ev).posterior
        except InconsistentHistory:
            with pytest.raises(ValueError):
                bruteforce.posterior(m2, m1, ev)
            continue
        worst = max(worst, np.abs(mu - bruteforce.posterior(m2, m1, ev)).max())
    assert worst < 1e-12


def test_observation_law_of_iid(iid07, m1):
    from rwdre.env import capability

    np.testing.assert_allclose(conditional_observation_law(capability(iid07, m1)), [0.3, 0.7])


def test_site_chain_time0_laws_last_observation(m1, sites):
    ev = ObservationEvent(BackwardPath.from_increments([(1,), (1,)], m1), (2, 1))
    laws = site_chain_time0_laws(sites, m1, ev)
    # site -2 saw symbol 1 at time -2; site -1 saw symbol 0 at time -1
    np.testing.assert_allclose(laws[(-2,)], np.linalg.matrix_power(sites.Q, 2)[1])
    np.testing.assert_allclose(laws[(-1,)], sites.Q[0])


def test_site_chain_rejects_impossible_history(m1):
    frozen = SiteChain(np.eye(2), np.array([0.5, 0.5]))
    ev = ObservationEvent(BackwardPath.from_increments([(1,), (-1,)], m1), (1, 1))
    site_chain_time0_laws(frozen, m1, ev)
    from rwdre.core import JumpKernel, ModelSpec
    lazy = ModelSpec(1, 2, ((0,),), ((0,), (1,)), JumpKernel(np.full((2, 2), 0.5)))
    bad = ObservationEvent(BackwardPath.from_increments([(0,), (0,)], lazy), (1, 2))
    with pytest.raises(InconsistentHistory):
        site_chain_time0_laws(frozen, lazy, bad)


@given(st.floats(0.01, 0.99))
def test_dobrushin_of_flip(q):
    assert dobrushin(np.array([[1 - q, q], [q, 1 - q]])) == pytest.approx(abs(1 - 2 * q))


def test_law_documents_roundtrip(m2, sites, iid07):
    for law in (m2, sites, iid07):
        back = law_from_dict(law.to_dict())
        assert back.to_dict() == law.to_dict()
