import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rwdre import rng


@given(st.integers(0, 2 ** 63 - 1), st.lists(st.integers(-10 ** 9, 10 ** 9), max_size=4))
def test_uniforms_are_pure_and_in_unit_interval(key, counters):
    a = rng.uniforms(np.uint64(key), *counters)
    b = rng.uniforms(np.uint64(key), *counters)
    assert np.array_equal(a, b)
    assert np.all((a > 0) | (a == 0)) and np.all(a < 1)


def test_vectorised_matches_scalar():
    keys = rng.run_keys(7, np.arange(50))
    vec = rng.uniforms(keys, 3, np.arange(50))
    scal = [rng.uniforms(np.uint64(int(k)), 3, i)[0] for i, k in enumerate(keys)]
    assert np.array_equal(vec, scal)


def test_uniform_distribution():
    u = rng.uniforms(np.uint64(rng.derive(1, 2)), np.arange(100_000))
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_derive_separates_streams():
    seeds = {rng.derive(0, i) for i in range(10_000)}
    assert len(seeds) == 10_000
    assert rng.derive(5, rng.ENV) != rng.derive(5, rng.WALK)


def test_inverse_cdf_strict_exceedance():
    cum = np.array([0.25, 1.0])
    assert rng.inverse_cdf(cum, np.array([0.25]))[0] == 1
    assert rng.inverse_cdf(cum, np.array([0.2499]))[0] == 0
