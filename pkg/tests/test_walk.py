import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwdre import rng
from rwdre.core import JumpKernel, ModelSpec
from rwdre.env import EnvRealization
from rwdre.walk import (
    ellipticity_report,
    read_trajectories_csv,
    run_quenched,
    sample_history,
    simulate,
    step,
    trajectories_csv,
)


@pytest.mark.parametrize("law_name", ["iid07", "m2", "sites"])
def test_ensemble_matches_quenched_runs(request, m1, law_name):
    law = request.getfixturevalue(law_name)
    ens = simulate(m1, law, 6, 25, seed=13, keep_lep=True)
    for r, traj in enumerate(ens.trajectories()):
        key = rng.derive(13, r)
        ref = run_quenched(EnvRealization(law, key), m1, 25, key)
        assert np.array_equal(traj.positions, ref.positions)
        assert np.array_equal(traj.patterns, ref.patterns)


@given(st.integers(1, 7))
def test_batching_does_not_change_runs(chunk):
    spec = ModelSpec(1, 2, ((0,),), ((-1,), (1,)), JumpKernel(np.array([[0.75, 0.25], [0.25, 0.75]])))
    from rwdre.env import TorusMarkov

    law = TorusMarkov.flip(3, 0.3)
    full = simulate(spec, law, 9, 12, seed=2)
    parts = simulate(spec, law, 9, 12, seed=2, chunk=chunk)
    assert np.array_equal(full.positions, parts.positions)
    tail = simulate(spec, law, 4, 12, seed=2, first_run=5)
    assert np.array_equal(full.positions[5:], tail.positions)


def test_deterministic_kernel_moves_straight(iid07):
    spec = ModelSpec(1, 2, ((0,),), ((1,),), JumpKernel(np.array([[1.0], [1.0]])))
    ens = simulate(spec, iid07, 5, 30, seed=0)
    assert np.all(ens.at(30) == 30)


def test_step_tie_rule(m1):
    assert step(m1.kernel, 1, 0.75, m1) == (1,)
    assert step(m1.kernel, 1, 0.7499, m1) == (-1,)
    with pytest.raises(ValueError):
        step(m1.kernel, 3, 0.5)


def test_ellipticity_report(m1, m2):
    from rwdre.env import capability

    rep = ellipticity_report(m1)
    assert rep.eps_b == 0.25 and rep.eps_bprime == 0.25 and rep.argmax_z == (-1,)
    rep = ellipticity_report(m1, capability(m2, m1), depth=3)
    assert 0 < rep.eps_a < 0.5


def test_csv_roundtrip(m1, m2):
    ens = simulate(m1, m2, 3, 7, seed=1, keep_lep=True)
    text = trajectories_csv(ens)
    assert text.endswith("\n") and "\r" not in text
    back = read_trajectories_csv(io.StringIO(text))
    assert np.array_equal(back.positions, ens.positions)
    assert np.array_equal(back.patterns, ens.patterns)
    assert trajectories_csv(back) == text


def test_sample_history_is_consistent(m1, m2):
    """The recorded event is exactly what the returned realisation shows."""
    from rwdre.walk import read_pattern

    for s in range(20):
        ev, real = sample_history(m2, m1, 3, s)
        for site, t, pat in ev.observations():
            assert read_pattern(real, m1, site, t) == pat
        assert ev.path.sites[-1] == (0,)
