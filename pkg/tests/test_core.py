import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwdre.core import (
    BackwardPath,
    JumpKernel,
    ModelSpec,
    ObservationEvent,
    SpaceTimeCell,
    backward_paths,
    cone_slice,
    in_cone,
    observation_events,
    pattern_from_index,
    pattern_index,
    pattern_indices,
    reachable_set,
    shift,
    trivial_event,
)


@given(st.integers(1, 4), st.integers(0, 4), st.data())
def test_pattern_index_roundtrip(E, width, data):
    idx = data.draw(st.integers(1, E ** width))
    pat = pattern_from_index(idx, E, width)
    assert pattern_index(pat, E) == idx
    assert pattern_indices(np.array(pat)[None, :], E)[0] == idx - 1


def test_pattern_index_orders_first_site_most_significant():
    assert pattern_index((0, 0), 2) == 1
    assert pattern_index((0, 1), 2) == 2
    assert pattern_index((1, 0), 2) == 3
    with pytest.raises(ValueError):
        pattern_index((2,), 2)


def test_kernel_validation():
    with pytest.raises(ValueError):
        JumpKernel(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        JumpKernel(np.array([[-0.1, 1.1]]))
    with pytest.raises(ValueError):
        ModelSpec(1, 2, ((0,),), ((1,), (1,)), JumpKernel(np.eye(2)))
    with pytest.raises(ValueError):
        ModelSpec(1, 2, ((0,),), ((-1,), (1,)), JumpKernel(np.array([[1.0, 0.0], [1.0, 0.0]])))


def test_spec_json_roundtrip(m1):
    back = ModelSpec.from_json(m1.to_json())
    assert back.to_dict() == m1.to_dict()
    assert m1.K == 2
    np.testing.assert_allclose(m1.mean_jumps[:, 0], [-0.5, 0.5])


@given(st.integers(0, 6))
def test_reachable_set_of_simple_walk(t):
    spec = ModelSpec(1, 1, (), ((-1,), (1,)), JumpKernel(np.array([[0.5, 0.5]])))
    assert reachable_set(spec, t) == frozenset((x,) for x in range(-t, t + 1, 2))


def test_cone_slice_dilates_by_delta():
    spec = ModelSpec(1, 2, ((0,), (1,)), ((-1,), (1,)), JumpKernel(np.full((4, 2), 0.5)))
    assert cone_slice(spec, 1) == frozenset({(-1,), (0,), (1,), (2,)})
    assert cone_slice(spec, -1) == frozenset()
    assert in_cone(spec, SpaceTimeCell((2,), 1), 1)
    assert not in_cone(spec, SpaceTimeCell((2,), 1), 2)


@given(st.integers(0, 4))
def test_backward_paths_count_and_end_at_origin(k):
    spec = ModelSpec(1, 1, (), ((-1,), (0,), (1,)), JumpKernel(np.full((1, 3), 1 / 3)))
    paths = list(backward_paths(spec, k))
    assert len(paths) == 3 ** k
    assert len({p.sites for p in paths}) == 3 ** k
    assert all(p.sites[-1] == (0,) and p.depth == k for p in paths)


def test_backward_path_rejects_bad_increments(m1):
    with pytest.raises(ValueError):
        BackwardPath(((-2,), (0,)), m1.range)
    with pytest.raises(ValueError):
        BackwardPath(((0,), (1,)), m1.range)


def test_observation_events(m1):
    evs = list(observation_events(m1, 2))
    assert len(evs) == 1 + 2 * 2 + 4 * 4
    ev = ObservationEvent(BackwardPath.from_increments([(1,), (-1,)], m1), (2, 1))
    assert list(ev.observations()) == [((0,), -2, 2), ((1,), -1, 1)]
    assert trivial_event(m1).depth == 0
    with pytest.raises(ValueError):
        ObservationEvent(ev.path, (1,))


def test_shift():
    assert shift(SpaceTimeCell((1, 2), 3), SpaceTimeCell((-1, 0), 2)) == SpaceTimeCell((0, 2), 5)
