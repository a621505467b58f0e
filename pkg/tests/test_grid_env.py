import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridqa.grid_env import (
    CELL_METERS,
    Action,
    AgentState,
    EnvError,
    Heading,
    InvalidState,
    SceneObject,
    Unreachable,
    check_invariants,
    geodesic_distance,
    observe,
    replay,
    step,
    visible_objects,
)

from conftest import small_env
from oracles import brute_step, brute_window, cell_bfs, corridor, make_env

seeds = st.integers(0, 10_000)


def test_cell_size_is_half_a_meter():
    # one forward action covers 0.5 m in the source task
    assert CELL_METERS == 0.5


@given(seeds)
def test_generated_env_invariants(seed):
    env = small_env(seed)
    check_invariants(env)
    assert not env.free[0].any() and not env.free[-1].any()
    for o in env.objects:
        assert env.cell(*o.position).occupant == o.object_id


@given(seeds, st.data())
def test_step_matches_reference_dynamics(seed, data):
    env = small_env(seed)
    states = env.all_states()
    s = states[data.draw(st.integers(0, len(states) - 1))]
    for a in Action:
        got = step(env, s, a)
        assert (got.x, got.y, int(got.heading)) == brute_step(env.free, s.x, s.y, int(s.heading), int(a))


def test_turn_inverse_and_four_turns_exhaustive():
    for seed in range(5):
        env = small_env(seed)
        for s in env.all_states():
            assert step(env, step(env, s, Action.TURN_LEFT), Action.TURN_RIGHT) == s
            assert step(env, step(env, s, Action.TURN_RIGHT), Action.TURN_LEFT) == s
            assert replay(env, s, [Action.TURN_LEFT] * 4)[-1] == s
            assert replay(env, s, [Action.TURN_RIGHT] * 4)[-1] == s
            assert step(env, s, Action.STOP) == s


@given(seeds, st.lists(st.sampled_from(list(Action)), max_size=30), st.data())
def test_replay_is_iterated_step(seed, actions, data):
    env = small_env(seed)
    states = env.all_states()
    s = states[data.draw(st.integers(0, len(states) - 1))]
    traj = replay(env, s, actions)
    assert len(traj) == len(actions) + 1
    cur = s
    for a, nxt in zip(actions, traj[1:]):
        cur = step(env, cur, a)
        assert cur == nxt
        assert env.is_free(cur.x, cur.y)


def test_observation_matches_brute_force_exhaustive():
    for seed in range(4):
        env = small_env(seed)
        for s in env.all_states():
            obs = observe(env, s)
            terrain, objs = brute_window(env, s.x, s.y, int(s.heading))
            np.testing.assert_array_equal(obs.terrain, terrain)
            np.testing.assert_array_equal(obs.objects, objs)
            assert visible_objects(env, s) == {int(o) for o in objs[objs >= 0]}


def test_observation_feature_encoding():
    env = small_env(3)
    s = env.all_states()[0]
    obs = observe(env, s)
    assert obs.features.dtype == np.uint8
    assert obs.features.shape == (env.feature_dim,)
    per = obs.features.reshape(env.view_depth, env.view_width, -1)
    # exactly one terrain code per slot, type/color one-hots only where an object is seen
    assert (per[..., :3].sum(-1) == 1).all()
    has_obj = obs.objects >= 0
    n_types = len(env.type_vocab)
    assert (per[..., 3 : 3 + n_types].sum(-1) == has_obj).all()
    assert (per[..., 3 + n_types :].sum(-1) == has_obj).all()


def test_agent_row_and_centre_column():
    free = corridor(9)
    env = make_env(free, [SceneObject(0, "sofa", "red", (6, 1))])
    obs = observe(env, AgentState(2, 1, Heading.E))
    assert obs.terrain[0, 2] == 1  # the agent's own cell
    assert obs.objects[4, 2] == 0  # four cells straight ahead
    # column 0 starts outside the grid, which reads as wall
    assert obs.terrain[0, 0] == 0 and (obs.terrain[1:, 0] == 2).all()
    # side columns: the wall next to the agent blocks the rest of that column
    assert obs.terrain[0, 1] == 0 and (obs.terrain[1:, 1] == 2).all()


def test_wall_occludes_objects_behind_it():
    free = corridor(9)
    free[1, 5] = False
    env = make_env(free, [SceneObject(0, "sofa", "red", (7, 1))])
    assert visible_objects(env, AgentState(3, 1, Heading.E)) == set()
    assert visible_objects(env, AgentState(6, 1, Heading.E)) == {0}


def test_forward_into_wall_is_noop():
    env = make_env(corridor(5))
    s = AgentState(1, 1, Heading.W)
    assert step(env, s, Action.FORWARD) == s


def test_invalid_state_rejected():
    env = make_env(corridor(5))
    with pytest.raises(InvalidState):
        step(env, AgentState(0, 0, Heading.N), Action.FORWARD)
    with pytest.raises(InvalidState):
        observe(env, AgentState(0, 1, Heading.N))


def test_geodesic_distance_against_bfs_and_corridor():
    env = make_env(corridor(9))
    assert geodesic_distance(env, (2, 1), (7, 1)) == 5
    for seed in range(3):
        env = small_env(seed)
        cells = env.free_cells()
        for a in cells[::7]:
            for b in cells[::5]:
                assert geodesic_distance(env, a, b) == cell_bfs(env.free, a, b)


def test_unreachable_and_invariant_failures():
    free = corridor(7)
    free[1, 4] = False
    with pytest.raises(EnvError):
        check_invariants(make_env(free))
    env = make_env(free)
    with pytest.raises(Unreachable):
        geodesic_distance(env, (1, 1), (6, 1))
    with pytest.raises(EnvError):
        check_invariants(make_env(corridor(5), [SceneObject(0, "sofa", "red", (0, 0))]))
    with pytest.raises(EnvError):
        check_invariants(make_env(corridor(5), [SceneObject(0, "mailbox", "red", (2, 1), False)]))
