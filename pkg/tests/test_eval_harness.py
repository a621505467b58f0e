import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridqa.calibration import CalibrationConfig
from gridqa.dataset_gen import color_question
from gridqa.eval_harness import (
    ExperimentConfig,
    OracleAgent,
    PolicyAgent,
    StillAgent,
    aggregate,
    compare_settings,
    curve_table,
    d_delta,
    evaluate,
    format_comparison,
    format_deltas,
    max_steps_for,
    spawn_jobs,
    sweep_lambda,
    sweep_markers,
)
from gridqa.grid_env import CELL_METERS, SceneObject, geodesic_distance
from gridqa.path_oracle import goal_set

from oracles import cell_bfs, corridor, make_env
from test_nav_policy import tiny_model
from test_qa_model import small_qa

TIERS = (2, 4, 6)


def test_d_delta_in_a_corridor():
    env = make_env(corridor(9), [SceneObject(0, "sofa", "red", (9, 1))])
    assert d_delta(env, (9, 1), (6, 1), (3, 1)) == -3
    assert d_delta(env, (9, 1), (3, 1), (6, 1)) == 3
    assert d_delta(env, (9, 1), (5, 1), (5, 1)) == 0


@given(st.integers(0, 200))
def test_max_steps(k):
    assert max_steps_for(k) == min(2 * k + 20, 120)


def test_geodesic_distance_matches_bfs(tiny_dataset):
    env = tiny_dataset.train[0][0]
    cells = env.free_cells()
    rng = np.random.default_rng(0)
    for _ in range(30):
        a, b = (cells[int(i)] for i in rng.integers(len(cells), size=2))
        assert geodesic_distance(env, a, b) == cell_bfs(env.free, a, b)


def test_spawns_are_shared_and_seeded(tiny_dataset):
    items = tiny_dataset.questions("test")
    a, ka, _ = spawn_jobs(items, TIERS, 3)
    b, kb, _ = spawn_jobs(items, TIERS, 3)
    c, _, _ = spawn_jobs(items, TIERS, 4)
    assert [j[2] for j in a] == [j[2] for j in b] and ka == kb
    assert [j[2] for j in a] != [j[2] for j in c]
    for env, q, spawn, cap in a[:12]:
        assert cap == max_steps_for(ka[a.index((env, q, spawn, cap))])


def test_still_agent_never_moves(tiny_dataset):
    rep = evaluate(StillAgent(), tiny_dataset.questions("test"), TIERS, 0)
    assert all(r["d_delta"] == 0 and r["steps"] == 0 and r["predicted"] is None for r in rep.records)
    for t in rep.tiers.values():
        assert t.mean_d_delta == 0.0 and t.stop_rate == 1.0 and math.isnan(t.qa_accuracy)


def test_oracle_reaches_the_goal_set_in_exactly_k(tiny_dataset):
    items = tiny_dataset.questions("test")
    rep = evaluate(OracleAgent(), items, TIERS, 0)
    envs = {env.env_id: env for env, _ in items}
    qs = {q.qid: q for _, q in items}
    for r in rep.records:
        assert r["steps"] == r["k"] and r["terminated_by"] == "stop"
        env, q = envs[r["env_id"]], qs[r["qid"]]
        stop = r["stop"]
        assert any(s.pos == (stop[0], stop[1]) and int(s.heading) == stop[2] for s in goal_set(env, q.target_object_id))


def test_aggregates_are_recomputed_from_records(tiny_dataset):
    nav, qa = tiny_model(tiny_dataset), small_qa(tiny_dataset)
    rep = evaluate(PolicyAgent(nav, qa), tiny_dataset.questions("test"), TIERS, 0)
    again = aggregate(rep.records, TIERS)
    for k in TIERS:
        rows = [r for r in rep.records if r["k"] == k]
        assert rep.tiers[k].n == len(rows) == again[k].n
        assert rep.tiers[k].mean_d_delta == pytest.approx(np.mean([r["d_start"] - r["d_end"] for r in rows]))
        assert rep.tiers[k].mean_d_delta_m == pytest.approx(rep.tiers[k].mean_d_delta * CELL_METERS)
        assert rep.tiers[k].qa_accuracy == pytest.approx(np.mean([r["predicted"] == r["gold"] for r in rows]))
        assert all(r["steps"] <= max_steps_for(k) for r in rows)


def test_parallel_evaluation_matches_serial(tiny_dataset):
    nav, qa = tiny_model(tiny_dataset), small_qa(tiny_dataset)
    items = tiny_dataset.questions("test")
    a = evaluate(PolicyAgent(nav, qa), items, TIERS, 1, n_jobs=1)
    b = evaluate(PolicyAgent(nav, qa), items, TIERS, 1, n_jobs=2)
    assert a.records == b.records


def test_per_env_models_are_used(tiny_dataset):
    items = tiny_dataset.questions("test")
    m0, m1 = tiny_model(tiny_dataset, 0), tiny_model(tiny_dataset, 1)
    envs = [env for env, _ in tiny_dataset.test]
    mixed = evaluate(PolicyAgent({envs[0].env_id: m0, envs[1].env_id: m1}), items, TIERS, 0)
    only0 = evaluate(PolicyAgent(m0), items, TIERS, 0)
    only1 = evaluate(PolicyAgent(m1), items, TIERS, 0)
    for r, a, b in zip(mixed.records, only0.records, only1.records):
        assert r == (a if r["env_id"] == envs[0].env_id else b)


@pytest.fixture(scope="module")
def protocol(tiny_dataset):
    cfg = ExperimentConfig(calib=CalibrationConfig(n_markers=2, min_distance=3, epochs=2, lr=1e-2), tiers=TIERS)
    pre = {s: (tiny_model(tiny_dataset, s), small_qa(tiny_dataset, s)) for s in (0, 1)}
    return cfg, pre


def test_comparison_rows_and_deltas(tiny_dataset, protocol):
    cfg, pre = protocol
    res = compare_settings(tiny_dataset, (0, 1), cfg, dict(pre))
    assert set(res["rows"]) == {"standard", "finetune", "distill"}
    for k in TIERS:
        d = res["deltas"]["distill-standard"][k]
        assert d == [a - b for a, b in zip(res["rows"]["distill"]["d_delta"][k], res["rows"]["standard"]["d_delta"][k])]
    text = format_comparison(res)
    assert len(text.splitlines()) == 2 + 3
    assert len(format_deltas(res).splitlines()) == 1 + 3


def test_sweeps_reduce_to_the_standard_setting(tiny_dataset, protocol):
    cfg, pre = protocol
    std = {s: evaluate(PolicyAgent(*pre[s]), tiny_dataset.questions("val"), TIERS, s) for s in (0, 1)}
    lam = sweep_lambda(tiny_dataset, (0, 1), cfg, (0.0, 1.0), dict(pre), "val")
    mk = sweep_markers(tiny_dataset, (0, 1), cfg, (1, 2), dict(pre), "val")
    for k in TIERS:
        ref = [std[s].tiers[k].mean_d_delta for s in (0, 1)]
        assert lam["curve"][1.0][k] == ref  # lam = 1 keeps the teacher
        assert mk["curve"][0][k] == ref
    header, rows = curve_table(mk)
    assert header == ["k", "0", "1", "2"] and [r[0] for r in rows] == list(TIERS)


def test_oracle_reaches_the_goal_set_in_the_fewest_actions_exhaustively():
    from conftest import small_env
    from gridqa.grid_env import Action, step
    from gridqa.path_oracle import EnvTooSmall, spawn_at

    moves = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
    for seed in range(6):
        env = small_env(seed)
        for o in env.objects:
            goal = goal_set(env, o.object_id)
            for k in range(1, 7):
                try:
                    spawn = spawn_at(env, o.object_id, k, np.random.default_rng(k))
                except EnvTooSmall:
                    continue
                env_q = (env, color_question(env, o, "q"))
                traj = OracleAgent().run([(env, env_q[1], spawn, max_steps_for(k))])[0]
                assert len(traj.steps) == k and traj.final_state in goal
                # no action sequence shorter than k reaches the goal set
                frontier = {spawn}
                for _ in range(k - 1):
                    frontier = {step(env, s, a) for s in frontier for a in moves}
                    assert not frontier & goal
