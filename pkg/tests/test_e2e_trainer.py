import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridqa.e2e_trainer import JointConfig, TrainSchedule, eval_forward, joint_train, qa_frames, rollout_cap
from gridqa.grid_env import replay
from gridqa.nav_policy import NavTrainConfig, epoch_batches, rollout, train_navigation
from gridqa.qa_model import path_frames, predict

from test_nav_policy import tiny_model
from test_qa_model import small_qa


@given(st.integers(1, 60), st.floats(0, 1), st.floats(0.01, 1))
def test_schedule_is_monotone_and_bounded(total, p_max, ramp):
    s = TrainSchedule(total, p_max, ramp)
    ps = [s.p(e) for e in range(total + 5)]
    assert all(0.0 <= p <= p_max + 1e-15 for p in ps)
    assert all(a <= b for a, b in zip(ps, ps[1:]))
    assert ps[0] == 0.0 and ps[-1] == pytest.approx(p_max)


def test_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        TrainSchedule(p_max=1.5)
    with pytest.raises(ValueError):
        JointConfig(epochs=2, warm_start=3)


def test_rollout_cap():
    assert rollout_cap(0) == 20 and rollout_cap(10) == 40 and rollout_cap(500) == 120


def run(ds, epochs=3, warm=1, sched=None, seed=0):
    cfg = JointConfig(epochs=epochs, warm_start=warm, batch=8, seed=seed, schedule=sched)
    return joint_train(ds, cfg, nav=tiny_model(ds, seed), qa=small_qa(ds, seed))


def test_navigation_is_unaffected_by_qa_training(tiny_dataset):
    nav, _, log = run(tiny_dataset, sched=TrainSchedule(constant=0.5))
    ref, curve = train_navigation(tiny_dataset, NavTrainConfig(epochs=3, batch=8, seed=0), model=tiny_model(tiny_dataset))
    assert nav.store.equal(ref.store)
    assert [r["nav_loss"] for r in log.rows] == [c[1] for c in curve]


def test_warm_start_rows_have_no_qa(tiny_dataset):
    _, _, log = run(tiny_dataset, epochs=3, warm=2)
    assert math.isnan(log.rows[0]["qa_loss"]) and math.isnan(log.rows[1]["qa_loss"])
    assert not math.isnan(log.rows[2]["qa_loss"])


def test_rollout_fraction_follows_the_schedule(tiny_dataset):
    n = len(tiny_dataset.questions("train"))
    _, _, log = run(tiny_dataset, epochs=2, warm=0, sched=TrainSchedule(constant=1.0))
    assert [r["n_rollout"] for r in log.rows] == [n, n]
    _, _, log = run(tiny_dataset, epochs=2, warm=0, sched=TrainSchedule(constant=0.0))
    assert [r["n_rollout"] for r in log.rows] == [0, 0]


def test_joint_training_is_deterministic(tiny_dataset, tmp_path):
    a = run(tiny_dataset, seed=4)
    b = run(tiny_dataset, seed=4)
    assert a[0].store.equal(b[0].store) and a[1].store.equal(b[1].store)
    a[2].to_csv(tmp_path / "a.csv")
    b[2].to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,nav_loss,nav_acc,qa_loss,qa_acc,p_rollout,n_rollout"


def test_qa_frames_mix_paths_and_rollouts(tiny_dataset):
    nav = tiny_model(tiny_dataset)
    eps = epoch_batches(tiny_dataset.questions("train"), 0, NavTrainConfig(batch=4))[0]
    use = np.array([True, False] * (len(eps) // 2) + [False] * (len(eps) % 2))
    frames = qa_frames(nav, eps, use)
    for i, e in enumerate(eps):
        if use[i]:
            traj = rollout(nav, e.env, e.question, e.path.start, rollout_cap(len(e.path)))
            np.testing.assert_array_equal(frames[i], traj.frames(e.env))
        else:
            np.testing.assert_array_equal(frames[i], path_frames(e))


def test_eval_forward_replays_and_answers(tiny_dataset):
    nav, qa = tiny_model(tiny_dataset), small_qa(tiny_dataset)
    env, q = tiny_dataset.questions("test")[0]
    spawn = env.all_states()[0]
    traj, ans = eval_forward(nav, qa, env, q, spawn, 15)
    assert replay(env, spawn, traj.actions)[-1] == traj.final_state
    assert len(traj.steps) <= 15
    assert ans == predict(qa, traj.frames(env)[None], [q.tokens])[0]
