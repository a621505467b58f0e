from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridqa import tensor_nn as nn
from gridqa.nav_policy import nav_forward, make_batch, teacher_forced_accuracy
from gridqa.calibration import (
    CalibrationConfig,
    PlacementError,
    calibrate_distill,
    calibrate_env,
    calibrate_finetune,
    distill_terms,
    gen_marker_questions,
    marker_episodes,
    place_markers,
)
from gridqa.grid_env import MARKER_TYPES, geodesic_distance
from gridqa.path_oracle import goal_set

from conftest import small_env
from oracles import cell_bfs
from test_nav_policy import tiny_model

QUICK = CalibrationConfig(epochs=3, lr=1e-2, batch=3)


def same_values(a, b):
    return all(np.array_equal(a.store[k], b.store[k]) for k in a.store.names())


@settings(max_examples=100)
@given(st.integers(0, 400), st.integers(1, 5), st.integers(0, 3))
def test_placement_respects_spacing_and_ids(seed, n, dmin):
    env = small_env(seed)
    cfg = CalibrationConfig(n_markers=n, min_distance=dmin)
    try:
        marked = place_markers(env, cfg, np.random.default_rng(seed))
    except PlacementError:
        return
    markers = [o for o in marked.objects if o.is_marker]
    assert len(markers) == n
    assert marked.objects[: len(env.objects)] == env.objects
    assert len({o.type_token for o in markers}) == n and all(o.type_token in MARKER_TYPES for o in markers)
    assert len({o.position for o in marked.objects}) == len(marked.objects)
    ids = [o.object_id for o in marked.objects]
    assert len(set(ids)) == len(ids)
    for i, a in enumerate(markers):
        assert marked.free[a.position[1], a.position[0]]
        for b in markers[i + 1 :]:
            d = cell_bfs(env.free, a.position, b.position)
            assert d is not None and d >= dmin
            assert geodesic_distance(env, a.position, b.position) == d


def test_impossible_spacing_raises():
    env = small_env(0)
    with pytest.raises(PlacementError):
        place_markers(env, CalibrationConfig(n_markers=5, min_distance=99, max_tries=3), np.random.default_rng(0))


@pytest.mark.parametrize("n", [0, 6])
def test_marker_count_is_bounded(n):
    with pytest.raises(ValueError):
        CalibrationConfig(n_markers=n)


def test_marker_questions_are_color_questions_with_valid_paths():
    env = place_markers(small_env(3), CalibrationConfig(), np.random.default_rng(0))
    data = gen_marker_questions(env, np.random.default_rng(1))
    assert len(data) == 5
    for q, path in data:
        obj = env.object_by_id(q.target_object_id)
        assert obj.is_marker and q.qtype == "color" and q.answer_token == obj.color_token
        assert path.end in goal_set(env, obj.object_id)
        assert len(path) >= 1


@pytest.fixture(scope="module")
def marked(tiny_dataset):
    env = tiny_dataset.test[0][0]
    cfg = CalibrationConfig(n_markers=3, min_distance=3)
    m = place_markers(env, cfg, np.random.default_rng(0))
    return marker_episodes(m, gen_marker_questions(m, np.random.default_rng(0)))


def test_distillation_term_is_zero_at_initialisation(tiny_dataset, marked):
    teacher = tiny_model(tiny_dataset)
    student = teacher.clone()
    student.store.zero_grad()
    _, _, dist = distill_terms(student, teacher, marked, 1.0)
    assert dist == 0.0
    # lam = 1 at init: the blended gradient vanishes
    assert student.store.grad_norm() < 1e-12


def test_lambda_one_leaves_the_student_at_the_teacher(tiny_dataset, marked):
    teacher = tiny_model(tiny_dataset)
    out = calibrate_distill(teacher, marked, replace(QUICK, lam=1.0))
    assert same_values(out, teacher)


def test_lambda_zero_is_finetuning_and_the_teacher_is_untouched(tiny_dataset, marked):
    teacher = tiny_model(tiny_dataset)
    before = teacher.clone()
    a = calibrate_distill(teacher, marked, replace(QUICK, lam=0.0))
    b = calibrate_finetune(teacher, marked, QUICK)
    assert a.store.equal(b.store)
    assert teacher.store.equal(before.store)
    assert not same_values(a, teacher)


def test_blended_gradient_matches_finite_differences(tiny_dataset, marked):
    teacher = tiny_model(tiny_dataset)
    student = teacher.clone()
    rng = np.random.default_rng(0)
    for k in student.store.names():
        student.store[k][...] += 0.05 * rng.normal(size=student.store[k].shape)

    def f():
        return distill_terms(student, teacher, marked, 0.3)[0]

    assert nn.grad_check(f, student.store, h=1e-5) < 1e-6


def test_calibrate_env_is_deterministic(tiny_dataset):
    teacher = tiny_model(tiny_dataset)
    env = tiny_dataset.test[0][0]
    cfg = replace(QUICK, n_markers=2, min_distance=3)
    a, ma, _ = calibrate_env(teacher, env, cfg)
    b, mb, _ = calibrate_env(teacher, env, cfg)
    assert a.store.equal(b.store) and ma.objects == mb.objects
    with pytest.raises(ValueError):
        calibrate_env(teacher, env, cfg, method="bogus")


def test_zero_epochs_returns_the_pretrained_weights(tiny_dataset, marked):
    teacher = tiny_model(tiny_dataset)
    assert same_values(calibrate_distill(teacher, marked, replace(QUICK, epochs=0)), teacher)


def test_teacher_actions_are_unchanged_by_calibration(tiny_dataset, marked):
    teacher = tiny_model(tiny_dataset)
    batch = make_batch(teacher, marked)
    before = nav_forward(teacher, batch).logits.argmax(-1)
    calibrate_distill(teacher, marked, replace(QUICK, lam=0.5))
    np.testing.assert_array_equal(nav_forward(teacher, batch).logits.argmax(-1), before)


def test_finetuning_can_overfit_the_marker_paths(default_dataset):
    from gridqa.nav_policy import NavConfig, init_nav_model

    env = default_dataset.test[0][0]
    model = init_nav_model(NavConfig(len(default_dataset.word_vocab), env.feature_dim), default_dataset.word_vocab, 0)
    cfg = CalibrationConfig(epochs=150, lr=3e-3)
    adapted, _, episodes = calibrate_env(model, env, replace(cfg, lam=0.0), "finetune")
    assert len(episodes) == 5
    assert teacher_forced_accuracy(adapted, episodes) >= 0.95
