import numpy as np
import pytest

from gridqa import tensor_nn as nn
from gridqa.nav_policy import Episode
from gridqa.path_oracle import goal_set, shortest_action_path
from gridqa.qa_model import (
    N_FRAMES,
    QAConfig,
    QATrainConfig,
    answer,
    answer_logits,
    bag_of_words,
    blindfold_answer,
    init_qa_model,
    path_frames,
    qa_terms,
    train_blindfold,
    train_qa,
)


def small_qa(ds, seed=0):
    env = ds.train[0][0]
    cfg = QAConfig(len(ds.word_vocab), env.feature_dim, len(ds.answer_vocab), word_dim=4, q_hidden=4, frame_dim=4)
    return init_qa_model(cfg, ds.word_vocab, ds.answer_vocab, seed)


def test_full_model_gradient(tiny_dataset):
    model = small_qa(tiny_dataset)
    rng = np.random.default_rng(0)
    items = tiny_dataset.questions("train")[:3]
    frames = rng.integers(0, 2, size=(3, N_FRAMES, items[0][0].feature_dim)).astype(float)
    toks = [q.tokens for _, q in items]
    ans = [q.answer_token for _, q in items]

    def f():
        loss, _, backward = qa_terms(model, frames, toks, ans)
        backward()
        return loss

    assert nn.grad_check(f, model.store, h=1e-5) < 1e-6


def test_attention_weights_and_scale(tiny_dataset):
    model = small_qa(tiny_dataset)
    assert model.scale == pytest.approx(1 / np.sqrt(4))
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(2, N_FRAMES, tiny_dataset.train[0][0].feature_dim))
    q = rng.normal(size=(2, 4))
    _, w, _ = answer_logits(model, frames, q)
    np.testing.assert_allclose(w.sum(-1), 1.0)
    # identical frames get identical weights
    same = np.repeat(frames[:, :1], N_FRAMES, axis=1)
    _, w2, _ = answer_logits(model, same, q)
    np.testing.assert_allclose(w2, 1 / N_FRAMES)


def test_answer_is_a_distribution_and_rejects_bad_shapes(tiny_dataset):
    model = small_qa(tiny_dataset)
    env, q = tiny_dataset.questions("train")[0]
    p = answer(model, np.zeros((N_FRAMES, env.feature_dim)), q.tokens)
    assert p.shape == (len(tiny_dataset.answer_vocab),) and p.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        answer_logits(model, np.zeros((1, 3, env.feature_dim)), np.zeros((1, 4)))
    with pytest.raises(KeyError):
        qa_terms(model, np.zeros((1, N_FRAMES, env.feature_dim)), [q.tokens], ["not-an-answer"])


def test_short_paths_are_left_padded(tiny_dataset):
    env, q = tiny_dataset.questions("train")[0]
    goal = goal_set(env, q.target_object_id)
    start = sorted(goal)[0]
    ep = Episode(env, q, shortest_action_path(env, start, goal))
    frames = path_frames(ep)
    assert frames.shape == (N_FRAMES, env.feature_dim)
    assert all((f == frames[0]).all() for f in frames)


def test_training_is_deterministic(tiny_dataset):
    cfg = QATrainConfig(epochs=2, seed=3)
    a, ca = train_qa(tiny_dataset, cfg, model=small_qa(tiny_dataset, 3))
    b, cb = train_qa(tiny_dataset, cfg, model=small_qa(tiny_dataset, 3))
    assert a.store.equal(b.store) and ca == cb


def test_bag_of_words_counts():
    v = ("a", "b", "c")
    np.testing.assert_array_equal(bag_of_words(v, [("a", "a", "c")]), [[2, 0, 1]])


def test_blindfold_learns_the_question_prior(tiny_dataset):
    bf = train_blindfold(tiny_dataset, QATrainConfig(epochs=40))
    items = tiny_dataset.questions("train")
    # colour questions should be answered with colours and location questions with rooms
    colors = set(tiny_dataset.config.env.color_vocab)
    for _, q in items[:10]:
        p = blindfold_answer(bf, q.tokens)
        pick = bf.answer_vocab[int(p.argmax())]
        assert (pick in colors) == (q.qtype == "color")
