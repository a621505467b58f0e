"""Answering from the last five frames, plus the question-only blindfold control.

The attention answerer scores each encoded frame against the encoded
question with a scaled dot product, pools the frames with the softmax
weights and classifies ``[question ; pooled frame]`` with one linear layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor_nn as nn
from .nav_policy import question_backward, question_forward, sample_episodes, token_matrix
from .grid_env import observe

N_FRAMES = 5


@dataclass(frozen=True)
class QAConfig:
    vocab_size: int
    feature_dim: int
    n_answers: int
    word_dim: int = 64
    q_hidden: int = 64
    q_layers: int = 2
    frame_dim: int = 64


@dataclass
class QAModel:
    config: QAConfig
    store: nn.ParamStore
    word_vocab: tuple[str, ...]
    answer_vocab: tuple[str, ...]

    @property
    def q_names(self) -> list[str]:
        return [f"qa.q.lstm{i}" for i in range(self.config.q_layers)]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.config.frame_dim)

    def checkpoint_config(self) -> dict:
        return {"kind": "qa", "model": asdict(self.config), "word_vocab": list(self.word_vocab),
                "answer_vocab": list(self.answer_vocab)}


def init_qa_model(cfg: QAConfig, word_vocab, answer_vocab, seed: int) -> QAModel:
    if cfg.frame_dim != cfg.q_hidden:
        raise ValueError("dot-product attention needs frame_dim == q_hidden")
    if cfg.n_answers != len(answer_vocab):
        raise ValueError("answer head width must equal the answer vocabulary size")
    rng = nn.make_rng(seed, "qa-init")
    s = nn.ParamStore()
    nn.init_embedding(s, "qa.q.embed", cfg.vocab_size, cfg.word_dim, rng)
    n_in = cfg.word_dim
    for i in range(cfg.q_layers):
        nn.init_lstm(s, f"qa.q.lstm{i}", n_in, cfg.q_hidden, rng)
        n_in = cfg.q_hidden
    nn.init_linear(s, "qa.frame", cfg.feature_dim, cfg.frame_dim, rng)
    nn.init_linear(s, "qa.head", cfg.q_hidden + cfg.frame_dim, cfg.n_answers, rng)
    return QAModel(cfg, s, tuple(word_vocab), tuple(answer_vocab))


def qa_model_from_store(store: nn.ParamStore, config: dict) -> QAModel:
    return QAModel(QAConfig(**config["model"]), store, tuple(config["word_vocab"]), tuple(config["answer_vocab"]))


def encode_question(model: QAModel, tokens_list):
    mat, lengths = token_matrix(model.word_vocab, tokens_list)
    return question_forward(model.store, "qa.q.embed", model.q_names, mat, lengths)


def answer_logits(model: QAModel, frames: np.ndarray, qvec: np.ndarray):
    """``frames`` is ``(B, 5, F)``; returns logits, attention weights and a cache."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1] != N_FRAMES:
        raise ValueError(f"expected (batch, {N_FRAMES}, features) frames, got {frames.shape}")
    s = model.store
    f, fcache = nn.linear(s, "qa.frame", frames)
    scores = np.einsum("bkd,bd->bk", f, qvec) * model.scale
    w = nn.softmax(scores)
    ctx = np.einsum("bk,bkd->bd", w, f)
    logits, hcache = nn.linear(s, "qa.head", np.concatenate([qvec, ctx], axis=-1))
    return logits, w, (f, fcache, w, qvec, hcache)


def answer_backward(model: QAModel, cache, dlogits: np.ndarray) -> np.ndarray:
    """Accumulate gradients below the logits; returns dL/dqvec."""
    s = model.store
    f, fcache, w, qvec, hcache = cache
    dz = nn.linear_backward(s, "qa.head", hcache, dlogits)
    d = qvec.shape[1]
    dq = dz[:, :d].copy()
    dctx = dz[:, d:]
    dw = np.einsum("bd,bkd->bk", dctx, f)
    df = w[:, :, None] * dctx[:, None, :]
    ds = w * (dw - (w * dw).sum(axis=-1, keepdims=True)) * model.scale
    df += ds[:, :, None] * qvec[:, None, :]
    dq += np.einsum("bk,bkd->bd", ds, f)
    nn.linear_backward(s, "qa.frame", fcache, df)
    return dq


def answer(model: QAModel, frames: np.ndarray, tokens) -> np.ndarray:
    """Answer distribution for one question given its five frames."""
    qvec, _ = encode_question(model, [tokens])
    logits, _, _ = answer_logits(model, np.asarray(frames)[None], qvec)
    return nn.softmax(logits)[0]


def qa_terms(model: QAModel, frames: np.ndarray, tokens_list, answers):
    """Forward + summed cross-entropy; returns (loss, logits, backward closure)."""
    index = {a: i for i, a in enumerate(model.answer_vocab)}
    labels = []
    for a in answers:
        if a not in index:
            raise KeyError(f"unknown answer token {a!r}")
        labels.append(index[a])
    qvec, qcache = encode_question(model, tokens_list)
    logits, _, cache = answer_logits(model, frames, qvec)
    loss, grad = nn.softmax_cross_entropy(logits, labels)

    def backward(scale: float = 1.0):
        dq = answer_backward(model, cache, grad * scale)
        question_backward(model.store, "qa.q.embed", model.q_names, qcache, dq)

    return loss, logits, backward


def qa_loss(model: QAModel, frames: np.ndarray, tokens, answer_token: str) -> float:
    loss, _, _ = qa_terms(model, np.asarray(frames)[None], [tokens], [answer_token])
    return loss


def predict(model: QAModel, frames: np.ndarray, tokens_list) -> list[str]:
    qvec, _ = encode_question(model, tokens_list)
    logits, _, _ = answer_logits(model, frames, qvec)
    return [model.answer_vocab[i] for i in logits.argmax(-1)]


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class QATrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0


def path_frames(episode) -> np.ndarray:
    """Features of the last five states along a ground-truth episode."""
    states = episode.path.states(episode.env)[-N_FRAMES:]
    states = [states[0]] * (N_FRAMES - len(states)) + states
    return np.stack([observe(episode.env, s).features for s in states])


def qa_epoch_batches(items, epoch: int, cfg: QATrainConfig):
    rng = nn.make_rng(cfg.seed, f"qa-epoch-{epoch}")
    order = rng.permutation(len(items))
    episodes = sample_episodes([items[i] for i in order], rng)
    return [episodes[i : i + cfg.batch] for i in range(0, len(episodes), cfg.batch)]


def qa_update(model: QAModel, frames, questions, weight: float = 1.0):
    loss, logits, backward = qa_terms(model, frames, [q.tokens for q in questions], [q.answer_token for q in questions])
    backward(weight / len(questions))
    hits = sum(model.answer_vocab[i] == q.answer_token for i, q in zip(logits.argmax(-1), questions))
    return loss / len(questions), hits / len(questions)


def accuracy_on(model: QAModel, items, seed: int = 0) -> float:
    """Accuracy on ground-truth path frames from fixed random spawns."""
    episodes = sample_episodes(items, nn.make_rng(seed, "qa-eval"))
    frames = np.stack([path_frames(e) for e in episodes])
    preds = predict(model, frames, [e.question.tokens for e in episodes])
    return float(np.mean([p == e.question.answer_token for p, e in zip(preds, episodes)]))


def train_qa(dataset, cfg: QATrainConfig = QATrainConfig(), model: QAModel | None = None,
             split: str = "train", items=None, log=None):
    """Train on ground-truth path frames; returns ``(model, curve)``.

    ``curve`` rows are ``(epoch, mean loss, train accuracy)``.
    """
    items = dataset.questions(split) if items is None else items
    if model is None:
        env0 = items[0][0]
        qcfg = QAConfig(len(dataset.word_vocab), env0.feature_dim, len(dataset.answer_vocab))
        model = init_qa_model(qcfg, dataset.word_vocab, dataset.answer_vocab, cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        losses, accs = [], []
        for episodes in qa_epoch_batches(items, epoch, cfg):
            frames = np.stack([path_frames(e) for e in episodes])
            loss, acc = qa_update(model, frames, [e.question for e in episodes])
            nn.adam_step(model.store, cfg.lr)
            losses.append(loss)
            accs.append(acc)
        curve.append((epoch + 1, float(np.mean(losses)), float(np.mean(accs))))
        if log:
            log(f"qa epoch {epoch + 1} loss {curve[-1][1]:.4f} acc {curve[-1][2]:.4f}")
    return model, curve


# ---------------------------------------------------------------- blindfold

@dataclass
class BlindfoldModel:
    store: nn.ParamStore
    word_vocab: tuple[str, ...]
    answer_vocab: tuple[str, ...]

    def checkpoint_config(self) -> dict:
        return {"kind": "blindfold", "word_vocab": list(self.word_vocab), "answer_vocab": list(self.answer_vocab)}


def bag_of_words(word_vocab, tokens_list) -> np.ndarray:
    index = {w: i for i, w in enumerate(word_vocab)}
    out = np.zeros((len(tokens_list), len(word_vocab)))
    for b, toks in enumerate(tokens_list):
        for w in toks:
            out[b, index[w]] += 1.0
    return out


def blindfold_answer(model: BlindfoldModel, tokens) -> np.ndarray:
    logits, _ = nn.linear(model.store, "bow", bag_of_words(model.word_vocab, [tokens]))
    return nn.softmax(logits)[0]


def train_blindfold(dataset, cfg: QATrainConfig = QATrainConfig(), split: str = "train", items=None):
    items = dataset.questions(split) if items is None else items
    rng = nn.make_rng(cfg.seed, "bow-init")
    store = nn.ParamStore()
    nn.init_linear(store, "bow", len(dataset.word_vocab), len(dataset.answer_vocab), rng)
    model = BlindfoldModel(store, tuple(dataset.word_vocab), tuple(dataset.answer_vocab))
    index = {a: i for i, a in enumerate(model.answer_vocab)}
    x_all = bag_of_words(model.word_vocab, [q.tokens for _, q in items])
    y_all = np.array([index[q.answer_token] for _, q in items])
    for epoch in range(cfg.epochs):
        order = nn.make_rng(cfg.seed, f"bow-epoch-{epoch}").permutation(len(items))
        for i in range(0, len(order), cfg.batch):
            idx = order[i : i + cfg.batch]
            logits, cache = nn.linear(store, "bow", x_all[idx])
            _, grad = nn.softmax_cross_entropy(logits, y_all[idx])
            nn.linear_backward(store, "bow", cache, grad / len(idx))
            nn.adam_step(store, cfg.lr)
    return model
