"""Recurrent navigation policy trained by teacher-forced imitation of shortest paths.

At step ``i`` the 2-layer navigation LSTM reads the concatenation of the
encoded observation, the encoded question and an embedding of the previous
action (a dedicated start token at ``i = 0``) and emits logits over the four
actions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_nn as nn
from .grid_env import (
    N_ACTIONS,
    Action,
    AgentState,
    GridEnvironment,
    observe,
    step,
)
from .path_oracle import ActionPath, goal_set, shortest_action_path

START = N_ACTIONS  # index of the start token in the action embedding


@dataclass(frozen=True)
class NavConfig:
    vocab_size: int
    feature_dim: int
    word_dim: int = 64
    q_hidden: int = 64
    q_layers: int = 2
    obs_dim: int = 64
    act_dim: int = 16
    hidden: int = 128
    layers: int = 2


@dataclass
class NavModel:
    config: NavConfig
    store: nn.ParamStore
    word_vocab: tuple[str, ...]

    @property
    def q_names(self) -> list[str]:
        return [f"q.lstm{i}" for i in range(self.config.q_layers)]

    @property
    def core_names(self) -> list[str]:
        return [f"nav.lstm{i}" for i in range(self.config.layers)]

    def clone(self) -> NavModel:
        return NavModel(self.config, self.store.clone(), self.word_vocab)

    def checkpoint_config(self) -> dict:
        return {"kind": "nav", "model": asdict(self.config), "word_vocab": list(self.word_vocab)}


def init_nav_model(cfg: NavConfig, word_vocab, seed: int) -> NavModel:
    rng = nn.make_rng(seed, "nav-init")
    s = nn.ParamStore()
    nn.init_embedding(s, "q.embed", cfg.vocab_size, cfg.word_dim, rng)
    n_in = cfg.word_dim
    for i in range(cfg.q_layers):
        nn.init_lstm(s, f"q.lstm{i}", n_in, cfg.q_hidden, rng)
        n_in = cfg.q_hidden
    nn.init_linear(s, "obs.enc", cfg.feature_dim, cfg.obs_dim, rng)
    nn.init_embedding(s, "act.embed", N_ACTIONS + 1, cfg.act_dim, rng)
    n_in = cfg.obs_dim + cfg.q_hidden + cfg.act_dim
    for i in range(cfg.layers):
        nn.init_lstm(s, f"nav.lstm{i}", n_in, cfg.hidden, rng)
        n_in = cfg.hidden
    nn.init_linear(s, "head", cfg.hidden, N_ACTIONS, rng)
    return NavModel(cfg, s, tuple(word_vocab))


def nav_model_from_store(store: nn.ParamStore, config: dict) -> NavModel:
    return NavModel(NavConfig(**config["model"]), store, tuple(config["word_vocab"]))


# ---------------------------------------------------------------- question encoder

def token_matrix(word_vocab, questions_tokens) -> tuple[np.ndarray, np.ndarray]:
    index = {w: i for i, w in enumerate(word_vocab)}
    lengths = np.array([len(t) for t in questions_tokens], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("empty question")
    mat = np.zeros((len(questions_tokens), lengths.max()), dtype=np.int64)
    for b, toks in enumerate(questions_tokens):
        for j, w in enumerate(toks):
            if w not in index:
                raise KeyError(f"unknown token {w!r}")
            mat[b, j] = index[w]
    return mat, lengths


def question_forward(store: nn.ParamStore, embed: str, names, tokens: np.ndarray, lengths: np.ndarray):
    """Final top-layer hidden state of each (padded) question."""
    xs, ecaches = [], []
    for j in range(tokens.shape[1]):
        e, c = nn.embedding(store, embed, tokens[:, j])
        xs.append(e)
        ecaches.append(c)
    tops, _, caches = nn.lstm_seq(store, names, xs)
    stacked = np.stack(tops, axis=1)
    qvec = stacked[np.arange(len(lengths)), lengths - 1]
    return qvec, (ecaches, caches, lengths)


def question_backward(store: nn.ParamStore, embed: str, names, cache, dq: np.ndarray) -> None:
    ecaches, caches, lengths = cache
    dtops = [np.where((lengths - 1 == j)[:, None], dq, 0.0) for j in range(len(caches))]
    dxs = nn.lstm_seq_backward(store, names, caches, dtops)
    for c, dx in zip(ecaches, dxs):
        nn.embedding_backward(store, embed, c, dx)


def encode_question(model: NavModel, tokens) -> np.ndarray:
    mat, lengths = token_matrix(model.word_vocab, [tokens])
    qvec, _ = question_forward(model.store, "q.embed", model.q_names, mat, lengths)
    return qvec[0]


# ---------------------------------------------------------------- teacher forcing

@dataclass
class Episode:
    """One supervised navigation episode: observations along a path plus labels."""

    env: GridEnvironment
    question: object
    path: ActionPath
    features: np.ndarray = field(init=False)
    prev: np.ndarray = field(init=False)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        states = self.path.states(self.env)
        self.features = np.stack([observe(self.env, s).features for s in states])
        acts = [int(a) for a in self.path.actions]
        self.prev = np.array([START] + acts, dtype=np.int64)
        self.labels = np.array(acts + [int(Action.STOP)], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class NavBatch:
    tokens: np.ndarray
    qlen: np.ndarray
    feats: np.ndarray  # (B, T, F)
    prev: np.ndarray  # (B, T)
    labels: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) float


def make_batch(model: NavModel, episodes) -> NavBatch:
    tokens, qlen = token_matrix(model.word_vocab, [ep.question.tokens for ep in episodes])
    B = len(episodes)
    T = max(len(ep) for ep in episodes)
    F = episodes[0].features.shape[1]
    feats = np.zeros((B, T, F))
    prev = np.full((B, T), START, dtype=np.int64)
    labels = np.full((B, T), int(Action.STOP), dtype=np.int64)
    mask = np.zeros((B, T))
    for b, ep in enumerate(episodes):
        n = len(ep)
        feats[b, :n] = ep.features
        prev[b, :n] = ep.prev
        labels[b, :n] = ep.labels
        mask[b, :n] = 1.0
    return NavBatch(tokens, qlen, feats, prev, labels, mask)


@dataclass
class NavForward:
    logits: np.ndarray  # (B, T, 4)
    tops: list
    caches: tuple


def nav_step(model: NavModel, obs_feats: np.ndarray, qvec: np.ndarray, prev_action, hidden=None):
    """One policy step for a batch; returns ``(logits, hidden)``."""
    s = model.store
    B = obs_feats.shape[0]
    if hidden is None:
        hidden = nn.zero_state(model.core_names, B, s)
    o, _ = nn.linear(s, "obs.enc", np.asarray(obs_feats, dtype=np.float64))
    a, _ = nn.embedding(s, "act.embed", prev_action)
    x = np.concatenate([o, qvec, a], axis=-1)
    hidden, _ = nn.lstm_stack_step(s, model.core_names, x, hidden)
    logits, _ = nn.linear(s, "head", hidden[-1][0])
    return logits, hidden


def nav_forward(model: NavModel, batch: NavBatch) -> NavForward:
    """Teacher-forced pass over whole padded sequences (same maths as :func:`nav_step`)."""
    s = model.store
    qvec, qcache = question_forward(s, "q.embed", model.q_names, batch.tokens, batch.qlen)
    B, T = batch.prev.shape
    o, ocache = nn.linear(s, "obs.enc", batch.feats)
    a, acache = nn.embedding(s, "act.embed", batch.prev)
    x = np.concatenate([o, np.broadcast_to(qvec[:, None, :], (B, T, qvec.shape[1])), a], axis=-1)
    tops, _, lcaches = nn.lstm_seq(s, model.core_names, [x[:, t] for t in range(T)])
    logits, hcache = nn.linear(s, "head", np.stack(tops, axis=1))
    return NavForward(logits, tops, (qcache, ocache, acache, lcaches, hcache))


def nav_backward(model: NavModel, fwd: NavForward, dlogits: np.ndarray, dtops=None) -> None:
    """Accumulate parameter gradients given dL/dlogits and optional dL/d(top hidden)."""
    s = model.store
    cfg = model.config
    qcache, ocache, acache, lcaches, hcache = fwd.caches
    dh = nn.linear_backward(s, "head", hcache, dlogits)
    T = dh.shape[1]
    dh_top = [dh[:, t] if dtops is None or dtops[t] is None else dh[:, t] + dtops[t] for t in range(T)]
    dx = np.stack(nn.lstm_seq_backward(s, model.core_names, lcaches, dh_top), axis=1)
    nn.linear_backward(s, "obs.enc", ocache, dx[..., : cfg.obs_dim])
    dq = dx[..., cfg.obs_dim : cfg.obs_dim + cfg.q_hidden].sum(axis=1)
    nn.embedding_backward(s, "act.embed", acache, dx[..., cfg.obs_dim + cfg.q_hidden :])
    question_backward(s, "q.embed", model.q_names, qcache, dq)


def imitation_terms(model: NavModel, batch: NavBatch):
    """Forward pass plus summed cross-entropy and its logits gradient (unnormalised)."""
    fwd = nav_forward(model, batch)
    B, T, K = fwd.logits.shape
    loss, grad = nn.softmax_cross_entropy(
        fwd.logits.reshape(-1, K), batch.labels.reshape(-1), batch.mask.reshape(-1)
    )
    return fwd, loss, grad.reshape(B, T, K)


def imitation_loss(model: NavModel, env: GridEnvironment, question, action_path: ActionPath,
                   accumulate: bool = False) -> float:
    """Mean per-step cross-entropy along a teacher-forced path (Stop appended)."""
    batch = make_batch(model, [Episode(env, question, action_path)])
    fwd, loss, grad = imitation_terms(model, batch)
    n = batch.mask.sum()
    if accumulate:
        nav_backward(model, fwd, grad / n)
    return loss / n


def teacher_forced_accuracy(model: NavModel, episodes, batch_size: int = 64) -> float:
    hits = total = 0.0
    for i in range(0, len(episodes), batch_size):
        batch = make_batch(model, episodes[i : i + batch_size])
        fwd = nav_forward(model, batch)
        pred = fwd.logits.argmax(-1)
        hits += float(((pred == batch.labels) * batch.mask).sum())
        total += float(batch.mask.sum())
    return hits / total


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class NavTrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    clip: float = 5.0


def sample_episodes(items, rng: np.random.Generator) -> list[Episode]:
    """Random-start shortest-path episodes, one per ``(env, question)`` item."""
    out = []
    for env, q in items:
        states = env.all_states()
        start = states[int(rng.integers(len(states)))]
        path = shortest_action_path(env, start, goal_set(env, q.target_object_id))
        out.append(Episode(env, q, path))
    return out


def epoch_batches(items, epoch: int, cfg: NavTrainConfig) -> list[list[Episode]]:
    """Deterministic shuffled batches of fresh episodes for ``epoch``."""
    rng = nn.make_rng(cfg.seed, f"nav-epoch-{epoch}")
    order = rng.permutation(len(items))
    episodes = sample_episodes([items[i] for i in order], rng)
    return [episodes[i : i + cfg.batch] for i in range(0, len(episodes), cfg.batch)]


def clip_grads(store: nn.ParamStore, max_norm: float) -> None:
    if max_norm and max_norm > 0:
        norm = store.grad_norm()
        if norm > max_norm:
            store.scale_grad(max_norm / norm)


def nav_update(model: NavModel, episodes, cfg: NavTrainConfig, weight: float = 1.0):
    """One Adam step on a batch of episodes; returns (mean loss, step accuracy)."""
    batch = make_batch(model, episodes)
    fwd, loss, grad = imitation_terms(model, batch)
    n = batch.mask.sum()
    nav_backward(model, fwd, grad * (weight / n))
    pred = fwd.logits.argmax(-1)
    acc = float(((pred == batch.labels) * batch.mask).sum() / n)
    return loss / n, acc


def train_navigation(dataset, cfg: NavTrainConfig = NavTrainConfig(), model: NavModel | None = None,
                     split: str = "train", log=None):
    """Imitation training on shortest paths; returns ``(model, curve)``.

    ``curve`` rows are ``(epoch, mean loss, teacher-forced accuracy)``.
    """
    items = dataset.questions(split)
    if not items:
        raise ValueError("dataset split has no questions")
    if model is None:
        env0 = items[0][0]
        model = init_nav_model(NavConfig(len(dataset.word_vocab), env0.feature_dim), dataset.word_vocab, cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        losses, accs, weights = [], [], []
        for episodes in epoch_batches(items, epoch, cfg):
            loss, acc = nav_update(model, episodes, cfg)
            clip_grads(model.store, cfg.clip)
            nn.adam_step(model.store, cfg.lr)
            losses.append(loss)
            accs.append(acc)
            weights.append(sum(len(e) for e in episodes))
        row = (epoch + 1, float(np.average(losses, weights=weights)), float(np.average(accs, weights=weights)))
        curve.append(row)
        if log:
            log(f"nav epoch {row[0]} loss {row[1]:.4f} acc {row[2]:.4f}")
    return model, curve


# ---------------------------------------------------------------- rollouts

@dataclass
class Trajectory:
    question: object
    spawn: AgentState
    steps: list  # (Observation, action, state after)
    terminated_by: str  # "stop" or "max_steps"

    @property
    def actions(self) -> list[Action]:
        return [a for _, a, _ in self.steps]

    @property
    def states(self) -> list[AgentState]:
        return [self.spawn] + [s for _, _, s in self.steps]

    @property
    def final_state(self) -> AgentState:
        return self.states[-1]

    def frames(self, env: GridEnvironment, n: int = 5) -> np.ndarray:
        """Features of the last ``n`` visited states, left-padded with the earliest."""
        states = self.states[-n:]
        states = [states[0]] * (n - len(states)) + states
        return np.stack([observe(env, s).features for s in states])


def rollout_batch(model: NavModel, jobs) -> list[Trajectory]:
    """Greedy lockstep rollouts; ``jobs`` are ``(env, question, spawn, max_steps)``."""
    if not jobs:
        return []
    tokens, qlen = token_matrix(model.word_vocab, [q.tokens for _, q, _, _ in jobs])
    qvec, _ = question_forward(model.store, "q.embed", model.q_names, tokens, qlen)
    B = len(jobs)
    states = [spawn for _, _, spawn, _ in jobs]
    steps = [[] for _ in range(B)]
    ended = [None] * B
    for b, (_, _, _, max_steps) in enumerate(jobs):
        if max_steps <= 0:
            ended[b] = "max_steps"
    prev = np.full(B, START, dtype=np.int64)
    hidden = None
    while not all(ended):
        feats = np.stack([observe(env, states[b]).features for b, (env, *_rest) in enumerate(jobs)])
        logits, hidden = nav_step(model, feats, qvec, prev, hidden)
        choice = logits.argmax(-1)
        for b, (env, _, _, max_steps) in enumerate(jobs):
            if ended[b]:
                continue
            act = Action(int(choice[b]))
            if act == Action.STOP:
                ended[b] = "stop"
                continue
            obs = observe(env, states[b])
            states[b] = step(env, states[b], act)
            steps[b].append((obs, act, states[b]))
            prev[b] = int(act)
            if len(steps[b]) >= max_steps:
                ended[b] = "max_steps"
    return [Trajectory(q, spawn, steps[b], ended[b]) for b, (_, q, spawn, _) in enumerate(jobs)]


def rollout(model: NavModel, env: GridEnvironment, question, spawn: AgentState, max_steps: int) -> Trajectory:
    return rollout_batch(model, [(env, question, spawn, max_steps)])[0]
