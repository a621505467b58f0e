"""Joint navigation + QA training with scheduled exposure to rolled-out frames.

After a few navigation-only warm-start epochs, every batch of imitation
episodes also trains the answerer.  Each question is answered either from the
last five frames of its shortest path or, with probability ``p(epoch)``, from
the last five frames of a fresh greedy rollout of the current policy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor_nn as nn
from .nav_policy import (
    NavConfig,
    NavModel,
    NavTrainConfig,
    clip_grads,
    epoch_batches,
    init_nav_model,
    nav_update,
    rollout,
    rollout_batch,
)
from .qa_model import QAConfig, QAModel, init_qa_model, path_frames, predict, qa_update


@dataclass(frozen=True)
class TrainSchedule:
    """Fraction of QA samples using rollout frames, per epoch."""

    total_epochs: int = 30
    p_max: float = 0.5
    ramp_frac: float = 0.5
    constant: float | None = None  # overrides the ramp when set

    def __post_init__(self):
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")
        for v in (self.p_max, self.ramp_frac) + (() if self.constant is None else (self.constant,)):
            if not 0.0 <= v <= 1.0:
                raise ValueError("schedule values must lie in [0, 1]")

    def p(self, epoch: int) -> float:
        if self.constant is not None:
            return float(self.constant)
        ramp = self.ramp_frac * self.total_epochs
        if ramp <= 0:
            return float(self.p_max)
        return float(self.p_max * min(1.0, epoch / ramp))


@dataclass(frozen=True)
class JointConfig:
    epochs: int = 30
    warm_start: int = 3
    w_nav: float = 1.0
    w_qa: float = 1.0
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    clip: float = 5.0
    schedule: TrainSchedule | None = None  # default ramp over ``epochs``

    def __post_init__(self):
        if self.w_nav < 0 or self.w_qa < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.warm_start <= self.epochs:
            raise ValueError("warm_start must lie in [0, epochs]")

    @property
    def sched(self) -> TrainSchedule:
        return self.schedule if self.schedule is not None else TrainSchedule(self.epochs)

    def nav_config(self) -> NavTrainConfig:
        return NavTrainConfig(epochs=self.epochs, lr=self.lr, batch=self.batch, seed=self.seed, clip=self.clip)


def rollout_cap(path_len: int) -> int:
    return min(2 * path_len + 20, 120)


@dataclass
class JointLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        cols = ["epoch", "nav_loss", "nav_acc", "qa_loss", "qa_acc", "p_rollout", "n_rollout"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in cols})


def qa_frames(nav: NavModel, episodes, use_rollout: np.ndarray) -> np.ndarray:
    """Five frames per episode, from its path or from a greedy rollout."""
    frames = [None] * len(episodes)
    jobs, idx = [], []
    for i, e in enumerate(episodes):
        if use_rollout[i]:
            jobs.append((e.env, e.question, e.path.start, rollout_cap(len(e.path))))
            idx.append(i)
        else:
            frames[i] = path_frames(e)
    for i, traj in zip(idx, rollout_batch(nav, jobs)):
        frames[i] = traj.frames(episodes[i].env)
    return np.stack(frames)


def joint_train(dataset, cfg: JointConfig = JointConfig(), nav: NavModel | None = None, qa: QAModel | None = None,
                split: str = "train", log=None):
    """Returns ``(nav, qa, JointLog)``; QA rows are NaN during warm-start."""
    items = dataset.questions(split)
    if not items:
        raise ValueError("dataset split has no questions")
    feat = items[0][0].feature_dim
    if nav is None:
        nav = init_nav_model(NavConfig(len(dataset.word_vocab), feat), dataset.word_vocab, cfg.seed)
    if qa is None:
        qa = init_qa_model(QAConfig(len(dataset.word_vocab), feat, len(dataset.answer_vocab)),
                           dataset.word_vocab, dataset.answer_vocab, cfg.seed)
    ncfg = cfg.nav_config()
    sched = cfg.sched
    out = JointLog()
    for epoch in range(cfg.epochs):
        joint = epoch >= cfg.warm_start
        p = sched.p(epoch) if joint else 0.0
        mix = nn.make_rng(cfg.seed, f"mix-{epoch}")
        nl, na, nw, ql, qa_acc, n_roll = [], [], [], [], [], 0
        for episodes in epoch_batches(items, epoch, ncfg):
            # rollouts see the parameters from before this batch's update
            if joint and cfg.w_qa > 0:
                use = mix.random(len(episodes)) < p
                n_roll += int(use.sum())
                frames = qa_frames(nav, episodes, use)
            loss, acc = nav_update(nav, episodes, ncfg, weight=cfg.w_nav)
            clip_grads(nav.store, cfg.clip)
            nn.adam_step(nav.store, cfg.lr)
            nl.append(loss)
            na.append(acc)
            nw.append(sum(len(e) for e in episodes))
            if joint and cfg.w_qa > 0:
                l2, a2 = qa_update(qa, frames, [e.question for e in episodes], weight=cfg.w_qa)
                nn.adam_step(qa.store, cfg.lr)
                ql.append(l2)
                qa_acc.append(a2)
        row = {
            "epoch": epoch + 1,
            "nav_loss": float(np.average(nl, weights=nw)),
            "nav_acc": float(np.average(na, weights=nw)),
            "qa_loss": float(np.mean(ql)) if ql else float("nan"),
            "qa_acc": float(np.mean(qa_acc)) if qa_acc else float("nan"),
            "p_rollout": p,
            "n_rollout": n_roll,
        }
        out.rows.append(row)
        if log:
            log(f"joint epoch {row['epoch']} nav {row['nav_loss']:.4f}/{row['nav_acc']:.4f} "
                f"qa {row['qa_loss']:.4f}/{row['qa_acc']:.4f} p {p:.2f}")
    return nav, qa, out


def eval_forward(nav: NavModel, qa: QAModel, env, question, spawn, max_steps: int):
    """Greedy rollout followed by an answer from its last five frames."""
    traj = rollout(nav, env, question, spawn, max_steps)
    return traj, predict(qa, traj.frames(env)[None], [question.tokens])[0]
