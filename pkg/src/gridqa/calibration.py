"""Marker calibration: place foreign objects, ask about them, adapt the policy.

The adapted (student) navigation model is trained on shortest paths to the
markers with a blend of action cross-entropy and a per-step cosine distance
between its top-layer hidden states and those of the frozen pre-trained
(teacher) model fed identical inputs::

    loss = lam * sum_i (1 - cos(h_student_i, h_teacher_i)) + (1 - lam) * sum_i CE_i

Both sums are divided by the number of supervised steps in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_nn as nn
from .dataset_gen import Question, color_question
from .grid_env import MARKER_TYPES, GridEnvironment, SceneObject, geodesic_distance
from .nav_policy import Episode, NavModel, clip_grads, imitation_terms, make_batch, nav_backward, nav_forward
from .path_oracle import ActionPath, goal_set, shortest_action_path


class PlacementError(RuntimeError):
    """Markers cannot be placed under the spacing constraint."""


@dataclass(frozen=True)
class CalibrationConfig:
    n_markers: int = 5
    min_distance: int = 4  # cells; 2 m at 0.5 m per cell
    lam: float = 0.2
    epochs: int = 20
    lr: float = 1e-4
    batch: int = 5
    seed: int = 0
    clip: float = 5.0
    max_tries: int = 200

    def __post_init__(self):
        if not 1 <= self.n_markers <= len(MARKER_TYPES):
            raise ValueError(f"n_markers must be in [1, {len(MARKER_TYPES)}], got {self.n_markers}")
        if self.min_distance < 0:
            raise ValueError("min_distance must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


def place_markers(env: GridEnvironment, cfg: CalibrationConfig, rng: np.random.Generator) -> GridEnvironment:
    """Return a copy of ``env`` with ``cfg.n_markers`` painted markers added."""
    if any(o.is_marker for o in env.objects):
        raise ValueError(f"{env.env_id} already holds markers")
    taken = {o.position for o in env.objects}
    cells = [c for c in env.free_cells() if c not in taken]
    types = [MARKER_TYPES[i] for i in rng.permutation(len(MARKER_TYPES))[: cfg.n_markers]]
    next_id = max((o.object_id for o in env.objects), default=-1) + 1
    for _ in range(cfg.max_tries):
        chosen: list[tuple[int, int]] = []
        for c in (cells[i] for i in rng.permutation(len(cells))):
            if all(geodesic_distance(env, c, p) >= cfg.min_distance for p in chosen):
                chosen.append(c)
                if len(chosen) == cfg.n_markers:
                    break
        if len(chosen) == cfg.n_markers:
            break
    else:
        raise PlacementError(
            f"cannot place {cfg.n_markers} markers {cfg.min_distance} cells apart in {env.env_id}"
        )
    markers = [
        SceneObject(next_id + i, t, env.color_vocab[int(rng.integers(len(env.color_vocab)))], pos, True)
        for i, (t, pos) in enumerate(zip(types, chosen))
    ]
    return env.with_objects(env.objects + tuple(markers))


def gen_marker_questions(env: GridEnvironment, rng: np.random.Generator,
                         max_tries: int = 50) -> list[tuple[Question, ActionPath]]:
    """One color question and one random-start shortest path per marker."""
    states = env.all_states()
    out = []
    for obj in sorted((o for o in env.objects if o.is_marker), key=lambda o: o.object_id):
        q = color_question(env, obj, f"{env.env_id}/m{obj.object_id}")
        goal = goal_set(env, obj.object_id)
        for _ in range(max_tries):
            start = states[int(rng.integers(len(states)))]
            if start not in goal:
                break
        out.append((q, shortest_action_path(env, start, goal)))
    return out


def marker_episodes(env: GridEnvironment, marker_data) -> list[Episode]:
    return [Episode(env, q, path) for q, path in marker_data]


def calibrate_distill(pretrained: NavModel, episodes: list[Episode], cfg: CalibrationConfig,
                      log=None) -> NavModel:
    """Adapt a clone of ``pretrained``; the teacher itself is never modified."""
    if not episodes:
        raise ValueError("no marker episodes")
    student = pretrained.clone()
    student.store.reset_optimizer()
    rng = nn.make_rng(cfg.seed, "calibrate")
    lam = float(cfg.lam)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        for i in range(0, len(order), cfg.batch):
            batch = make_batch(student, [episodes[j] for j in order[i : i + cfg.batch]])
            n = batch.mask.sum()
            fwd, ce, dlogits = imitation_terms(student, batch)
            dtops = None
            dist = 0.0
            if lam > 0.0:
                teacher = nav_forward(pretrained, batch)
                dtops = []
                for t, (hs, hp) in enumerate(zip(fwd.tops, teacher.tops)):
                    loss_t, g = nn.cosine_loss(hs, hp, batch.mask[:, t])
                    dist += loss_t
                    dtops.append(g * (lam / n))
            if lam < 1.0:
                dlogits = dlogits * ((1.0 - lam) / n)
            else:
                dlogits = np.zeros_like(dlogits)
            nav_backward(student, fwd, dlogits, dtops)
            clip_grads(student.store, cfg.clip)
            nn.adam_step(student.store, cfg.lr)
            if log:
                log(f"calib epoch {epoch + 1} ce {ce / n:.4f} dist {dist / n:.6f}")
    return student


def calibrate_finetune(pretrained: NavModel, episodes: list[Episode], cfg: CalibrationConfig, log=None) -> NavModel:
    """Policy loss only: the distillation loop with ``lam = 0``."""
    from dataclasses import replace

    return calibrate_distill(pretrained, episodes, replace(cfg, lam=0.0), log=log)


def distill_terms(student: NavModel, teacher: NavModel, episodes, lam: float):
    """Blended loss on one batch and its gradient left in ``student.store``."""
    batch = make_batch(student, episodes)
    n = batch.mask.sum()
    fwd, ce, dlogits = imitation_terms(student, batch)
    tfwd = nav_forward(teacher, batch)
    dist = 0.0
    dtops = []
    for t, (hs, hp) in enumerate(zip(fwd.tops, tfwd.tops)):
        loss_t, g = nn.cosine_loss(hs, hp, batch.mask[:, t])
        dist += loss_t
        dtops.append(g * (lam / n))
    nav_backward(student, fwd, dlogits * ((1.0 - lam) / n), dtops)
    return (lam * dist + (1.0 - lam) * ce) / n, ce / n, dist / n


def calibrate_env(pretrained: NavModel, env: GridEnvironment, cfg: CalibrationConfig, method: str = "distill"):
    """Place markers in ``env``, build marker episodes and adapt; returns (model, marker env)."""
    rng = nn.make_rng(cfg.seed, f"markers/{env.env_id}")
    marked = place_markers(env, cfg, rng)
    episodes = marker_episodes(marked, gen_marker_questions(marked, rng))
    if method == "distill":
        model = calibrate_distill(pretrained, episodes, cfg)
    elif method == "finetune":
        model = calibrate_finetune(pretrained, episodes, cfg)
    else:
        raise ValueError(f"unknown calibration method {method!r}")
    return model, marked, episodes
