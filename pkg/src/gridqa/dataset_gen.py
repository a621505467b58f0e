"""Procedural houses, template questions and disjoint train/val/test splits.

All randomness comes from numpy's PCG64 generator seeded through
``np.random.SeedSequence``; per-environment seeds are derived from the
master seed and the (split, index) pair, so any environment can be rebuilt
in isolation.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid_env import MARKER_TYPES, GridEnvironment, SceneObject, check_invariants
from .path_oracle import goal_set

OBJECT_TYPES = ("sofa", "bed", "table", "chair", "lamp", "plant", "television", "fridge", "sink", "bathtub")
COLORS = ("red", "blue", "green", "yellow", "white", "black", "brown", "purple")
ROOM_LABELS = ("kitchen", "bedroom", "bathroom", "living_room", "dining_room", "office")
# object types a room label tends to contain
ROOM_AFFINITY = {
    "kitchen": ("fridge", "sink", "table"),
    "bedroom": ("bed", "lamp"),
    "bathroom": ("bathtub", "sink"),
    "living_room": ("sofa", "television", "plant"),
    "dining_room": ("table", "chair"),
    "office": ("chair", "lamp", "television"),
}
TEMPLATE_WORDS = ("what", "color", "is", "the", "room", "located", "in", "?")
PAD = "<pad>"
SPLITS = ("train", "val", "test")
MIN_ROOM = 3


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    width: int = 25
    height: int = 25
    n_rooms: int = 4
    n_objects: int = 10
    type_vocab: tuple[str, ...] = OBJECT_TYPES
    color_vocab: tuple[str, ...] = COLORS
    room_labels: tuple[str, ...] = ROOM_LABELS
    affinity: float = 0.7
    color_weights: tuple[float, ...] | None = None
    view_depth: int = 5
    view_width: int = 5
    max_retries: int = 50


@dataclass(frozen=True)
class DatasetConfig:
    n_train_envs: int = 60
    n_val_envs: int = 10
    n_test_envs: int = 10
    master_seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)


@dataclass(frozen=True)
class Question:
    qid: str
    tokens: tuple[str, ...]
    qtype: str
    target_object_id: int
    answer_token: str
    env_id: str


@dataclass
class Dataset:
    train: list[tuple[GridEnvironment, list[Question]]]
    val: list[tuple[GridEnvironment, list[Question]]]
    test: list[tuple[GridEnvironment, list[Question]]]
    word_vocab: tuple[str, ...]
    answer_vocab: tuple[str, ...]
    config: DatasetConfig

    def split(self, name: str) -> list[tuple[GridEnvironment, list[Question]]]:
        return getattr(self, name)

    def questions(self, name: str) -> list[tuple[GridEnvironment, Question]]:
        return [(env, q) for env, qs in self.split(name) for q in qs]


def word_vocab(cfg: EnvConfig) -> tuple[str, ...]:
    return (PAD,) + TEMPLATE_WORDS + tuple(cfg.type_vocab) + MARKER_TYPES


def answer_vocab(cfg: EnvConfig) -> tuple[str, ...]:
    return tuple(cfg.color_vocab) + tuple(cfg.room_labels)


def _split_rooms(rng, width, height, n_rooms):
    """Recursive partition of the interior; returns (rects, wall cells, doors)."""
    rects = [(1, 1, width - 2, height - 2)]  # x0, y0, x1, y1 inclusive
    walls: set[tuple[int, int]] = set()
    doors: list[tuple[int, int]] = []

    def touches_door(cells):
        near = {(x + dx, y + dy) for x, y in doors for dx, dy in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))}
        return any(c in near for c in cells)

    while len(rects) < n_rooms:
        order = sorted(range(len(rects)), key=lambda i: -(rects[i][2] - rects[i][0] + 1) * (rects[i][3] - rects[i][1] + 1))
        for idx in order:
            x0, y0, x1, y1 = rects[idx]
            w, h = x1 - x0 + 1, y1 - y0 + 1
            vertical = w > h if w != h else bool(rng.integers(2))
            span = w if vertical else h
            if span < 2 * MIN_ROOM + 1:
                vertical = not vertical
                span = w if vertical else h
                if span < 2 * MIN_ROOM + 1:
                    continue
            lo, hi = MIN_ROOM, span - MIN_ROOM - 1
            candidates = list(range(lo, hi + 1))
            rng.shuffle(candidates)
            for off in candidates:
                if vertical:
                    cut = x0 + off
                    line = [(cut, y) for y in range(y0, y1 + 1)]
                else:
                    cut = y0 + off
                    line = [(x, cut) for x in range(x0, x1 + 1)]
                if touches_door(line):
                    continue
                door = line[int(rng.integers(len(line)))]
                walls.update(c for c in line if c != door)
                doors.append(door)
                if vertical:
                    rects[idx] = (x0, y0, cut - 1, y1)
                    rects.append((cut + 1, y0, x1, y1))
                else:
                    rects[idx] = (x0, y0, x1, cut - 1)
                    rects.append((x0, cut + 1, x1, y1))
                break
            else:
                continue
            break
        else:
            raise GenerationError(f"cannot fit {n_rooms} rooms of side >= {MIN_ROOM} in {width}x{height}")
    return rects, walls, doors


def generate_environment(seed: int, cfg: EnvConfig, env_id: str | None = None) -> GridEnvironment:
    if cfg.width < MIN_ROOM + 2 or cfg.height < MIN_ROOM + 2:
        raise GenerationError(f"{cfg.width}x{cfg.height} is too small for a single room")
    if cfg.n_rooms < 1 or cfg.n_rooms > len(cfg.room_labels) * 10:
        raise GenerationError(f"n_rooms={cfg.n_rooms} out of range")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    env_id = env_id or f"env-{seed}"
    last_error = None
    for _ in range(cfg.max_retries):
        try:
            return _generate_once(rng, seed, cfg, env_id)
        except GenerationError as err:
            last_error = err
    raise GenerationError(f"{env_id}: gave up after {cfg.max_retries} attempts: {last_error}")


def _generate_once(rng, seed, cfg: EnvConfig, env_id: str) -> GridEnvironment:
    rects, walls, doors = _split_rooms(rng, cfg.width, cfg.height, cfg.n_rooms)
    free = np.zeros((cfg.height, cfg.width), dtype=bool)
    room_map = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    for rid, (x0, y0, x1, y1) in enumerate(rects):
        free[y0 : y1 + 1, x0 : x1 + 1] = True
        room_map[y0 : y1 + 1, x0 : x1 + 1] = rid
    for x, y in walls:
        free[y, x] = False
        room_map[y, x] = -1
    for x, y in doors:
        free[y, x] = True
        # a door belongs to the first neighbouring room found
        for dx, dy in ((0, -1), (-1, 0), (0, 1), (1, 0)):
            if room_map[y + dy, x + dx] >= 0:
                room_map[y, x] = room_map[y + dy, x + dx]
                break
    labels = list(cfg.room_labels)
    replace = len(rects) > len(labels)
    picked = rng.choice(len(labels), size=len(rects), replace=replace)
    rooms = tuple((rid, labels[int(i)]) for rid, i in enumerate(picked))

    door_set = set(doors)
    cells = [(int(x), int(y)) for y, x in zip(*np.nonzero(free)) if (int(x), int(y)) not in door_set]
    if cfg.n_objects > len(cells):
        raise GenerationError(f"n_objects={cfg.n_objects} exceeds {len(cells)} placeable free cells")
    chosen = rng.choice(len(cells), size=cfg.n_objects, replace=False)
    if cfg.color_weights is not None:
        cw = np.asarray(cfg.color_weights, dtype=float)
        cw = cw / cw.sum()
    else:
        cw = None
    label_of = dict(rooms)
    objects = []
    for oid, ci in enumerate(chosen):
        pos = cells[int(ci)]
        label = label_of[int(room_map[pos[1], pos[0]])]
        pool = [t for t in ROOM_AFFINITY.get(label, ()) if t in cfg.type_vocab]
        if pool and rng.random() < cfg.affinity:
            type_token = pool[int(rng.integers(len(pool)))]
        else:
            type_token = cfg.type_vocab[int(rng.integers(len(cfg.type_vocab)))]
        color = cfg.color_vocab[int(rng.choice(len(cfg.color_vocab), p=cw))]
        objects.append(SceneObject(oid, type_token, color, pos, False))

    env = GridEnvironment(
        env_id=env_id,
        seed=seed,
        free=free,
        room_map=room_map,
        rooms=rooms,
        objects=tuple(objects),
        type_vocab=tuple(cfg.type_vocab) + MARKER_TYPES,
        color_vocab=tuple(cfg.color_vocab),
        view_depth=cfg.view_depth,
        view_width=cfg.view_width,
    )
    try:
        check_invariants(env)
    except ValueError as err:
        raise GenerationError(str(err)) from err
    return env


def color_question(env: GridEnvironment, obj: SceneObject, qid: str) -> Question:
    return Question(qid, ("what", "color", "is", "the", obj.type_token, "?"), "color",
                    obj.object_id, obj.color_token, env.env_id)


def location_question(env: GridEnvironment, obj: SceneObject, qid: str) -> Question:
    label = env.room_label(int(env.room_map[obj.position[1], obj.position[0]]))
    return Question(qid, ("what", "room", "is", "the", obj.type_token, "located", "in", "?"), "location",
                    obj.object_id, label, env.env_id)


def generate_questions(env: GridEnvironment, cfg: EnvConfig | None = None) -> list[Question]:
    """One color and one location question per object whose type is unique."""
    plain = [o for o in env.objects if not o.is_marker]
    counts: dict[str, int] = {}
    for o in plain:
        counts[o.type_token] = counts.get(o.type_token, 0) + 1
    out = []
    for obj in sorted(plain, key=lambda o: o.object_id):
        if counts[obj.type_token] != 1:
            continue
        goal_set(env, obj.object_id)  # raises if the target can never be seen
        out.append(color_question(env, obj, f"{env.env_id}/q{len(out)}"))
        out.append(location_question(env, obj, f"{env.env_id}/q{len(out)}"))
    return out


def env_seed(master_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([master_seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _make_env(args):
    seed, env_cfg, env_id = args
    env = generate_environment(seed, env_cfg, env_id)
    return env, generate_questions(env, env_cfg)


def build_dataset(cfg: DatasetConfig = DatasetConfig(), jobs: int = 1) -> Dataset:
    """Generate every split; ``jobs > 1`` fans environments out to processes.

    Each environment depends only on its own seed, so the result does not
    depend on ``jobs``.
    """
    counts = {"train": cfg.n_train_envs, "val": cfg.n_val_envs, "test": cfg.n_test_envs}
    if min(counts.values()) < 1:
        raise ValueError("every split needs at least one environment")
    tasks = [(split, (env_seed(cfg.master_seed, split, i), cfg.env, f"{split}-{i:03d}"))
             for split in SPLITS for i in range(counts[split])]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            made = list(pool.map(_make_env, [t for _, t in tasks]))
    else:
        made = [_make_env(t) for _, t in tasks]
    parts = {split: [] for split in SPLITS}
    for (split, _), item in zip(tasks, made):
        parts[split].append(item)
    return Dataset(parts["train"], parts["val"], parts["test"], word_vocab(cfg.env), answer_vocab(cfg.env), cfg)


def config_dict(cfg) -> dict:
    return asdict(cfg)
