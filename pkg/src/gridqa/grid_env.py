"""Deterministic gridworld houses: layout, four-action dynamics, egocentric views.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; heading
``N`` decreases ``y``.  One cell corresponds to 0.5 m when distances are
reported in meters.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

CELL_METERS = 0.5
MARKER_TYPES = ("mailbox", "safe", "shoes", "tripod", "cloth")

# terrain codes inside an observation window
WALL, FREE, UNKNOWN = 0, 1, 2
N_TERRAIN = 3


class EnvError(ValueError):
    """An environment violates one of its structural invariants."""


class InvalidState(ValueError):
    """Agent state is not on a free cell of the environment."""


class Unreachable(RuntimeError):
    """No free path connects the requested positions."""


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


N_ACTIONS = len(Action)
MOVES = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)

# (dx, dy) per heading
DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class AgentState(NamedTuple):
    x: int
    y: int
    heading: Heading

    @property
    def pos(self) -> tuple[int, int]:
        return (self.x, self.y)

    def __repr__(self) -> str:
        return f"({self.x},{self.y},{Heading(self.heading).name})"


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    type_token: str
    color_token: str
    position: tuple[int, int]
    is_marker: bool = False


@dataclass(frozen=True)
class Cell:
    terrain: str
    room_id: int | None
    occupant: int | None


@dataclass(frozen=True, eq=False)
class Observation:
    """Egocentric ``depth x width`` window, row 0 is the agent's own row.

    Column ``width // 2`` is straight ahead; columns to its right are on the
    agent's right hand side.  ``objects`` holds object ids (-1 for none) for
    visible cells only.
    """

    terrain: np.ndarray
    objects: np.ndarray
    features: np.ndarray  # uint8 0/1, cast by the models


@dataclass(frozen=True, eq=False)
class GridEnvironment:
    env_id: str
    seed: int
    free: np.ndarray  # (height, width) bool
    room_map: np.ndarray  # (height, width) int, -1 on walls
    rooms: tuple[tuple[int, str], ...]
    objects: tuple[SceneObject, ...]
    type_vocab: tuple[str, ...]
    color_vocab: tuple[str, ...]
    view_depth: int = 5
    view_width: int = 5
    _occupant: np.ndarray = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        occ = np.full(self.free.shape, -1, dtype=np.int64)
        for i, obj in enumerate(self.objects):
            x, y = obj.position
            if occ[y, x] != -1:
                raise EnvError(f"two objects share cell {obj.position}")
            occ[y, x] = i
        self.free.setflags(write=False)
        self.room_map.setflags(write=False)
        occ.setflags(write=False)
        object.__setattr__(self, "_occupant", occ)
        object.__setattr__(self, "_cache", {})

    @property
    def height(self) -> int:
        return self.free.shape[0]

    @property
    def width(self) -> int:
        return self.free.shape[1]

    @property
    def feature_dim(self) -> int:
        per_cell = N_TERRAIN + len(self.type_vocab) + len(self.color_vocab)
        return self.view_depth * self.view_width * per_cell

    def is_free(self, x: int, y: int) -> bool:
        rows = self._cache.get("rows")
        if rows is None:
            rows = self._cache["rows"] = self.free.tolist()
        return 0 <= y < len(rows) and 0 <= x < len(rows[0]) and rows[y][x]

    def cell(self, x: int, y: int) -> Cell:
        if not self.free[y, x]:
            return Cell("wall", None, None)
        occ = int(self._occupant[y, x])
        return Cell("free", int(self.room_map[y, x]), None if occ < 0 else self.objects[occ].object_id)

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(f"no object {object_id} in {self.env_id}")

    def room_label(self, room_id: int) -> str:
        return dict(self.rooms)[room_id]

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.free)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def all_states(self) -> list[AgentState]:
        states = self._cache.get("states")
        if states is None:
            states = self._cache["states"] = [AgentState(x, y, h) for x, y in self.free_cells() for h in Heading]
        return list(states)

    def with_objects(self, objects, env_id: str | None = None) -> GridEnvironment:
        return GridEnvironment(
            env_id=env_id or self.env_id,
            seed=self.seed,
            free=self.free,
            room_map=self.room_map,
            rooms=self.rooms,
            objects=tuple(objects),
            type_vocab=self.type_vocab,
            color_vocab=self.color_vocab,
            view_depth=self.view_depth,
            view_width=self.view_width,
        )


def check_invariants(env: GridEnvironment) -> None:
    """Raise :class:`EnvError` if ``env`` breaks a structural invariant."""
    free = env.free
    h, w = free.shape
    if free[0, :].any() or free[-1, :].any() or free[:, 0].any() or free[:, -1].any():
        raise EnvError("border cells must be walls")
    if (env.room_map[~free] != -1).any():
        raise EnvError("wall cells must not carry a room id")
    room_ids = {rid for rid, _ in env.rooms}
    if not set(np.unique(env.room_map[free]).tolist()) <= room_ids:
        raise EnvError("free cell refers to an unknown room")
    seen = set()
    for obj in env.objects:
        x, y = obj.position
        if not env.is_free(x, y):
            raise EnvError(f"object {obj.object_id} sits on a wall")
        if obj.position in seen:
            raise EnvError(f"object {obj.object_id} shares its cell")
        seen.add(obj.position)
        if obj.type_token not in env.type_vocab or obj.color_token not in env.color_vocab:
            raise EnvError(f"object {obj.object_id} uses tokens outside the vocabulary")
        if obj.is_marker != (obj.type_token in MARKER_TYPES):
            raise EnvError(f"object {obj.object_id} marker flag disagrees with its type")
    cells = env.free_cells()
    if not cells:
        raise EnvError("environment has no free cells")
    reach = _bfs_field(free, cells[0])
    if (reach[free] < 0).any():
        raise EnvError("free cells are not 4-connected")


def _check_state(env: GridEnvironment, state: AgentState) -> None:
    if not env.is_free(state.x, state.y):
        raise InvalidState(f"state {state!r} is not on a free cell of {env.env_id}")


def step(env: GridEnvironment, state: AgentState, action: Action) -> AgentState:
    _check_state(env, state)
    if action == Action.FORWARD:
        dx, dy = DIRS[state.heading]
        if env.is_free(state.x + dx, state.y + dy):
            return AgentState(state.x + dx, state.y + dy, state.heading)
        return state
    if action == Action.TURN_LEFT:
        return AgentState(state.x, state.y, Heading((state.heading - 1) % 4))
    if action == Action.TURN_RIGHT:
        return AgentState(state.x, state.y, Heading((state.heading + 1) % 4))
    return state


def replay(env: GridEnvironment, start: AgentState, actions) -> list[AgentState]:
    states = [start]
    for a in actions:
        states.append(step(env, states[-1], a))
    return states


def window_cells(env: GridEnvironment, state: AgentState):
    """Yield ``(row, col, x, y)`` for every window slot, rows nearest first."""
    fx, fy = DIRS[state.heading]
    rx, ry = DIRS[(state.heading + 1) % 4]
    half = env.view_width // 2
    for r in range(env.view_depth):
        for c in range(env.view_width):
            lat = c - half
            yield r, c, state.x + r * fx + lat * rx, state.y + r * fy + lat * ry


def _scan(env: GridEnvironment, state: AgentState) -> tuple[np.ndarray, np.ndarray]:
    key = ("scan", state)
    cached = env._cache.get(key)
    if cached is not None:
        return cached
    terrain = np.full((env.view_depth, env.view_width), UNKNOWN, dtype=np.int8)
    objs = np.full((env.view_depth, env.view_width), -1, dtype=np.int64)
    blocked = [False] * env.view_width
    for r, c, x, y in window_cells(env, state):
        if blocked[c]:
            continue
        if env.is_free(x, y):
            terrain[r, c] = FREE
            occ = env._occupant[y, x]
            if occ >= 0:
                objs[r, c] = env.objects[occ].object_id
        else:
            terrain[r, c] = WALL
            blocked[c] = True
    terrain.setflags(write=False)
    objs.setflags(write=False)
    env._cache[key] = (terrain, objs)
    return terrain, objs


def observe(env: GridEnvironment, state: AgentState) -> Observation:
    _check_state(env, state)
    key = ("obs", state)
    cached = env._cache.get(key)
    if cached is not None:
        return cached
    terrain, objs = _scan(env, state)
    n_types, n_colors = len(env.type_vocab), len(env.color_vocab)
    per_cell = N_TERRAIN + n_types + n_colors
    feats = np.zeros((env.view_depth, env.view_width, per_cell), dtype=np.uint8)
    type_index = {t: i for i, t in enumerate(env.type_vocab)}
    color_index = {t: i for i, t in enumerate(env.color_vocab)}
    by_id = {o.object_id: o for o in env.objects}
    for r in range(env.view_depth):
        for c in range(env.view_width):
            feats[r, c, terrain[r, c]] = 1
            oid = objs[r, c]
            if oid >= 0:
                obj = by_id[int(oid)]
                feats[r, c, N_TERRAIN + type_index[obj.type_token]] = 1
                feats[r, c, N_TERRAIN + n_types + color_index[obj.color_token]] = 1
    feats = feats.reshape(-1)
    feats.setflags(write=False)
    obs = Observation(terrain, objs, feats)
    env._cache[key] = obs
    return obs


def visible_objects(env: GridEnvironment, state: AgentState) -> set[int]:
    _check_state(env, state)
    _, objs = _scan(env, state)
    return {int(o) for o in objs[objs >= 0]}


def _bfs_field(free: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    h, w = free.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    sx, sy = source
    dist[sy, sx] = 0
    queue = deque([(sx, sy)])
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1
        for dx, dy in DIRS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


def distance_field(env: GridEnvironment, source: tuple[int, int]) -> np.ndarray:
    """Geodesic distance (cells) from ``source`` to every cell; -1 if unreachable."""
    if not env.is_free(*source):
        raise InvalidState(f"{source} is not a free cell")
    key = ("dist", tuple(source))
    field_ = env._cache.get(key)
    if field_ is None:
        field_ = _bfs_field(env.free, tuple(source))
        field_.setflags(write=False)
        env._cache[key] = field_
    return field_


def geodesic_distance(env: GridEnvironment, a: tuple[int, int], b: tuple[int, int]) -> int:
    if not env.is_free(*b):
        raise InvalidState(f"{b} is not a free cell")
    d = int(distance_field(env, a)[b[1], b[0]])
    if d < 0:
        raise Unreachable(f"{a} and {b} are not connected in {env.env_id}")
    return d
