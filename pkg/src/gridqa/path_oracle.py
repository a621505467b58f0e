"""Shortest action paths over ``(x, y, heading)`` and T_{-k} spawn construction.

Every action (forward or turn) costs one.  ``shortest_action_path`` runs A*
with the Manhattan distance to the nearest goal position; ``bfs_action_path``
and ``action_distances`` are brute-force breadth-first oracles used to check it.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np

from .grid_env import (
    DIRS,
    Action,
    AgentState,
    GridEnvironment,
    Heading,
    Unreachable,
    replay,
    step,
    visible_objects,
)


class DatasetConsistencyError(RuntimeError):
    """A target cannot be seen from anywhere in its environment."""


class EnvTooSmall(RuntimeError):
    """No start state lies far enough from the goal set."""


@dataclass(frozen=True)
class ActionPath:
    start: AgentState
    actions: tuple[Action, ...]
    end: AgentState

    def __len__(self) -> int:
        return len(self.actions)

    def states(self, env: GridEnvironment) -> list[AgentState]:
        return replay(env, self.start, self.actions)


def goal_set(env: GridEnvironment, target_object_id: int) -> frozenset[AgentState]:
    key = ("goal", target_object_id)
    cached = env._cache.get(key)
    if cached is not None:
        return cached
    tx, ty = env.object_by_id(target_object_id).position
    reach = max(env.view_depth - 1, env.view_width // 2)
    near = [s for s in env.all_states() if abs(s.x - tx) <= reach and abs(s.y - ty) <= reach]
    goals = frozenset(s for s in near if target_object_id in visible_objects(env, s))
    if not goals:
        raise DatasetConsistencyError(f"object {target_object_id} is never visible in {env.env_id}")
    env._cache[key] = goals
    return goals


def _heuristic_table(env: GridEnvironment, goal: frozenset[AgentState]) -> np.ndarray:
    positions = np.array(sorted({s.pos for s in goal}))
    ys, xs = np.mgrid[0 : env.height, 0 : env.width]
    d = np.abs(xs[..., None] - positions[:, 0]) + np.abs(ys[..., None] - positions[:, 1])
    return d.min(axis=-1)


_HEADINGS = tuple(Heading)


def _successors(env: GridEnvironment, state: AgentState):
    """Non-trivial moves in the fixed order Forward, TurnLeft, TurnRight."""
    x, y, h = state
    dx, dy = DIRS[h]
    if env.is_free(x + dx, y + dy):
        yield Action.FORWARD, AgentState(x + dx, y + dy, h)
    yield Action.TURN_LEFT, AgentState(x, y, _HEADINGS[(h - 1) % 4])
    yield Action.TURN_RIGHT, AgentState(x, y, _HEADINGS[(h + 1) % 4])


def shortest_action_path(env: GridEnvironment, start: AgentState, goal: frozenset[AgentState]) -> ActionPath:
    """A* from ``start`` to any state of ``goal``; ties expand FIFO."""
    if not goal:
        raise ValueError("goal set is empty")
    step(env, start, Action.STOP)  # validates start
    if start in goal:
        return ActionPath(start, (), start)
    hkey = ("heur", goal)
    htab = env._cache.get(hkey)
    if htab is None:
        htab = _heuristic_table(env, goal)
        env._cache[hkey] = htab

    counter = 0
    g_score = {start: 0}
    parent: dict[AgentState, tuple[AgentState, Action]] = {}
    heap = [(int(htab[start.y, start.x]), 0, start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur in goal:
            actions = []
            node = cur
            while node != start:
                node, a = parent[node]
                actions.append(a)
            return ActionPath(start, tuple(reversed(actions)), cur)
        closed.add(cur)
        g = g_score[cur] + 1
        for a, nxt in _successors(env, cur):
            if nxt in closed or g >= g_score.get(nxt, 1 << 30):
                continue
            g_score[nxt] = g
            parent[nxt] = (cur, a)
            counter += 1
            heapq.heappush(heap, (g + int(htab[nxt.y, nxt.x]), counter, nxt))
    raise Unreachable(f"no goal state reachable from {start!r} in {env.env_id}")


def bfs_action_path(env: GridEnvironment, start: AgentState, goal: frozenset[AgentState]) -> ActionPath:
    """Plain breadth-first search over the state graph."""
    if start in goal:
        return ActionPath(start, (), start)
    parent = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for a, nxt in _successors(env, cur):
            if nxt in parent:
                continue
            parent[nxt] = (cur, a)
            if nxt in goal:
                actions = []
                node = nxt
                while parent[node] is not None:
                    node, act = parent[node]
                    actions.append(act)
                return ActionPath(start, tuple(reversed(actions)), nxt)
            queue.append(nxt)
    raise Unreachable(f"no goal state reachable from {start!r} in {env.env_id}")


def action_distances(env: GridEnvironment, goal: frozenset[AgentState]) -> dict[AgentState, int]:
    """Exact action distance to ``goal`` for every reachable state (reverse BFS)."""
    dist = {s: 0 for s in goal}
    queue = deque(sorted(goal))
    while queue:
        s = queue.popleft()
        d = dist[s] + 1
        preds = [
            AgentState(s.x, s.y, Heading((s.heading + 1) % 4)),  # undo a left turn
            AgentState(s.x, s.y, Heading((s.heading - 1) % 4)),  # undo a right turn
        ]
        dx, dy = DIRS[s.heading]
        if env.is_free(s.x - dx, s.y - dy):
            preds.append(AgentState(s.x - dx, s.y - dy, s.heading))
        for p in preds:
            if p not in dist:
                dist[p] = d
                queue.append(p)
    return dist


def spawn_at(env: GridEnvironment, target_object_id: int, k: int, rng: np.random.Generator,
             max_tries: int = 200) -> AgentState:
    """A state exactly ``k`` actions from the target's goal set."""
    if k < 0:
        raise ValueError("k must be non-negative")
    goal = goal_set(env, target_object_id)
    states = env.all_states()
    for _ in range(max_tries):
        start = states[int(rng.integers(len(states)))]
        path = shortest_action_path(env, start, goal)
        if len(path) < k:
            continue
        spawn = path.states(env)[len(path) - k]
        resolved = len(shortest_action_path(env, spawn, goal))
        assert resolved == k, (resolved, k)
        return spawn
    raise EnvTooSmall(f"no start {k} actions from object {target_object_id} in {env.env_id}")
