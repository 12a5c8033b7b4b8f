"""Synthetic grid world with static objects and viewpoint-dependent observations.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row, rows
growing downward.  Headings are degrees counter-clockwise from east:

    0 -> east (+x), 90 -> north (-y), 180 -> west (-x), 270 -> south (+y)

Actions never touch the environment; they only move the pose.  Everything in
this module is immutable once built, so environments and episodes can be
shared freely.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .nav import Instruction

Cell = tuple[int, int]

SCHEMA_VERSION = 1
HEADINGS = (0, 90, 180, 270)
HEADING_VECTORS = {0: (1, 0), 90: (0, -1), 180: (-1, 0), 270: (0, 1)}
# BFS neighbour order: N, E, S, W
NEIGHBOR_ORDER: tuple[Cell, ...] = ((0, -1), (1, 0), (0, 1), (-1, 0))

DEFAULT_VOCAB = (
    "desk", "chair", "television", "sofa", "coffee table",
    "lamp", "bed", "plant", "bookshelf", "fridge",
)


class Action(IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


class GenerationError(RuntimeError):
    pass


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    label: str
    cell: Cell


@dataclass(frozen=True)
class Pose:
    cell: Cell
    heading: int

    def __post_init__(self):
        if self.heading not in HEADING_VECTORS:
            raise ValueError(f"heading must be one of {HEADINGS}, got {self.heading}")


@dataclass(frozen=True)
class ObservationSpec:
    fov_degrees: float = 120.0
    range: int = 3

    def __post_init__(self):
        if not 0 < self.fov_degrees <= 360:
            raise ValueError("fov_degrees must lie in (0, 360]")
        if self.range < 1:
            raise ValueError("range must be >= 1")


@dataclass(frozen=True)
class Observation:
    index: int
    pose: Pose
    visible_ids: frozenset[int]


@dataclass(frozen=True)
class GridEnvironment:
    width: int
    height: int
    walkable: tuple[tuple[bool, ...], ...]  # indexed [y][x]
    objects: tuple[ObjectInstance, ...]
    seed: int
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    _by_id: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for o in self.objects:
            if not o.label:
                raise ValueError("object label must be non-empty")
            if not (self.is_walkable(o.cell) or any(
                self.is_walkable((o.cell[0] + dx, o.cell[1] + dy)) for dx, dy in NEIGHBOR_ORDER
            )):
                raise ValueError(f"object {o.id} is not reachable from any walkable cell")
        object.__setattr__(self, "_by_id", {o.id: o for o in self.objects})

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_walkable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.walkable[cell[1]][cell[0]]

    def object(self, object_id: int) -> ObjectInstance:
        return self._by_id[object_id]

    def walkable_cells(self) -> list[Cell]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if self.walkable[y][x]]

    def poses(self) -> list[Pose]:
        return [Pose(c, h) for c in self.walkable_cells() for h in HEADINGS]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "vocab": list(self.vocab),
            "rows": ["".join("." if w else "#" for w in row) for row in self.walkable],
            "objects": [{"id": o.id, "label": o.label, "cell": list(o.cell)} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridEnvironment":
        walkable = tuple(tuple(ch == "." for ch in row) for row in d["rows"])
        objects = tuple(ObjectInstance(o["id"], o["label"], tuple(o["cell"])) for o in d["objects"])
        return cls(d["width"], d["height"], walkable, objects, d["seed"], tuple(d["vocab"]))


@dataclass(frozen=True)
class InstructionConfig:
    min_len: int = 3
    max_len: int = 7
    max_landmarks: int = 2
    max_retries: int = 50


@dataclass(frozen=True)
class Episode:
    env: GridEnvironment
    start: Pose
    goal_cell: Cell
    target_object_id: int
    instruction: "Instruction"
    expert_path: tuple[Action, ...]
    expert_cells: tuple[Cell, ...]
    seed: int = 0

    def expert_poses(self) -> list[Pose]:
        """Poses visited under teacher forcing, one per expert action."""
        poses = [self.start]
        for a in self.expert_path[:-1]:
            poses.append(step(self.env, poses[-1], a)[0])
        return poses

    @property
    def shortest_len(self) -> int:
        return len(self.expert_cells) - 1


# --------------------------------------------------------------------------- generation


def _components(walkable: np.ndarray) -> list[list[Cell]]:
    h, w = walkable.shape
    seen = np.zeros_like(walkable, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if not walkable[y, x] or seen[y, x]:
                continue
            comp, queue = [], deque([(x, y)])
            seen[y, x] = True
            while queue:
                cx, cy = queue.popleft()
                comp.append((cx, cy))
                for dx, dy in NEIGHBOR_ORDER:
                    nx, ny = cx + dx, cy + dy
                    if 0 <= nx < w and 0 <= ny < h and walkable[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((nx, ny))
            comps.append(comp)
    return comps


def generate_environment(
    seed: int,
    width: int = 8,
    height: int = 8,
    num_objects: int = 6,
    vocab: Sequence[str] = DEFAULT_VOCAB,
    wall_density: float = 0.1,
    max_label_repeats: int = 1,
    max_attempts: int = 20,
) -> GridEnvironment:
    """Carve a connected walkable region and scatter labelled objects in it.

    Walls are sampled i.i.d. with probability ``wall_density``; every walkable
    cell outside the largest 4-connected component is turned into wall, so
    the whole walkable set is one component.  Objects sit on distinct
    walkable cells.
    """
    if not 0.0 <= wall_density <= 0.4:
        raise ValueError("wall_density must lie in [0, 0.4]")
    if num_objects > len(vocab) * max_label_repeats:
        raise ValueError("num_objects exceeds vocab size times allowed repeats")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        walls = rng.random((height, width)) < wall_density
        comps = _components(~walls)
        if not comps:
            continue
        largest = max(comps, key=len)  # first-found wins ties
        if len(largest) < 4 * num_objects:
            continue
        mask = np.zeros((height, width), dtype=bool)
        for x, y in largest:
            mask[y, x] = True
        pool = [lab for lab in vocab for _ in range(max_label_repeats)]
        labels = [pool[i] for i in rng.choice(len(pool), size=num_objects, replace=False)]
        cells = [largest[i] for i in rng.choice(len(largest), size=num_objects, replace=False)]
        objects = tuple(
            ObjectInstance(i, lab, (int(c[0]), int(c[1]))) for i, (lab, c) in enumerate(zip(labels, cells))
        )
        walkable = tuple(tuple(bool(v) for v in row) for row in mask)
        return GridEnvironment(width, height, walkable, objects, seed, tuple(vocab))
    raise GenerationError(
        f"could not carve a connected region of >= {4 * num_objects} cells "
        f"in {max_attempts} attempts (seed={seed}, {width}x{height}, density={wall_density})"
    )


# --------------------------------------------------------------------------- geometry


def sight_cells(a: Cell, b: Cell) -> set[Cell]:
    """Cells strictly between ``a`` and ``b`` that can block line of sight.

    Bresenham along the major axis.  Ties count as occluding: when the ideal
    line sits exactly halfway between two minor-axis cells both are included,
    and when it passes exactly through a lattice corner the two side cells of
    that corner are included.
    """
    (x0, y0), (x1, y1) = a, b
    dx, dy = x1 - x0, y1 - y0
    n = max(abs(dx), abs(dy))
    if n <= 1 and not (abs(dx) == 1 and abs(dy) == 1):
        return set()
    x_major = abs(dx) >= abs(dy)
    sM = 1 if (dx if x_major else dy) >= 0 else -1
    sm = 1 if (dy if x_major else dx) >= 0 else -1
    dm = abs(dy if x_major else dx)

    def cell(major: int, minor: int) -> Cell:
        if x_major:
            return (x0 + sM * major, y0 + sm * minor)
        return (x0 + sm * minor, y0 + sM * major)

    out: set[Cell] = set()
    for i in range(1, n):
        q, r = divmod(i * dm, n)
        if 2 * r < n:
            out.add(cell(i, q))
        elif 2 * r > n:
            out.add(cell(i, q + 1))
        else:
            out.add(cell(i, q))
            out.add(cell(i, q + 1))
    # corner crossings at half-integer major coordinates
    for i in range(n):
        num = (2 * i + 1) * dm  # minor coordinate times 2n at major i + 1/2
        if num % n == 0 and (num // n) % 2 == 1:
            k = (num // n - 1) // 2
            out.add(cell(i, k + 1))
            out.add(cell(i + 1, k))
    out.discard(a)
    out.discard(b)
    return out


def _in_cone(pose: Pose, target: Cell, fov: float) -> bool:
    if fov >= 360:
        return True
    vx, vy = target[0] - pose.cell[0], target[1] - pose.cell[1]
    hx, hy = HEADING_VECTORS[pose.heading]
    dot = vx * hx + vy * hy
    cross = vx * hy - vy * hx
    angle = math.degrees(math.atan2(abs(cross), dot))
    return angle <= fov / 2 + 1e-9


def visible_objects(env: GridEnvironment, pose: Pose, spec: ObservationSpec) -> frozenset[int]:
    out = []
    for o in env.objects:
        if o.cell == pose.cell:
            out.append(o.id)
            continue
        dist = max(abs(o.cell[0] - pose.cell[0]), abs(o.cell[1] - pose.cell[1]))
        if dist > spec.range or not _in_cone(pose, o.cell, spec.fov_degrees):
            continue
        if any(not env.is_walkable(c) for c in sight_cells(pose.cell, o.cell)):
            continue
        out.append(o.id)
    return frozenset(out)


# --------------------------------------------------------------------------- dynamics


def step(env: GridEnvironment, pose: Pose, action: Action) -> tuple[Pose, bool]:
    """Apply one action; returns ``(new_pose, blocked)``."""
    action = Action(action)
    if action is Action.TURN_LEFT:
        return Pose(pose.cell, (pose.heading + 90) % 360), False
    if action is Action.TURN_RIGHT:
        return Pose(pose.cell, (pose.heading - 90) % 360), False
    if action is Action.MOVE_FORWARD:
        dx, dy = HEADING_VECTORS[pose.heading]
        nxt = (pose.cell[0] + dx, pose.cell[1] + dy)
        if env.is_walkable(nxt):
            return Pose(nxt, pose.heading), False
        return pose, True
    return pose, False


def distance_map(env: GridEnvironment, source: Cell) -> dict[Cell, int]:
    """BFS geodesic distances from ``source`` to every reachable cell."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        c = queue.popleft()
        for dx, dy in NEIGHBOR_ORDER:
            n = (c[0] + dx, c[1] + dy)
            if n not in dist and env.is_walkable(n):
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def shortest_path(env: GridEnvironment, start: Cell, goal: Cell) -> list[Cell]:
    if not env.is_walkable(start) or not env.is_walkable(goal):
        raise NoPathError(f"endpoint not walkable: {start} -> {goal}")
    parent: dict[Cell, Cell | None] = {start: None}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        if c == goal:
            break
        for dx, dy in NEIGHBOR_ORDER:
            n = (c[0] + dx, c[1] + dy)
            if n not in parent and env.is_walkable(n):
                parent[n] = c
                queue.append(n)
    if goal not in parent:
        raise NoPathError(f"no path from {start} to {goal}")
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def expert_action(pose: Pose, dist: dict[Cell, int]) -> Action:
    """Turn-minimising first action along a shortest path to the BFS source of ``dist``.

    Among neighbours one step closer to the goal, prefer the one needing the
    fewest turns; ties go to the left turn.
    """
    d = dist.get(pose.cell)
    if d is None:
        raise NoPathError(f"goal unreachable from {pose.cell}")
    if d == 0:
        return Action.STOP
    best = None
    for heading, (dx, dy) in HEADING_VECTORS.items():
        n = (pose.cell[0] + dx, pose.cell[1] + dy)
        if dist.get(n) != d - 1:
            continue
        delta = (heading - pose.heading) % 360
        # (turn count, prefer-left rank)
        rank = {0: (0, 0), 90: (1, 0), 270: (1, 1), 180: (2, 0)}[delta]
        if best is None or rank < best[0]:
            best = (rank, delta)
    delta = best[1]
    if delta == 0:
        return Action.MOVE_FORWARD
    return Action.TURN_RIGHT if delta == 270 else Action.TURN_LEFT


def collect_history(env: GridEnvironment, poses: Iterable[Pose], spec: ObservationSpec) -> list[Observation]:
    return [Observation(i, p, visible_objects(env, p, spec)) for i, p in enumerate(poses)]


def random_walk(env: GridEnvironment, n: int, rng: np.random.Generator, start: Pose | None = None) -> list[Pose]:
    """Exploratory pose sequence; forward when possible, random turns otherwise."""
    if start is None:
        cells = env.walkable_cells()
        start = Pose(cells[rng.integers(len(cells))], HEADINGS[rng.integers(4)])
    poses = [start]
    while len(poses) < n:
        u = rng.random()
        action = Action.MOVE_FORWARD if u < 0.6 else (Action.TURN_LEFT if u < 0.8 else Action.TURN_RIGHT)
        nxt, blocked = step(env, poses[-1], action)
        if blocked:
            nxt, _ = step(env, poses[-1], Action.TURN_LEFT if rng.random() < 0.5 else Action.TURN_RIGHT)
        poses.append(nxt)
    return poses


def random_poses(env: GridEnvironment, n: int, rng: np.random.Generator) -> list[Pose]:
    """``n`` distinct poses drawn uniformly (all of them if fewer exist)."""
    poses = env.poses()
    pick = rng.choice(len(poses), size=min(n, len(poses)), replace=False)
    return [poses[i] for i in pick]


# --------------------------------------------------------------------------- episodes


def rollout_expert(env: GridEnvironment, start: Pose, goal: Cell) -> tuple[list[Action], list[Cell]]:
    dist = distance_map(env, goal)
    pose, actions, cells = start, [], [start.cell]
    while True:
        a = expert_action(pose, dist)
        actions.append(a)
        if a is Action.STOP:
            return actions, cells
        pose, _ = step(env, pose, a)
        if pose.cell != cells[-1]:
            cells.append(pose.cell)


def make_episode(
    seed: int,
    env: GridEnvironment,
    spec: ObservationSpec,
    instr_cfg: InstructionConfig = InstructionConfig(),
) -> Episode:
    from .nav import make_instruction

    if not env.objects:
        raise GenerationError("environment has no objects")
    rng = np.random.default_rng(seed)
    for _ in range(instr_cfg.max_retries):
        target = env.objects[rng.integers(len(env.objects))]
        goal = target.cell
        if not env.is_walkable(goal):
            continue
        dist = distance_map(env, goal)
        starts = sorted(c for c, d in dist.items() if instr_cfg.min_len <= d <= instr_cfg.max_len)
        if not starts:
            continue
        start = Pose(starts[rng.integers(len(starts))], HEADINGS[rng.integers(4)])
        actions, cells = rollout_expert(env, start, goal)
        poses = [start]
        for a in actions[:-1]:
            poses.append(step(env, poses[-1], a)[0])
        instruction = make_instruction(env, poses, target.id, spec, instr_cfg.max_landmarks, rng)
        return Episode(env, start, goal, target.id, instruction, tuple(actions), tuple(cells), seed)
    raise GenerationError(
        f"no (start, goal) pair with distance in [{instr_cfg.min_len}, {instr_cfg.max_len}] "
        f"after {instr_cfg.max_retries} retries"
    )


def episode_to_dict(ep: Episode) -> dict:
    return {
        "seed": ep.seed,
        "env_seed": ep.env.seed,
        "start": {"cell": list(ep.start.cell), "heading": ep.start.heading},
        "goal_cell": list(ep.goal_cell),
        "target_object_id": ep.target_object_id,
        "instruction": list(ep.instruction.tokens),
        "expert_path": [a.name for a in ep.expert_path],
        "expert_cells": [list(c) for c in ep.expert_cells],
    }


def episode_from_dict(d: dict, env: GridEnvironment) -> Episode:
    from .nav import Instruction

    return Episode(
        env=env,
        start=Pose(tuple(d["start"]["cell"]), d["start"]["heading"]),
        goal_cell=tuple(d["goal_cell"]),
        target_object_id=d["target_object_id"],
        instruction=Instruction(tuple(d["instruction"])),
        expert_path=tuple(Action[a] for a in d["expert_path"]),
        expert_cells=tuple(tuple(c) for c in d["expert_cells"]),
        seed=d["seed"],
    )


def dump_dataset(envs: Sequence[GridEnvironment], episodes: Sequence[Episode]) -> str:
    grid, objects = [], []
    for e in envs:
        d = e.to_dict()
        objects.extend({"env_seed": e.seed, **o} for o in d.pop("objects"))
        grid.append(d)
    doc = {
        "version": SCHEMA_VERSION,
        "grid": grid,
        "objects": objects,
        "episodes": [episode_to_dict(ep) for ep in episodes],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def load_dataset(text: str) -> tuple[list[GridEnvironment], list[Episode]]:
    doc = json.loads(text)
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset version {doc.get('version')!r}")
    envs = []
    for g in doc["grid"]:
        objs = [{k: v for k, v in o.items() if k != "env_seed"} for o in doc["objects"] if o["env_seed"] == g["seed"]]
        envs.append(GridEnvironment.from_dict({**g, "objects": objs}))
    by_seed = {e.seed: e for e in envs}
    episodes = [episode_from_dict(d, by_seed[d["env_seed"]]) for d in doc["episodes"]]
    return envs, episodes
