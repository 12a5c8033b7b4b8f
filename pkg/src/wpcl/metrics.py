"""Navigation metrics: TL, NE, SR, SPL, OSR on geodesic grid distances."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envsim import Cell, GridEnvironment, NoPathError, distance_map

CSV_COLUMNS = ("split", "seed", "TL", "NE", "SR", "SPL", "OSR")


@dataclass(frozen=True)
class EpisodeResult:
    visited_cells: tuple[Cell, ...]
    stop_cell: Cell
    goal_cell: Cell
    shortest_len: int
    success_threshold: int = 1
    env: GridEnvironment | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.visited_cells:
            raise ValueError("visited_cells must be non-empty")
        if self.visited_cells[-1] != self.stop_cell:
            raise ValueError("stop_cell must be the last visited cell")


@dataclass(frozen=True)
class MetricsSummary:
    TL: float
    NE: float
    SR: float
    SPL: float
    OSR: float

    def row(self, split: str, seed) -> list:
        return [split, seed, self.TL, self.NE, self.SR, self.SPL, self.OSR]


def _env(r: EpisodeResult, env: GridEnvironment | None) -> GridEnvironment:
    env = env or r.env
    if env is None:
        raise ValueError("an environment is required for geodesic metrics")
    return env


def _goal_distances(env: GridEnvironment, goal: Cell, _cache: dict = {}) -> dict:
    key = (id(env), env.seed, goal)
    hit = _cache.get(key)
    if hit is None or hit[0] is not env:
        if len(_cache) > 4096:
            _cache.clear()
        hit = (env, distance_map(env, goal))
        _cache[key] = hit
    return hit[1]


def trajectory_length(r: EpisodeResult) -> int:
    cells = r.visited_cells
    return sum(1 for a, b in zip(cells, cells[1:]) if a != b)


def geodesic(env: GridEnvironment, a: Cell, goal: Cell) -> int:
    d = _goal_distances(env, goal).get(a)
    if d is None:
        raise NoPathError(f"{a} and {goal} are not connected")
    return d


def nav_error(r: EpisodeResult, env: GridEnvironment | None = None) -> int:
    return geodesic(_env(r, env), r.stop_cell, r.goal_cell)


def success(r: EpisodeResult, env: GridEnvironment | None = None) -> bool:
    return nav_error(r, env) <= r.success_threshold


def spl_episode(r: EpisodeResult, env: GridEnvironment | None = None) -> float:
    if not success(r, env):
        return 0.0
    l, p = r.shortest_len, trajectory_length(r)
    if l == 0:
        return 1.0
    return l / max(p, l)


def oracle_success(r: EpisodeResult, env: GridEnvironment | None = None) -> bool:
    env = _env(r, env)
    dist = _goal_distances(env, r.goal_cell)
    return any(dist.get(c, np.inf) <= r.success_threshold for c in r.visited_cells)


def spl(results: Sequence[EpisodeResult], env: GridEnvironment | None = None) -> float:
    return float(np.mean([spl_episode(r, env) for r in results])) if results else 0.0


def osr(results: Sequence[EpisodeResult], env: GridEnvironment | None = None) -> float:
    return float(np.mean([oracle_success(r, env) for r in results])) if results else 0.0


def summarize(results: Sequence[EpisodeResult], env: GridEnvironment | None = None) -> MetricsSummary:
    if not results:
        return MetricsSummary(0.0, 0.0, 0.0, 0.0, 0.0)
    return MetricsSummary(
        TL=float(np.mean([trajectory_length(r) for r in results])),
        NE=float(np.mean([nav_error(r, env) for r in results])),
        SR=float(np.mean([success(r, env) for r in results])),
        SPL=spl(results, env),
        OSR=osr(results, env),
    )


def per_episode_rows(results: Sequence[EpisodeResult]) -> list[dict]:
    return [
        {
            "episode": i,
            "TL": trajectory_length(r),
            "NE": nav_error(r),
            "success": int(success(r)),
            "SPL": spl_episode(r),
            "oracle_success": int(oracle_success(r)),
        }
        for i, r in enumerate(results)
    ]


def summary_csv(rows: Sequence[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([row[0], row[1], *(f"{v:.6f}" for v in row[2:])])
    return buf.getvalue()
