import csv
import heapq
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grid
from wpcl.envsim import NoPathError, generate_environment, random_walk, shortest_path
from wpcl.metrics import (
    CSV_COLUMNS,
    EpisodeResult,
    nav_error,
    osr,
    oracle_success,
    per_episode_rows,
    spl,
    spl_episode,
    success,
    summarize,
    summary_csv,
    trajectory_length,
)

OPEN = grid(["......", "......", "......"])


def result(cells, goal, env=OPEN, shortest=None, threshold=1):
    cells = tuple(cells)
    if shortest is None:
        shortest = len(shortest_path(env, cells[0], goal)) - 1
    return EpisodeResult(cells, cells[-1], goal, shortest, threshold, env)


def dijkstra(env, a, b):
    best, heap = {a: 0}, [(0, a)]
    while heap:
        d, c = heapq.heappop(heap)
        if c == b:
            return d
        if d > best[c]:
            continue
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (c[0] + dx, c[1] + dy)
            if env.is_walkable(n) and d + 1 < best.get(n, 1 << 30):
                best[n] = d + 1
                heapq.heappush(heap, (d + 1, n))
    return None


def random_results(seed, n=8, threshold=1):
    rng = np.random.default_rng(seed)
    env = generate_environment(int(rng.integers(1000)), 7, 6, num_objects=2)
    cells = env.walkable_cells()
    out = []
    for _ in range(n):
        walk = [p.cell for p in random_walk(env, int(rng.integers(1, 15)), rng)]
        goal = cells[rng.integers(len(cells))]
        shortest = len(shortest_path(env, walk[0], goal)) - 1
        out.append(EpisodeResult(tuple(walk), walk[-1], goal, shortest, threshold, env))
    return env, out


def test_trajectory_length_examples():
    assert trajectory_length(result([(0, 0)], (0, 0))) == 0
    assert trajectory_length(result([(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0)], (5, 0))) == 5
    # repeated cells (turns) add nothing
    assert trajectory_length(result([(0, 0), (0, 0), (1, 0), (1, 0), (1, 1)], (1, 1))) == 2


@pytest.mark.parametrize("seed", range(20))
def test_trajectory_length_recount(seed):
    _, results = random_results(seed)
    for r in results:
        recount = 0
        for i in range(1, len(r.visited_cells)):
            recount += r.visited_cells[i] != r.visited_cells[i - 1]
        assert trajectory_length(r) == recount


def test_nav_error_and_success_examples():
    assert nav_error(result([(2, 1)], (2, 1))) == 0
    assert nav_error(result([(2, 1)], (3, 1))) == 1
    assert success(result([(2, 1)], (2, 1), threshold=1))
    assert not success(result([(2, 1)], (4, 1), threshold=1))


def test_nav_error_is_geodesic_not_euclidean():
    env = grid([".#.", ".#.", "..."])
    r = result([(0, 0)], (2, 0), env=env)
    assert nav_error(r) == 6


def test_disconnected_raises():
    env = grid([".#."])
    with pytest.raises(NoPathError):
        nav_error(EpisodeResult(((0, 0),), (0, 0), (2, 0), 0, 1, env))


def test_result_invariants():
    with pytest.raises(ValueError):
        EpisodeResult((), (0, 0), (0, 0), 0)
    with pytest.raises(ValueError):
        EpisodeResult(((0, 0), (1, 0)), (0, 0), (0, 0), 0)


def test_nav_error_matches_dijkstra_200_cases():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 200:
        env = generate_environment(int(rng.integers(10_000)), 9, 8, num_objects=2, wall_density=0.25)
        cells = env.walkable_cells()
        for _ in range(20):
            a, b = cells[rng.integers(len(cells))], cells[rng.integers(len(cells))]
            assert nav_error(EpisodeResult((a,), a, b, 0, 1, env)) == dijkstra(env, a, b)
            checked += 1


def test_spl_examples():
    straight = [(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0)]
    assert spl_episode(result(straight, (5, 0))) == 1.0
    detour = [(0, 0), (0, 1), (1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (5, 0)]
    r = EpisodeResult(tuple(detour), (5, 0), (5, 0), 5, 1, OPEN)
    assert trajectory_length(r) == 7
    assert spl_episode(r) == pytest.approx(5 / 7)
    # p=12, l=10
    env = grid(["." * 12, "." * 12])
    path = [(x, 0) for x in range(11)]
    long = path[:1] + [(0, 1)] + [(x, 1) for x in range(1, 11)] + [(10, 0)]
    r = EpisodeResult(tuple(long), (10, 0), (10, 0), 10, 1, env)
    assert trajectory_length(r) == 12
    assert spl_episode(r) == pytest.approx(10 / 12, abs=1e-12)
    assert spl_episode(result([(0, 0)], (5, 0))) == 0.0


def test_spl_zero_shortest_counts_success():
    assert spl_episode(EpisodeResult(((1, 1),), (1, 1), (1, 1), 0, 1, OPEN)) == 1.0
    # start in the goal, wanders and comes back: still 1
    r = EpisodeResult(((1, 1), (2, 1), (1, 1)), (1, 1), (1, 1), 0, 1, OPEN)
    assert spl_episode(r) == 1.0


def test_osr_counts_pass_through():
    r = result([(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0)], (1, 0), threshold=0)
    assert oracle_success(r) and not success(r)
    assert osr([r]) == 1.0
    assert summarize([r]).SR == 0.0


@pytest.mark.parametrize("seed", range(30))
def test_osr_matches_cell_scan(seed):
    env, results = random_results(seed)
    for r in results:
        scan = any(dijkstra(env, c, r.goal_cell) <= r.success_threshold for c in r.visited_cells)
        assert oracle_success(r) == scan


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_ordering_chain(seed, threshold):
    _, results = random_results(seed, threshold=threshold)
    for r in results:
        assert 0 <= spl_episode(r) <= success(r) <= oracle_success(r) <= 1
    s = summarize(results)
    assert 0 <= s.SPL <= s.SR <= s.OSR <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_reorder_invariance(seed, shuffler):
    _, results = random_results(seed)
    perm = list(results)
    shuffler.shuffle(perm)
    a, b = summarize(results), summarize(perm)
    for k in ("TL", "NE", "SR", "SPL", "OSR"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_success_monotone_in_threshold(seed):
    _, base = random_results(seed, n=12)
    prev_sr, prev_osr = -1.0, -1.0
    for t in range(0, 8):
        res = [EpisodeResult(r.visited_cells, r.stop_cell, r.goal_cell, r.shortest_len, t, r.env) for r in base]
        s = summarize(res)
        assert s.SR >= prev_sr and s.OSR >= prev_osr
        prev_sr, prev_osr = s.SR, s.OSR


def test_expert_paths_have_spl_equal_sr():
    env = generate_environment(3)
    cells = env.walkable_cells()
    rng = np.random.default_rng(0)
    res = []
    for _ in range(50):
        a, b = cells[rng.integers(len(cells))], cells[rng.integers(len(cells))]
        path = shortest_path(env, a, b)
        res.append(EpisodeResult(tuple(path), path[-1], b, len(path) - 1, 1, env))
    assert spl(res) == summarize(res).SR == 1.0


def test_empty_summary():
    s = summarize([])
    assert (s.TL, s.NE, s.SR, s.SPL, s.OSR) == (0.0,) * 5


def test_csv_schema():
    _, results = random_results(0)
    s = summarize(results)
    text = summary_csv([s.row("val_unseen", 3)])
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_COLUMNS == ("split", "seed", "TL", "NE", "SR", "SPL", "OSR")
    assert rows[1][:2] == ["val_unseen", "3"]
    assert float(rows[1][5]) == pytest.approx(s.SPL, abs=1e-6)


def test_per_episode_rows():
    _, results = random_results(1, n=4)
    rows = per_episode_rows(results)
    assert [r["episode"] for r in rows] == [0, 1, 2, 3]
    assert all(r["TL"] == trajectory_length(x) for r, x in zip(rows, results))
