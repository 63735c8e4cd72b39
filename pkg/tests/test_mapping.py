"""Map bookkeeping tests: frontier oracle, replay oracle, exact reward telescoping."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import open_plan, plan_from_rows
from optionex.errors import DimensionMismatch
from optionex.gridworld import (
    AgentPose,
    AtomicAction,
    Heading,
    generate_floorplan,
    reset,
    sense,
    step,
)
from optionex.mapping import (
    CHANNEL_NAMES,
    CoverageStats,
    MapStack,
    compute_frontier,
    coverage,
    coverage_reward,
    dump_map_stack,
    explored_count,
    integrate_scan,
    load_map_stack,
)


def frontier_oracle(explored: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """Per-cell transliteration of the frontier definition."""
    h, w = explored.shape
    out = np.zeros_like(explored)
    for y in range(h):
        for x in range(w):
            if not explored[y, x] or occupancy[y, x]:
                continue
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if 0 <= nx < w and 0 <= ny < h and not explored[ny, nx]:
                    out[y, x] = True
                    break
    return out


def random_mask_pair(rng: np.random.Generator, h: int, w: int):
    explored = rng.random((h, w)) < rng.uniform(0.1, 0.9)
    occupancy = explored & (rng.random((h, w)) < 0.3)
    return explored, occupancy


# ---------------------------------------------------------------------------
# Frontier
# ---------------------------------------------------------------------------


def test_frontier_empty_when_nothing_explored():
    z = np.zeros((8, 8), dtype=bool)
    assert not compute_frontier(z, z).any()


def test_frontier_empty_when_fully_explored():
    ones = np.ones((8, 8), dtype=bool)
    occ = np.zeros((8, 8), dtype=bool)
    assert not compute_frontier(ones, occ).any()


def test_frontier_column_boundary():
    explored = np.zeros((5, 5), dtype=bool)
    explored[:, 0:2] = True
    occ = np.zeros((5, 5), dtype=bool)
    frontier = compute_frontier(explored, occ)
    expect = np.zeros((5, 5), dtype=bool)
    expect[:, 1] = True
    assert np.array_equal(frontier, expect)


def test_frontier_matches_oracle_on_random_masks():
    rng = np.random.default_rng(7)
    for _ in range(200):
        explored, occupancy = random_mask_pair(rng, 32, 32)
        got = compute_frontier(explored, occupancy)
        assert np.array_equal(got, frontier_oracle(explored, occupancy))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 12), w=st.integers(1, 12))
def test_frontier_structural_invariants(seed, h, w):
    rng = np.random.default_rng(seed)
    explored, occupancy = random_mask_pair(rng, h, w)
    frontier = compute_frontier(explored, occupancy)
    assert not (frontier & occupancy).any()
    assert not (frontier & ~explored).any()


# ---------------------------------------------------------------------------
# Scan integration
# ---------------------------------------------------------------------------


def _fresh_with_reset(plan, seed=0, budget=400):
    state, scan = reset(plan, start_seed=seed, budget=budget)
    maps = MapStack.fresh(plan.height, plan.width)
    integrate_scan(maps, state.pose, scan)
    return state, scan, maps


def test_walled_in_scan_explores_five_cells():
    plan = plan_from_rows(
        [
            "#####",
            "#####",
            "##.##",
            "#####",
            "#####",
        ]
    )
    pose = AgentPose(2, 2, Heading.N)
    scan = sense(plan, pose, fov_deg=360.0)
    maps = MapStack.fresh(5, 5)
    integrate_scan(maps, pose, scan)
    assert int(maps.explored.sum()) == 5
    assert int(maps.occupancy.sum()) == 4
    assert maps.explored[2, 2] and maps.trajectory[2, 2] and maps.current_location[2, 2]
    maps.validate()


def test_integrating_same_scan_twice_is_idempotent():
    plan = generate_floorplan(seed=1, width=32, height=32)
    state, scan, maps = _fresh_with_reset(plan)
    before = explored_count(maps, plan)
    integrate_scan(maps, state.pose, scan)
    assert explored_count(maps, plan) == before


def test_replay_oracle_and_monotone_maps():
    plan = generate_floorplan(seed=12, width=32, height=32)
    state, scan, maps = _fresh_with_reset(plan, seed=3)
    seen: set[tuple[int, int]] = {state.pose.cell}
    seen |= {(int(x), int(y)) for x, y in scan.free_cells}
    seen |= {(int(x), int(y)) for x, y in scan.obstacle_cells}
    visited = {state.pose.cell}
    rng = np.random.default_rng(99)
    prev_cov = coverage(maps, plan)
    actions = list(AtomicAction)
    for t in range(200):
        prev_explored = maps.explored.copy()
        prev_occ = maps.occupancy.copy()
        prev_traj = maps.trajectory.copy()
        state, scan, _ = step(state, plan, actions[rng.integers(3)])
        integrate_scan(maps, state.pose, scan)
        seen.add(state.pose.cell)
        seen |= {(int(x), int(y)) for x, y in scan.free_cells}
        seen |= {(int(x), int(y)) for x, y in scan.obstacle_cells}
        visited.add(state.pose.cell)
        # monotone: no bit cleared
        assert not (prev_explored & ~maps.explored).any()
        assert not (prev_occ & ~maps.occupancy).any()
        assert not (prev_traj & ~maps.trajectory).any()
        cov = coverage(maps, plan)
        assert cov.explored_count >= prev_cov.explored_count
        prev_cov = cov
        if t % 20 == 0:
            maps.validate()
    got = {(x, y) for y, x in np.argwhere(maps.explored)}
    assert got == seen
    assert {(x, y) for y, x in np.argwhere(maps.trajectory)} == visited
    assert maps.current_location[state.pose.y, state.pose.x]


def test_reward_telescopes_exactly():
    plan = generate_floorplan(seed=5, width=32, height=32)
    state, _, maps = _fresh_with_reset(plan, seed=8)
    stats = [coverage(maps, plan)]
    rng = np.random.default_rng(4)
    actions = list(AtomicAction)
    for _ in range(150):
        state, scan, _ = step(state, plan, actions[rng.integers(3)])
        integrate_scan(maps, state.pose, scan)
        stats.append(coverage(maps, plan))
    rewards = [coverage_reward(a, b) for a, b in zip(stats, stats[1:])]
    assert all(r >= 0.0 for r in rewards)
    int_deltas = [b.explored_count - a.explored_count for a, b in zip(stats, stats[1:])]
    assert sum(int_deltas) == stats[-1].explored_count - stats[0].explored_count
    assert abs(sum(rewards) - (stats[-1].coverage - stats[0].coverage)) < 1e-12


# ---------------------------------------------------------------------------
# Coverage accounting
# ---------------------------------------------------------------------------


def test_initial_coverage_counts_first_scan():
    plan = generate_floorplan(seed=2, width=32, height=32)
    state, scan, maps = _fresh_with_reset(plan)
    cells = {state.pose.cell}
    cells |= {(int(x), int(y)) for x, y in scan.free_cells}
    cells |= {(int(x), int(y)) for x, y in scan.obstacle_cells}
    cov = coverage(maps, plan)
    assert cov.explored_count == len(cells)
    assert cov.coverage == len(cells) / plan.total_area


def test_full_exploration_reaches_one():
    plan = open_plan(8, 8)
    maps = MapStack.fresh(8, 8)
    maps.explored |= plan.observable_mask()
    assert coverage(maps, plan).coverage == 1.0


def test_dimension_mismatch_raises():
    plan = open_plan(8, 8)
    maps = MapStack.fresh(16, 16)
    with pytest.raises(DimensionMismatch):
        coverage(maps, plan)


def test_coverage_reward_examples():
    a = CoverageStats(explored_count=100, total_area=400)
    assert coverage_reward(a, a) == 0.0
    assert coverage_reward(
        CoverageStats(0, 400), CoverageStats(400, 400)
    ) == 1.0
    assert coverage_reward(CoverageStats(100, 400), CoverageStats(130, 400)) == 0.075
    with pytest.raises(ValueError):
        coverage_reward(CoverageStats(10, 400), CoverageStats(5, 400))
    with pytest.raises(ValueError):
        coverage_reward(CoverageStats(10, 400), CoverageStats(20, 500))


# ---------------------------------------------------------------------------
# Snapshot dump format
# ---------------------------------------------------------------------------


def test_map_dump_roundtrip():
    plan = generate_floorplan(seed=6, width=32, height=32)
    state, _, maps = _fresh_with_reset(plan)
    rng = np.random.default_rng(1)
    actions = list(AtomicAction)
    for _ in range(60):
        state, scan, _ = step(state, plan, actions[rng.integers(3)])
        integrate_scan(maps, state.pose, scan)
    text = dump_map_stack(maps)
    for name in CHANNEL_NAMES:
        assert f"{name} 32 32" in text
    back = load_map_stack(text)
    for a, b in zip(maps.channels(), back.channels()):
        assert np.array_equal(a, b)


def test_map_load_errors():
    with pytest.raises(ValueError):
        load_map_stack("bogus 4\n....\n")
    with pytest.raises(ValueError):
        load_map_stack("occupancy 4 4\n....\n....\n")  # truncated
    maps = MapStack.fresh(4, 4)
    text = dump_map_stack(maps).replace("frontier 4 4", "mystery 4 4")
    with pytest.raises(ValueError):
        load_map_stack(text)
