"""Shared builders for test floorplans and pinned-pose episodes."""

from __future__ import annotations

import numpy as np

from optionex.gridworld import AgentPose, Episode, FloorPlan, Heading, sense
from optionex.mapping import MapStack, integrate_scan


def open_plan(width: int = 16, height: int = 16) -> FloorPlan:
    """A plan that is all free except the border ring."""
    grid = np.zeros((height, width), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return FloorPlan(width=width, height=height, obstacles=grid)


def plan_from_rows(rows: list[str]) -> FloorPlan:
    """Build a plan from '#'/'.' rows, header inferred."""
    width = len(rows[0])
    text = f"{width} {len(rows)}\n" + "\n".join(rows) + "\n"
    return FloorPlan.from_text(text)


def random_soup(
    rng: np.random.Generator, width: int, height: int, p_obstacle: float = 0.25
) -> FloorPlan:
    """Unstructured random obstacle field with a closed border (may be disconnected)."""
    grid = rng.random((height, width)) < p_obstacle
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return FloorPlan(width=width, height=height, obstacles=grid)


def episode_at(
    plan: FloorPlan, x: int, y: int, heading: Heading, budget: int = 1000
) -> tuple[Episode, MapStack]:
    """An episode pinned to a chosen pose, with maps holding its first scan."""
    env = Episode(plan, start_seed=0, budget=budget)
    env.state.pose = AgentPose(x, y, heading)
    env.last_scan = sense(plan, env.state.pose)
    maps = MapStack.fresh(plan.height, plan.width)
    integrate_scan(maps, env.state.pose, env.last_scan)
    return env, maps
