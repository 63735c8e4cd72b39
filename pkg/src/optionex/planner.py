"""Grid path planning and the two macro-action executors.

Paths are planned on the agent's own map knowledge, not the ground truth:
known obstacle cells block, everything else (including unexplored space) is
optimistically traversable.  Costs are uniform, so a wavefront expansion from
the goal gives exact cost-to-go and the path is extracted by steepest descent
with the fixed neighbor order E, N, W, S.

A navigation macro walks the path one atomic action at a time, folding every
scan into the maps, and replans whenever a newly observed obstacle lands on
the remaining path.  A look-around macro is a quarter-turn sequence.  Both
return a transcript whose reward is the coverage gained while they ran.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidGoal, UnreachableGoal
from .gridworld import AgentPose, AtomicAction, Episode, FloorPlan, Heading
from .mapping import MapStack, explored_count, integrate_scan

DEFAULT_MACRO_BUDGET = 50
LOOKAROUND_ANGLES = (90, 180, 270, 360)

# neighbor order fixes all planning tie-breaks
_NEIGHBOR_ORDER = (Heading.E, Heading.N, Heading.W, Heading.S)

StepCallback = Callable[["object", MapStack], None]


@dataclass
class Path:
    """A shortest 4-connected route over the planning map."""

    cells: list[tuple[int, int]]

    @property
    def length(self) -> int:
        return len(self.cells) - 1


@dataclass
class MacroTranscript:
    """Record of one executed macro-action."""

    actions: list[AtomicAction]
    reward: float
    terminal_state_reached: bool
    aborted: bool = False
    cells_gained: int = 0

    @property
    def steps_used(self) -> int:
        return len(self.actions)


def wavefront_distances(occupancy: np.ndarray, goal: tuple[int, int]) -> np.ndarray:
    """Uniform-cost distance-to-goal over non-obstacle cells; -1 = unreachable."""
    h, w = occupancy.shape
    gx, gy = goal
    dist = np.full((h, w), -1, dtype=np.int64)
    traversable = ~occupancy
    frontier = np.zeros((h, w), dtype=bool)
    frontier[gy, gx] = True
    dist[gy, gx] = 0
    d = 0
    while frontier.any():
        d += 1
        grown = np.zeros_like(frontier)
        grown[:, :-1] |= frontier[:, 1:]
        grown[:, 1:] |= frontier[:, :-1]
        grown[:-1, :] |= frontier[1:, :]
        grown[1:, :] |= frontier[:-1, :]
        grown &= traversable & (dist < 0)
        dist[grown] = d
        frontier = grown
    return dist


def plan_path(
    occupancy: np.ndarray,
    explored: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
) -> Path:
    """Shortest path from start to goal over cells not known to be obstacles.

    Unexplored cells are traversable (optimistic planning); the ``explored``
    channel is accepted for interface symmetry but does not restrict motion.
    Raises InvalidGoal when the goal is out of bounds or a known obstacle,
    UnreachableGoal when no path exists.
    """
    h, w = occupancy.shape
    sx, sy = start
    gx, gy = goal
    if not (0 <= gx < w and 0 <= gy < h):
        raise InvalidGoal(f"goal {goal} is outside the {w}x{h} map")
    if occupancy[gy, gx]:
        raise InvalidGoal(f"goal {goal} is a known obstacle")
    if not (0 <= sx < w and 0 <= sy < h) or occupancy[sy, sx]:
        raise ValueError(f"start {start} is not a traversable cell")
    if start == goal:
        return Path(cells=[start])

    dist = wavefront_distances(occupancy, goal)
    if dist[sy, sx] < 0:
        raise UnreachableGoal(f"no path from {start} to {goal}")

    cells = [start]
    x, y = start
    while (x, y) != (gx, gy):
        want = dist[y, x] - 1
        for heading in _NEIGHBOR_ORDER:
            dx, dy = heading.vector
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and dist[ny, nx] == want:
                x, y = nx, ny
                break
        else:  # pragma: no cover - wavefront guarantees a descent neighbor
            raise UnreachableGoal(f"descent stalled at {(x, y)}")
        cells.append((x, y))
    return Path(cells=cells)


def turn_toward(heading: Heading, desired: Heading) -> AtomicAction | None:
    """The single atomic that rotates ``heading`` toward ``desired``.

    None when already aligned; a 180-degree difference resolves to TurnLeft.
    """
    diff = (int(desired) - int(heading)) % 4
    if diff == 0:
        return None
    return AtomicAction.TURN_RIGHT if diff == 3 else AtomicAction.TURN_LEFT


def _heading_between(a: tuple[int, int], b: tuple[int, int]) -> Heading:
    delta = (b[0] - a[0], b[1] - a[1])
    for heading in Heading:
        if heading.vector == delta:
            return heading
    raise ValueError(f"cells {a} and {b} are not 4-adjacent")


def execute_navigation(
    env: Episode,
    plan: FloorPlan,
    maps: MapStack,
    goal: tuple[int, int],
    budget: int = DEFAULT_MACRO_BUDGET,
    on_step: StepCallback | None = None,
) -> MacroTranscript:
    """Drive the agent toward ``goal``, replanning around newly seen obstacles.

    Stops when the goal cell is reached, the step budget (or the episode's
    remaining budget) runs out, or the goal becomes known-unreachable; an
    unreachable or newly occupied goal aborts the macro, keeping whatever
    reward was earned on the way.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    gx, gy = goal
    start_count = explored_count(maps, plan)
    actions: list[AtomicAction] = []
    reached = False
    aborted = False
    pending: deque[tuple[int, int]] | None = None

    while True:
        if env.pose.cell == (gx, gy):
            reached = True
            break
        if len(actions) >= budget or env.steps_left == 0:
            break
        if maps.occupancy[gy, gx]:
            aborted = True
            break
        if pending is not None and any(maps.occupancy[y, x] for x, y in pending):
            pending = None  # a discovered obstacle invalidated the rest of the path
        if pending is None:
            try:
                path = plan_path(maps.occupancy, maps.explored, env.pose.cell, goal)
            except UnreachableGoal:
                aborted = True
                break
            pending = deque(path.cells[1:])
        nxt = pending[0]
        action = turn_toward(env.pose.heading, _heading_between(env.pose.cell, nxt))
        if action is None:
            action = AtomicAction.MOVE_FORWARD
        scan, collided = env.step(action)
        integrate_scan(maps, env.pose, scan)
        actions.append(action)
        if on_step is not None:
            on_step(env.state, maps)
        if action is AtomicAction.MOVE_FORWARD:
            if collided:
                pending = None  # stale plan; next loop replans from the map
            else:
                pending.popleft()

    gained = explored_count(maps, plan) - start_count
    return MacroTranscript(
        actions=actions,
        reward=gained / plan.total_area,
        terminal_state_reached=reached,
        aborted=aborted,
        cells_gained=gained,
    )


def execute_lookaround(
    env: Episode,
    plan: FloorPlan,
    maps: MapStack,
    angle: int,
    budget: int = DEFAULT_MACRO_BUDGET,
    on_step: StepCallback | None = None,
) -> MacroTranscript:
    """Rotate in place by ``angle`` degrees as quarter turns, integrating scans.

    The rotation stops early only if the episode's own step budget runs out
    first; the macro budget always suffices for the discrete angle set.
    """
    if angle not in LOOKAROUND_ANGLES:
        raise ValueError(f"angle must be one of {LOOKAROUND_ANGLES}")
    n_turns = angle // 90
    if budget < n_turns:
        raise ValueError(f"budget {budget} cannot fit {n_turns} quarter turns")
    start_count = explored_count(maps, plan)
    actions: list[AtomicAction] = []
    for _ in range(n_turns):
        if env.steps_left == 0:
            break
        scan, _ = env.step(AtomicAction.TURN_LEFT)
        integrate_scan(maps, env.pose, scan)
        actions.append(AtomicAction.TURN_LEFT)
        if on_step is not None:
            on_step(env.state, maps)
    gained = explored_count(maps, plan) - start_count
    return MacroTranscript(
        actions=actions,
        reward=gained / plan.total_area,
        terminal_state_reached=len(actions) == n_turns,
        aborted=False,
        cells_gained=gained,
    )
