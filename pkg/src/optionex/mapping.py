"""Online exploration bookkeeping built from depth scans.

Five binary channels describe what the agent knows so far: ``occupancy``
(observed obstacle cells), ``explored`` (every observed cell), ``trajectory``
(cells the agent has occupied), ``current_location`` (exactly one cell), and
``frontier`` (explored free cells bordering unexplored space).  Stacked, the
channels are the map half of the policy input.

Coverage is the fraction of the plan's observable cells seen so far, and the
per-step reward is the increment of that fraction.  Counts are kept as exact
integers so reward sums telescope to the coverage delta without drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .gridworld import AgentPose, DepthScan, FloorPlan

CHANNEL_NAMES = ("occupancy", "explored", "trajectory", "current_location", "frontier")


@dataclass
class MapStack:
    """The five online map channels, all (height, width) bool."""

    occupancy: np.ndarray
    explored: np.ndarray
    trajectory: np.ndarray
    current_location: np.ndarray
    frontier: np.ndarray

    @classmethod
    def fresh(cls, height: int, width: int) -> "MapStack":
        z = lambda: np.zeros((height, width), dtype=bool)
        return cls(z(), z(), z(), z(), z())

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    def channels(self) -> tuple[np.ndarray, ...]:
        return (
            self.occupancy,
            self.explored,
            self.trajectory,
            self.current_location,
            self.frontier,
        )

    def as_features(self) -> np.ndarray:
        """Channels stacked as a (5, height, width) float array for the nets."""
        return np.stack(self.channels()).astype(np.float64)

    def copy(self) -> "MapStack":
        return MapStack(*(c.copy() for c in self.channels()))

    def validate(self) -> None:
        shape = self.occupancy.shape
        for name, c in zip(CHANNEL_NAMES, self.channels()):
            if c.shape != shape or c.dtype != np.bool_:
                raise ValueError(f"channel {name} has wrong shape or dtype")
        if (self.occupancy & ~self.explored).any():
            raise ValueError("occupancy must be a subset of explored")
        if (self.trajectory & ~self.explored).any():
            raise ValueError("trajectory must be a subset of explored")
        if (self.trajectory & self.occupancy).any():
            raise ValueError("trajectory must not intersect occupancy")
        if int(self.current_location.sum()) != 1:
            raise ValueError("current_location must have exactly one set cell")
        if not self.trajectory[self.current_location].all():
            raise ValueError("current location must be on the trajectory")
        if (self.frontier & self.occupancy).any() or (self.frontier & ~self.explored).any():
            raise ValueError("frontier must be explored and obstacle-free")


@dataclass(frozen=True)
class CoverageStats:
    explored_count: int
    total_area: int

    @property
    def coverage(self) -> float:
        return self.explored_count / self.total_area


def compute_frontier(explored: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """Explored, non-obstacle cells with at least one unexplored 4-neighbor.

    Pure bitwise composition of shifted masks; cells beyond the grid edge do
    not count as unexplored neighbors.
    """
    unexplored = ~explored
    near = np.zeros_like(explored)
    near[:, :-1] |= unexplored[:, 1:]
    near[:, 1:] |= unexplored[:, :-1]
    near[:-1, :] |= unexplored[1:, :]
    near[1:, :] |= unexplored[:-1, :]
    return explored & ~occupancy & near


def integrate_scan(maps: MapStack, pose: AgentPose, scan: DepthScan) -> MapStack:
    """Fold one scan into the maps (in place) and return them.

    Explored, occupancy, and trajectory bits are only ever set, never
    cleared; current_location moves to the pose cell; the frontier channel
    is recomputed from scratch.
    """
    if len(scan.free_cells):
        maps.explored[scan.free_cells[:, 1], scan.free_cells[:, 0]] = True
    if len(scan.obstacle_cells):
        maps.explored[scan.obstacle_cells[:, 1], scan.obstacle_cells[:, 0]] = True
        maps.occupancy[scan.obstacle_cells[:, 1], scan.obstacle_cells[:, 0]] = True
    maps.explored[pose.y, pose.x] = True
    maps.trajectory[pose.y, pose.x] = True
    maps.current_location.fill(False)
    maps.current_location[pose.y, pose.x] = True
    maps.frontier = compute_frontier(maps.explored, maps.occupancy)
    return maps


def explored_count(maps: MapStack, plan: FloorPlan) -> int:
    """Exact number of observable plan cells marked explored."""
    if (maps.height, maps.width) != (plan.height, plan.width):
        raise DimensionMismatch(
            f"maps are {maps.height}x{maps.width}, plan is {plan.height}x{plan.width}"
        )
    return int(np.count_nonzero(maps.explored & plan.observable_mask()))


def coverage(maps: MapStack, plan: FloorPlan) -> CoverageStats:
    """Coverage of the plan's observable cells by the explored channel."""
    return CoverageStats(
        explored_count=explored_count(maps, plan), total_area=plan.total_area
    )


def coverage_reward(prev: CoverageStats, nxt: CoverageStats) -> float:
    """Coverage increment as a ratio of the total observable area."""
    if prev.total_area != nxt.total_area:
        raise ValueError("coverage stats compare different scenes")
    if nxt.explored_count < prev.explored_count:
        raise ValueError("explored count decreased")
    return (nxt.explored_count - prev.explored_count) / nxt.total_area


def dump_map_stack(maps: MapStack) -> str:
    """All five channels in the floorplan text format, channel name in each header."""
    blocks = []
    for name, channel in zip(CHANNEL_NAMES, maps.channels()):
        lines = [f"{name} {maps.width} {maps.height}"]
        for y in range(maps.height):
            lines.append("".join("#" if channel[y, x] else "." for x in range(maps.width)))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def load_map_stack(text: str) -> MapStack:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    channels: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3:
            raise ValueError(f"bad channel header {lines[i]!r}")
        name, width, height = parts[0], int(parts[1]), int(parts[2])
        if name not in CHANNEL_NAMES:
            raise ValueError(f"unknown channel {name!r}")
        rows = lines[i + 1 : i + 1 + height]
        if len(rows) != height:
            raise ValueError(f"channel {name} is truncated")
        grid = np.zeros((height, width), dtype=bool)
        for y, row in enumerate(rows):
            if len(row) != width:
                raise ValueError(f"channel {name} row {y} has wrong length")
            grid[y] = [ch == "#" for ch in row]
        channels[name] = grid
        i += 1 + height
    missing = [n for n in CHANNEL_NAMES if n not in channels]
    if missing:
        raise ValueError(f"missing channels: {missing}")
    return MapStack(**{n: channels[n] for n in CHANNEL_NAMES})
