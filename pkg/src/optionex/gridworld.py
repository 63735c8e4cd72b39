"""Deterministic seeded 2D grid environment with raycast depth sensing.

Coordinate conventions used everywhere in this package:

- A cell is addressed as ``(x, y)`` with ``x`` the column and ``y`` the row;
  arrays are indexed ``a[y, x]``.
- Headings are quantized to 90 degrees: E = +x, N = -y, W = -x, S = +y
  (north is "up" when a grid is printed row by row).
- ``TurnLeft`` rotates counterclockwise (E -> N -> W -> S), ``TurnRight``
  clockwise, ``MoveForward`` advances one cell along the heading if that
  cell is free, otherwise the pose is unchanged and the step reports a
  collision.

Depth sensing casts rays by supercover grid traversal: every cell the ray
segment touches is visited, in order of entry distance.  When a ray passes
exactly through a cell corner, both side cells are visited (x-step side
first, then y-step side, then the diagonal cell), so obstacles meeting
diagonally cannot be leaked through.  A ray is truncated to cells whose
center lies within ``max_range`` (Euclidean, in cell units) of the agent
cell center and stops at the first obstacle cell it touches.  That
obstacle cell is part of the observation; its reported hit distance is
the center-to-center distance from the agent cell.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import EpisodeOver, GenerationFailed

DEFAULT_FOV_DEG = 90.0
DEFAULT_MAX_RANGE = 10
DEFAULT_N_RAYS = 64
DEFAULT_EPISODE_BUDGET = 1000


class Heading(enum.IntEnum):
    E = 0
    N = 1
    W = 2
    S = 3

    @property
    def angle_deg(self) -> float:
        return 90.0 * int(self)

    @property
    def vector(self) -> tuple[int, int]:
        return _HEADING_VECTORS[int(self)]

    def turn_left(self) -> "Heading":
        return Heading((int(self) + 1) % 4)

    def turn_right(self) -> "Heading":
        return Heading((int(self) - 1) % 4)


_HEADING_VECTORS = ((1, 0), (0, -1), (-1, 0), (0, 1))


class AtomicAction(enum.Enum):
    TURN_LEFT = "L"
    TURN_RIGHT = "R"
    MOVE_FORWARD = "F"


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: Heading

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass
class GenParams:
    """Knobs for the rooms-plus-corridors floorplan generator."""

    n_rooms: int = 12
    min_room_size: int = 5
    max_room_size: int = 11
    extra_corridors: int = 3
    max_attempts: int = 25
    placement_tries: int = 40

    def validate(self) -> None:
        if self.n_rooms < 1:
            raise ValueError("n_rooms must be >= 1")
        if self.min_room_size < 3:
            raise ValueError("min_room_size must be >= 3")
        if self.max_room_size < self.min_room_size:
            raise ValueError("max_room_size must be >= min_room_size")
        if self.max_attempts < 1 or self.placement_tries < 1:
            raise ValueError("retry budgets must be >= 1")


@dataclass
class FloorPlan:
    """Ground-truth world: a closed grid of free and obstacle cells.

    ``obstacles[y, x]`` is True for obstacle cells.  The observable set is
    every free cell plus every obstacle cell 4-adjacent to a free cell;
    its size is the denominator of all coverage ratios.
    """

    width: int
    height: int
    obstacles: np.ndarray  # (height, width) bool

    def __post_init__(self) -> None:
        self.obstacles = np.asarray(self.obstacles, dtype=bool)
        if self.obstacles.shape != (self.height, self.width):
            raise ValueError("obstacle grid shape does not match width/height")
        self._observable: np.ndarray | None = None

    @property
    def free_mask(self) -> np.ndarray:
        return ~self.obstacles

    def is_free(self, x: int, y: int) -> bool:
        return bool(
            0 <= x < self.width and 0 <= y < self.height and not self.obstacles[y, x]
        )

    def observable_mask(self) -> np.ndarray:
        # cached; plans are immutable after construction
        if self._observable is None:
            free = self.free_mask
            near_free = np.zeros_like(free)
            near_free[:, :-1] |= free[:, 1:]
            near_free[:, 1:] |= free[:, :-1]
            near_free[:-1, :] |= free[1:, :]
            near_free[1:, :] |= free[:-1, :]
            self._observable = free | (self.obstacles & near_free)
        return self._observable

    @property
    def total_area(self) -> int:
        return int(np.count_nonzero(self.observable_mask()))

    def validate(self) -> None:
        border = np.concatenate(
            [
                self.obstacles[0, :],
                self.obstacles[-1, :],
                self.obstacles[:, 0],
                self.obstacles[:, -1],
            ]
        )
        if not border.all():
            raise ValueError("border cells must all be obstacles")
        free = self.free_mask
        n_free = int(np.count_nonzero(free))
        if n_free == 0:
            raise ValueError("plan has no free cells")
        if flood_fill_count(free) != n_free:
            raise ValueError("free region is not 4-connected")

    def to_text(self) -> str:
        lines = [f"{self.width} {self.height}"]
        for y in range(self.height):
            lines.append(
                "".join("#" if self.obstacles[y, x] else "." for x in range(self.width))
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FloorPlan":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty floorplan text")
        try:
            width, height = (int(tok) for tok in lines[0].split())
        except Exception as exc:
            raise ValueError(f"bad floorplan header {lines[0]!r}") from exc
        rows = lines[1:]
        if len(rows) != height:
            raise ValueError(f"expected {height} rows, got {len(rows)}")
        grid = np.zeros((height, width), dtype=bool)
        for y, row in enumerate(rows):
            if len(row) != width:
                raise ValueError(f"row {y} has length {len(row)}, expected {width}")
            for x, ch in enumerate(row):
                if ch == "#":
                    grid[y, x] = True
                elif ch != ".":
                    raise ValueError(f"bad character {ch!r} at row {y}")
        return cls(width=width, height=height, obstacles=grid)


def flood_fill_count(free: np.ndarray) -> int:
    """Number of free cells reachable (4-connected) from the first free cell."""
    seeds = np.argwhere(free)
    if len(seeds) == 0:
        return 0
    reached = np.zeros_like(free)
    reached[seeds[0][0], seeds[0][1]] = True
    while True:
        grown = reached.copy()
        grown[:, :-1] |= reached[:, 1:]
        grown[:, 1:] |= reached[:, :-1]
        grown[:-1, :] |= reached[1:, :]
        grown[1:, :] |= reached[:-1, :]
        grown &= free
        if (grown == reached).all():
            return int(np.count_nonzero(reached))
        reached = grown


def generate_floorplan(
    seed: int, width: int, height: int, gen_params: GenParams | None = None
) -> FloorPlan:
    """Generate a closed, 4-connected rooms-and-corridors floorplan.

    Identical ``(seed, width, height, gen_params)`` always produce an
    identical plan.  Raises GenerationFailed when no connected layout is
    found within ``gen_params.max_attempts``.
    """
    params = gen_params if gen_params is not None else GenParams()
    params.validate()
    if width < 16 or height < 16:
        raise ValueError("width and height must be >= 16")
    if params.max_room_size > min(width, height) - 4:
        raise ValueError("max_room_size too large for the grid")

    for attempt in range(params.max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        plan = _generate_attempt(rng, width, height, params)
        if plan is not None:
            return plan
    raise GenerationFailed(
        f"no connected layout for seed={seed} within {params.max_attempts} attempts"
    )


def _generate_attempt(
    rng: np.random.Generator, width: int, height: int, params: GenParams
) -> FloorPlan | None:
    grid = np.ones((height, width), dtype=bool)  # all obstacle
    rooms: list[tuple[int, int, int, int]] = []  # (x, y, w, h)
    for _ in range(params.n_rooms):
        for _ in range(params.placement_tries):
            w = int(rng.integers(params.min_room_size, params.max_room_size + 1))
            h = int(rng.integers(params.min_room_size, params.max_room_size + 1))
            if width - 1 - w < 1 or height - 1 - h < 1:
                continue
            x = int(rng.integers(1, width - w))
            y = int(rng.integers(1, height - h))
            if any(_rects_overlap((x, y, w, h), r, margin=1) for r in rooms):
                continue
            rooms.append((x, y, w, h))
            break
    if not rooms:
        return None

    for x, y, w, h in rooms:
        grid[y : y + h, x : x + w] = False

    centers = [(x + w // 2, y + h // 2) for x, y, w, h in rooms]
    for i in range(1, len(centers)):
        j = int(rng.integers(0, i))
        _carve_corridor(grid, centers[i], centers[j], bool(rng.integers(2)))
    for _ in range(params.extra_corridors):
        if len(centers) < 2:
            break
        i, j = rng.choice(len(centers), size=2, replace=False)
        _carve_corridor(grid, centers[int(i)], centers[int(j)], bool(rng.integers(2)))

    plan = FloorPlan(width=width, height=height, obstacles=grid)
    try:
        plan.validate()
    except ValueError:
        return None
    return plan


def _rects_overlap(
    a: tuple[int, int, int, int], b: tuple[int, int, int, int], margin: int
) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return (
        ax - margin < bx + bw
        and bx - margin < ax + aw
        and ay - margin < by + bh
        and by - margin < ay + ah
    )


def _carve_corridor(
    grid: np.ndarray, a: tuple[int, int], b: tuple[int, int], horizontal_first: bool
) -> None:
    height, width = grid.shape
    (ax, ay), (bx, by) = a, b
    elbow = (bx, ay) if horizontal_first else (ax, by)
    for (x0, y0), (x1, y1) in (((ax, ay), elbow), (elbow, (bx, by))):
        xs = sorted((x0, x1))
        ys = sorted((y0, y1))
        xs = [min(max(v, 1), width - 2) for v in xs]
        ys = [min(max(v, 1), height - 2) for v in ys]
        grid[ys[0] : ys[1] + 1, xs[0] : xs[1] + 1] = False


# ---------------------------------------------------------------------------
# Depth sensing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensorConfig:
    fov_deg: float = DEFAULT_FOV_DEG
    max_range: int = DEFAULT_MAX_RANGE
    n_rays: int = DEFAULT_N_RAYS

    def validate(self) -> None:
        if not (0.0 < self.fov_deg <= 360.0):
            raise ValueError("fov must be in (0, 360]")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if self.max_range < 1:
            raise ValueError("max_range must be >= 1")


DEFAULT_SENSOR = SensorConfig()


@dataclass
class DepthScan:
    """One depth scan: per-ray hits plus the exact cells the scan observed.

    ``free_cells`` are the traversed free cells of all rays, ``obstacle_cells``
    the obstacle cells that stopped rays; both are (k, 2) arrays of (x, y).
    ``distances[i]`` is the center-to-center distance of ray i's hit obstacle,
    or ``max_range`` when the ray ended without hitting one.
    """

    fov_deg: float
    max_range: int
    offsets_deg: np.ndarray  # (n_rays,)
    distances: np.ndarray  # (n_rays,)
    hit_obstacle: np.ndarray  # (n_rays,) bool
    free_cells: np.ndarray  # (k, 2) int
    obstacle_cells: np.ndarray  # (m, 2) int

    @property
    def n_rays(self) -> int:
        return len(self.offsets_deg)


def ray_offsets(fov_deg: float, n_rays: int) -> np.ndarray:
    """Angle offsets (degrees) evenly spanning the field of view."""
    if fov_deg >= 360.0:
        return -180.0 + np.arange(n_rays) * (360.0 / n_rays)
    if n_rays == 1:
        return np.zeros(1)
    return np.linspace(-fov_deg / 2.0, fov_deg / 2.0, n_rays)


def ray_direction(angle_deg: float) -> tuple[float, float]:
    """Unit direction of a ray in grid coordinates (y grows southward)."""
    rad = math.radians(angle_deg % 360.0)
    return (math.cos(rad), -math.sin(rad))


def supercover_cells(angle_deg: float, max_range: int) -> list[tuple[int, int]]:
    """Ordered relative cells a ray from a cell center touches, origin excluded.

    This is the reference traversal: cells appear in order of entry distance;
    at an exact corner crossing the x-step side cell, then the y-step side
    cell, then the diagonal cell are emitted.  Cells whose center is farther
    than ``max_range`` from the origin center are dropped, and traversal ends
    once the ray's main chain leaves that radius.
    """
    ux, uy = ray_direction(angle_deg)
    sx = 1 if ux > 0 else (-1 if ux < 0 else 0)
    sy = 1 if uy > 0 else (-1 if uy < 0 else 0)
    r2 = max_range * max_range
    cx = cy = 0
    next_tx = (cx + 0.5 * sx) / ux if sx != 0 else math.inf
    next_ty = (cy + 0.5 * sy) / uy if sy != 0 else math.inf
    out: list[tuple[int, int]] = []
    while True:
        if next_tx < next_ty:
            cx += sx
            emitted = [(cx, cy)]
            next_tx = (cx + 0.5 * sx) / ux
        elif next_ty < next_tx:
            cy += sy
            emitted = [(cx, cy)]
            next_ty = (cy + 0.5 * sy) / uy
        else:
            # exact corner crossing: both side cells, then the diagonal
            emitted = [(cx + sx, cy), (cx, cy + sy)]
            cx += sx
            cy += sy
            emitted.append((cx, cy))
            next_tx = (cx + 0.5 * sx) / ux
            next_ty = (cy + 0.5 * sy) / uy
        for ex, ey in emitted:
            if ex * ex + ey * ey <= r2:
                out.append((ex, ey))
        if cx * cx + cy * cy > r2:
            return out


class RayCaster:
    """Precomputed supercover traversal tables for one sensor configuration.

    For each heading the relative cell paths of all rays are concatenated
    into flat arrays so a whole scan reduces to one gather plus one argmax.
    """

    def __init__(self, sensor: SensorConfig):
        sensor.validate()
        self.sensor = sensor
        self.offsets = ray_offsets(sensor.fov_deg, sensor.n_rays)
        self._tables = {}
        for heading in Heading:
            paths = [
                supercover_cells(heading.angle_deg + off, sensor.max_range)
                for off in self.offsets
            ]
            lengths = np.array([len(p) for p in paths], dtype=np.int64)
            max_len = int(lengths.max())
            flat = np.concatenate([np.array(p, dtype=np.int64).reshape(-1, 2) for p in paths])
            dists = np.sqrt((flat.astype(float) ** 2).sum(axis=1))
            row = np.repeat(np.arange(sensor.n_rays), lengths)
            col = np.concatenate([np.arange(n) for n in lengths])
            self._tables[heading] = {
                "rel": flat,  # (total, 2) as (x, y)
                "dist": dists,
                "row": row,
                "col": col,
                "lengths": lengths,
                "max_len": max_len,
            }

    def scan(self, plan: FloorPlan, pose: AgentPose) -> DepthScan:
        t = self._tables[pose.heading]
        n_rays = self.sensor.n_rays
        abs_x = t["rel"][:, 0] + pose.x
        abs_y = t["rel"][:, 1] + pose.y
        in_bounds = (
            (abs_x >= 0) & (abs_x < plan.width) & (abs_y >= 0) & (abs_y < plan.height)
        )
        gx = np.clip(abs_x, 0, plan.width - 1)
        gy = np.clip(abs_y, 0, plan.height - 1)
        # out-of-bounds cells block the ray but are never reported as hits
        blocked_flat = np.where(in_bounds, plan.obstacles[gy, gx], True)

        padded = np.ones((n_rays, t["max_len"] + 1), dtype=bool)
        padded[t["row"], t["col"]] = blocked_flat
        first_block = padded.argmax(axis=1)  # index of first blocking cell per ray

        pos_ok = t["col"] < first_block[t["row"]]
        free_sel = pos_ok
        hit_sel = (t["col"] == first_block[t["row"]]) & in_bounds & blocked_flat

        hit_obstacle = np.zeros(n_rays, dtype=bool)
        hit_obstacle[t["row"][hit_sel]] = True
        distances = np.full(n_rays, float(self.sensor.max_range))
        distances[t["row"][hit_sel]] = t["dist"][hit_sel]

        free_cells = np.stack([abs_x[free_sel], abs_y[free_sel]], axis=1)
        obstacle_cells = np.stack([abs_x[hit_sel], abs_y[hit_sel]], axis=1)
        return DepthScan(
            fov_deg=self.sensor.fov_deg,
            max_range=self.sensor.max_range,
            offsets_deg=self.offsets.copy(),
            distances=distances,
            hit_obstacle=hit_obstacle,
            free_cells=free_cells,
            obstacle_cells=obstacle_cells,
        )


_CASTER_CACHE: dict[SensorConfig, RayCaster] = {}


def _caster_for(sensor: SensorConfig) -> RayCaster:
    caster = _CASTER_CACHE.get(sensor)
    if caster is None:
        caster = RayCaster(sensor)
        _CASTER_CACHE[sensor] = caster
    return caster


def sense(
    plan: FloorPlan,
    pose: AgentPose,
    fov_deg: float = DEFAULT_FOV_DEG,
    max_range: int = DEFAULT_MAX_RANGE,
    n_rays: int = DEFAULT_N_RAYS,
) -> DepthScan:
    """Cast a depth scan from ``pose``; a pure function of its arguments."""
    return _caster_for(SensorConfig(fov_deg, max_range, n_rays)).scan(plan, pose)


# ---------------------------------------------------------------------------
# Episode dynamics
# ---------------------------------------------------------------------------


@dataclass
class EpisodeState:
    pose: AgentPose
    timestep: int
    forward_count: int
    rng: np.random.Generator
    budget: int = DEFAULT_EPISODE_BUDGET


def reset(
    plan: FloorPlan,
    start_seed: int,
    sensor: SensorConfig = DEFAULT_SENSOR,
    budget: int = DEFAULT_EPISODE_BUDGET,
) -> tuple[EpisodeState, DepthScan]:
    """Start an episode: pose uniform over free cells and headings under the seed."""
    rng = np.random.default_rng(start_seed)
    free = np.argwhere(plan.free_mask)  # (n, 2) as (y, x), row-major order
    if len(free) == 0:
        raise ValueError("plan has no free cells")
    idx = int(rng.integers(len(free)))
    heading = Heading(int(rng.integers(4)))
    pose = AgentPose(x=int(free[idx][1]), y=int(free[idx][0]), heading=heading)
    state = EpisodeState(pose=pose, timestep=0, forward_count=0, rng=rng, budget=budget)
    return state, _caster_for(sensor).scan(plan, pose)


def step(
    state: EpisodeState,
    plan: FloorPlan,
    action: AtomicAction,
    sensor: SensorConfig = DEFAULT_SENSOR,
) -> tuple[EpisodeState, DepthScan, bool]:
    """Apply one atomic action; returns (new state, scan from the new pose, collided).

    A MoveForward into an obstacle leaves the pose unchanged and reports a
    collision; it still counts as a forward action (metrics count actions
    taken, not displacement).
    """
    if state.timestep >= state.budget:
        raise EpisodeOver(f"episode budget of {state.budget} steps exhausted")
    pose = state.pose
    collided = False
    forward = 0
    if action is AtomicAction.TURN_LEFT:
        pose = AgentPose(pose.x, pose.y, pose.heading.turn_left())
    elif action is AtomicAction.TURN_RIGHT:
        pose = AgentPose(pose.x, pose.y, pose.heading.turn_right())
    else:
        forward = 1
        dx, dy = pose.heading.vector
        nx, ny = pose.x + dx, pose.y + dy
        if plan.is_free(nx, ny):
            pose = AgentPose(nx, ny, pose.heading)
        else:
            collided = True
    new_state = replace(
        state,
        pose=pose,
        timestep=state.timestep + 1,
        forward_count=state.forward_count + forward,
    )
    return new_state, _caster_for(sensor).scan(plan, pose), collided


class Episode:
    """Mutable convenience wrapper bundling one plan's episode state and sensor."""

    def __init__(
        self,
        plan: FloorPlan,
        start_seed: int,
        sensor: SensorConfig = DEFAULT_SENSOR,
        budget: int = DEFAULT_EPISODE_BUDGET,
    ):
        self.plan = plan
        self.sensor = sensor
        self.state, self.last_scan = reset(plan, start_seed, sensor, budget)
        self.actions: list[AtomicAction] = []

    @property
    def pose(self) -> AgentPose:
        return self.state.pose

    @property
    def done(self) -> bool:
        return self.state.timestep >= self.state.budget

    @property
    def steps_left(self) -> int:
        return self.state.budget - self.state.timestep

    def step(self, action: AtomicAction) -> tuple[DepthScan, bool]:
        self.state, scan, collided = step(self.state, self.plan, action, self.sensor)
        self.last_scan = scan
        self.actions.append(action)
        return scan, collided
