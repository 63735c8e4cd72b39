"""Comparison agents: closest-frontier chasing and three learned variants.

The learned variants subclass the option-critic model and swap its head
structure while keeping the trunk, the trainer, and the environment
identical, so any performance difference comes from the action space alone:

- OptionDisabledModel: the frontier-navigation head only, no look-around and
  no termination (every macro is a navigation);
- ArbitraryPointModel: the same pointer head scored over all known-free
  cells instead of the frontier set;
- AtomicModel: a 3-way head over the primitive actions, each step a
  unit-length macro.

FrontierClosest is the learning-free classic: always navigate to the
frontier cell with the shortest planned path, optionally doing a full
rotation on arrival.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import CheckpointError, NoFrontier
from .gridworld import AgentPose
from .mapping import MapStack
from .planner import MacroTranscript, wavefront_distances
from .policy import (
    MacroAction,
    OptionId,
    PolicyModel,
    load_checkpoint,
    load_model_as,
    log_softmax,
    sample_index,
    softmax,
)


class BaselineKind(enum.Enum):
    FRONTIER_CLOSEST = "frontier"
    ATOMIC_RL = "atomic"
    ARBITRARY_POINT_RL = "arbitrary"
    OPTION_DISABLED = "option-disabled"


# ---------------------------------------------------------------------------
# Closest-frontier agent (learning-free)
# ---------------------------------------------------------------------------


def frontier_closest_step(maps: MapStack, pose: AgentPose) -> tuple[int, int]:
    """The reachable frontier cell with minimal planned path length from pose.

    Distances are planned-path lengths over the agent's own occupancy
    knowledge (optimistic, like navigation itself), so walls are respected.
    Ties break to the lowest (y, x) lexicographically.
    """
    ys, xs = np.nonzero(maps.frontier)
    if len(ys) == 0:
        raise NoFrontier("frontier set is empty")
    dist = wavefront_distances(maps.occupancy, (pose.x, pose.y))
    d = dist[ys, xs]
    reachable = d >= 0
    if not reachable.any():
        raise NoFrontier("no frontier cell is reachable")
    best_d = d[reachable].min()
    # nonzero scans row-major, so the first hit is the lowest (y, x)
    i = int(np.flatnonzero(reachable & (d == best_d))[0])
    return (int(xs[i]), int(ys[i]))


class FrontierClosestAgent:
    """Navigate to the closest frontier; optionally rotate 360 on arrival."""

    def __init__(self, rotate_on_arrival: bool = True):
        self.rotate_on_arrival = rotate_on_arrival
        self._pending_rotation = False

    def next_action(self, maps: MapStack, pose: AgentPose) -> MacroAction:
        if self._pending_rotation:
            self._pending_rotation = False
            return MacroAction("angle", 360)
        return MacroAction("goal", frontier_closest_step(maps, pose))

    def observe(self, action: MacroAction, transcript: MacroTranscript) -> None:
        if (
            self.rotate_on_arrival
            and action.kind == "goal"
            and transcript.terminal_state_reached
        ):
            self._pending_rotation = True


# ---------------------------------------------------------------------------
# Learned variants
# ---------------------------------------------------------------------------


class _SingleOptionModel(PolicyModel):
    """Goal-pointer variant with one option and no termination head."""

    HAS_TERMINATION = False

    @classmethod
    def _head_params(cls, config, rng):
        d = config.feature_dim
        e = config.encoding_dim
        return {
            "frontier.m": rng.normal(0.0, 0.01, (e, d)),
            "frontier.q": np.zeros(e),
            "value1.w": rng.normal(0.0, 0.01, (d,)),
            "value1.b": np.zeros(1),
        }

    def available_options(self):
        return (OptionId.FRONTIER_NAVIGATION,)

    def policy_keys(self):
        return self.trunk_keys() + ["frontier.m", "frontier.q"]

    def value_keys(self):
        return self.trunk_keys() + ["value1.w", "value1.b"]

    def termination_keys(self):
        return []


class OptionDisabledModel(_SingleOptionModel):
    """The full method with the look-around option removed."""

    KIND = "option_disabled"


class ArbitraryPointModel(_SingleOptionModel):
    """Pointer goals over every known-free cell, not just the frontier."""

    KIND = "arbitrary_point"

    def goal_cells(self, option, channels):
        known_free = channels[1] & ~channels[0]
        return np.argwhere(known_free)[:, ::-1]


class AtomicModel(PolicyModel):
    """A 3-way primitive-action head; every atomic step is its own macro."""

    KIND = "atomic"
    HAS_TERMINATION = False

    @classmethod
    def _head_params(cls, config, rng):
        d = config.feature_dim
        return {
            "act.w": rng.normal(0.0, 0.01, (3, d)),
            "act.b": np.zeros(3),
            "value1.w": rng.normal(0.0, 0.01, (d,)),
            "value1.b": np.zeros(1),
        }

    def available_options(self):
        return (OptionId.FRONTIER_NAVIGATION,)

    def policy_keys(self):
        return self.trunk_keys() + ["act.w", "act.b"]

    def value_keys(self):
        return self.trunk_keys() + ["value1.w", "value1.b"]

    def termination_keys(self):
        return []

    def goal_cells(self, option, channels):
        raise NotImplementedError("atomic variant has no goal cells")

    def action_distribution(self, option, features, channels):
        return self.params["act.w"] @ features + self.params["act.b"], None

    def action_to_index(self, option, ctx, action):
        return int(action.value)

    def action_backward(self, option, ctx, features, dlogits, grads):
        grads["act.w"] += np.outer(dlogits, features)
        grads["act.b"] += dlogits
        return self.params["act.w"].T @ dlogits

    def sample_action(self, option, features, channels, rng, greedy=False):
        logits, _ = self.action_distribution(option, features, channels)
        probs = softmax(logits)
        idx = int(np.argmax(probs)) if greedy else sample_index(probs, rng)
        return MacroAction("atomic", idx), float(log_softmax(logits)[idx])


MODEL_KINDS: dict[str, type[PolicyModel]] = {
    PolicyModel.KIND: PolicyModel,
    OptionDisabledModel.KIND: OptionDisabledModel,
    ArbitraryPointModel.KIND: ArbitraryPointModel,
    AtomicModel.KIND: AtomicModel,
}


def load_agent_model(path: str) -> tuple[PolicyModel, dict]:
    """Load any saved model variant, dispatching on the checkpoint kind."""
    config, _ = load_checkpoint(path)
    kind = config.get("kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    return load_model_as(MODEL_KINDS[kind], path)
