"""Option-critic training: rollout collection, advantages, gradient updates.

The trainer alternates two phases.  Collection steps a set of sequential
workers, one macro-action per worker per slot, so every worker sits at the
same macro boundary before the next slot begins; each executed macro becomes
one Transition in a bounded FIFO trajectory buffer.  The update phase then
takes one clipped policy-gradient step, one termination-gradient step, and
one TD value step over everything currently in the buffer.

Macro rewards are coverage deltas in [0, 1], so advantages and TD targets
are plain closed-form arithmetic over stored scalars.  The surrogate is the
standard clipped ratio objective; at ratio 1 (always true for data collected
with the current parameters) its gradient is exactly the advantage-weighted
score function, so the first step after each collection round is an ordinary
actor-critic step.

All updates recompute features with the live parameters from packed map
snapshots; stored values, log-probabilities, and termination features are
treated as constants of the collection-time parameters.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .errors import EmptyBuffer, NoFrontier
from .gridworld import (
    DEFAULT_SENSOR,
    AtomicAction,
    Episode,
    FloorPlan,
    GenParams,
    SensorConfig,
    generate_floorplan,
)
from .mapping import MapStack, coverage, explored_count, integrate_scan
from .planner import MacroTranscript, execute_lookaround, execute_navigation
from .policy import (
    MacroAction,
    OptionId,
    PolicyModel,
    choose_option,
    extract_features,
    log_softmax,
    sigmoid,
    softmax,
    termination_prob,
)

ATOMIC_ORDER = (AtomicAction.TURN_LEFT, AtomicAction.TURN_RIGHT, AtomicAction.MOVE_FORWARD)


# ---------------------------------------------------------------------------
# Closed-form learning arithmetic
# ---------------------------------------------------------------------------


def advantage(r: float, v_next: float, v_cur: float, gamma: float) -> float:
    """One-step advantage of a macro-action: r + gamma * V(s', w) - V(s, w)."""
    return r + gamma * v_next - v_cur


def td_target(
    r: float, beta: float, v_next_same: float, v_next_max: float, gamma: float
) -> float:
    """Value regression target, mixing continuation and switch by beta.

    target = r + gamma * ((1 - beta) * V(s', w) + beta * max_w' V(s', w')).
    """
    return r + gamma * ((1.0 - beta) * v_next_same + beta * v_next_max)


# ---------------------------------------------------------------------------
# Rollout storage
# ---------------------------------------------------------------------------


def pack_state(channels: np.ndarray) -> np.ndarray:
    """Bit-pack a bool (5, H, W) map snapshot for cheap buffer storage."""
    return np.packbits(channels, axis=None)


def unpack_state(packed: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(packed, count=n).reshape(shape).astype(bool)


@dataclass
class Transition:
    """One executed macro-action with everything the updates need.

    ``v_cur`` and ``v_next`` hold (V(., option1), V(., option2)); variants
    with a single option store the same value twice so the max over options
    degenerates correctly.
    """

    packed_state: np.ndarray
    option: OptionId
    action: MacroAction
    logprob: float
    reward: float
    next_features: np.ndarray
    beta: float
    v_cur: tuple[float, float]
    v_next: tuple[float, float]
    terminated: bool

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"macro reward {self.reward} outside [0, 1]")
        if not np.isfinite(
            [self.logprob, self.beta, *self.v_cur, *self.v_next]
        ).all():
            raise ValueError("non-finite transition scalars")

    @property
    def v_cur_same(self) -> float:
        return self.v_cur[self.option - 1]

    @property
    def v_next_same(self) -> float:
        return self.v_next[self.option - 1]

    @property
    def v_next_max(self) -> float:
        return max(self.v_next)


class RolloutBuffer:
    """Bounded FIFO list of trajectories, each a list of Transitions.

    A trajectory evicted while its episode is still running simply stops
    being visible to the updates; the owning worker keeps appending to its
    own reference, which is harmless.
    """

    def __init__(self, capacity: int = 20):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.trajectories: list[list[Transition]] = []
        self.macro_action_counter = 0

    def new_trajectory(self) -> list[Transition]:
        trajectory: list[Transition] = []
        self.trajectories.append(trajectory)
        while len(self.trajectories) > self.capacity:
            self.trajectories.pop(0)
        return trajectory

    def record(self, trajectory: list[Transition], transition: Transition) -> None:
        trajectory.append(transition)
        self.macro_action_counter += 1

    def all_transitions(self) -> list[Transition]:
        return [t for trajectory in self.trajectories for t in trajectory]

    def __len__(self) -> int:
        return sum(len(t) for t in self.trajectories)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    macro_budget: int = 50
    update_every: int = 20
    n_workers: int = 8
    clip_eps: float = 0.2
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    lr_termination: float = 3e-4
    entropy_coef: float = 0.01
    episode_len: int = 1000
    buffer_capacity: int = 20
    grad_clip: float = 0.5
    chunk_size: int = 64  # update-time forward batch; affects speed only

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.update_every < 1 or self.n_workers < 1:
            raise ValueError("update cadence and worker count must be >= 1")
        if self.macro_budget < 4 or self.episode_len < 1:
            raise ValueError("macro budget must cover a full rotation")
        if self.buffer_capacity < 1 or self.chunk_size < 1:
            raise ValueError("buffer capacity and chunk size must be >= 1")


# ---------------------------------------------------------------------------
# Environment workers
# ---------------------------------------------------------------------------


_PLAN_CACHE: dict[tuple, FloorPlan] = {}


def floorplan_for(
    seed: int, width: int, height: int, gen_params: GenParams | None = None
) -> FloorPlan:
    """Memoized plan generation; training revisits the same seeds constantly."""
    params = gen_params if gen_params is not None else GenParams()
    key = (seed, width, height, astuple(params))
    if key not in _PLAN_CACHE:
        _PLAN_CACHE[key] = generate_floorplan(seed, width, height, params)
    return _PLAN_CACHE[key]


class EnvWorker:
    """One sequential simulator: owns an episode, its maps, and a seed stream.

    Workers are advanced one macro-action at a time by collect_rollouts;
    stepping them round-robin reproduces the synchronized-simulator scheme
    with a single thread and keeps every run bit-reproducible.
    """

    def __init__(
        self,
        worker_id: int,
        config: TrainConfig,
        plan_seeds: list[int],
        width: int,
        height: int,
        gen_params: GenParams | None = None,
        sensor: SensorConfig = DEFAULT_SENSOR,
        master_seed: int = 0,
        stream: int = 0,
    ):
        if not plan_seeds:
            raise ValueError("plan_seeds must be non-empty")
        self.worker_id = worker_id
        self.config = config
        self.plan_seeds = list(plan_seeds)
        self.width = width
        self.height = height
        self.gen_params = gen_params
        self.sensor = sensor
        self.rng = np.random.default_rng(
            np.random.SeedSequence((master_seed, stream, worker_id))
        )
        self.env: Episode | None = None
        self.plan: FloorPlan | None = None
        self.maps: MapStack | None = None
        self.features: np.ndarray | None = None
        self.vpair: tuple[float, float] = (0.0, 0.0)
        self.option = OptionId.FRONTIER_NAVIGATION
        self.trajectory: list[Transition] | None = None
        self.episodes_done = 0
        self.last_coverage = 0.0

    def _value_pair(self, model: PolicyModel, features: np.ndarray) -> tuple[float, float]:
        opts = model.available_options()
        v1 = model.option_value(features, opts[0])
        if len(opts) == 1:
            return (v1, v1)
        return (v1, model.option_value(features, opts[1]))

    def _greedy_option(self, model: PolicyModel, vpair: tuple[float, float]) -> OptionId:
        opts = model.available_options()
        if len(opts) == 1:
            return opts[0]
        return choose_option(vpair[0], vpair[1])

    def _begin_episode(self, model: PolicyModel, buffer: RolloutBuffer) -> None:
        seed = self.plan_seeds[int(self.rng.integers(len(self.plan_seeds)))]
        self.plan = floorplan_for(seed, self.width, self.height, self.gen_params)
        start_seed = int(self.rng.integers(2**63 - 1))
        self.env = Episode(self.plan, start_seed, self.sensor, budget=self.config.episode_len)
        self.maps = MapStack.fresh(self.plan.height, self.plan.width)
        integrate_scan(self.maps, self.env.pose, self.env.last_scan)
        self.features = extract_features(model, self.maps)
        self.vpair = self._value_pair(model, self.features)
        self.option = self._greedy_option(model, self.vpair)
        self.trajectory = buffer.new_trajectory()
        self.last_coverage = coverage(self.maps, self.plan).coverage

    def _finalize_episode(self) -> None:
        self.episodes_done += 1
        self.env = None

    def _execute(self, action: MacroAction) -> MacroTranscript:
        if action.kind == "goal":
            return execute_navigation(
                self.env, self.plan, self.maps, action.value, budget=self.config.macro_budget
            )
        if action.kind == "angle":
            return execute_lookaround(
                self.env, self.plan, self.maps, action.value, budget=self.config.macro_budget
            )
        # atomic: a single primitive action treated as a unit-length macro
        before = explored_count(self.maps, self.plan)
        scan, _ = self.env.step(ATOMIC_ORDER[action.value])
        integrate_scan(self.maps, self.env.pose, scan)
        gained = explored_count(self.maps, self.plan) - before
        return MacroTranscript(
            actions=[ATOMIC_ORDER[action.value]],
            reward=gained / self.plan.total_area,
            terminal_state_reached=True,
            cells_gained=gained,
        )

    def run_macro(self, model: PolicyModel, buffer: RolloutBuffer) -> Transition:
        """Advance by exactly one macro-action and record its transition."""
        action = None
        logprob = 0.0
        channels = None
        for _ in range(8):
            if self.env is None or self.env.done:
                self._begin_episode(model, buffer)
            channels = np.stack(self.maps.channels())
            try:
                action, logprob = model.sample_action(
                    self.option, self.features, channels, self.env.state.rng
                )
                break
            except NoFrontier:
                opts = model.available_options()
                done_exploring = coverage(self.maps, self.plan).coverage >= 1.0
                if (
                    not done_exploring
                    and len(opts) > 1
                    and self.option is not OptionId.LOOK_AROUND
                ):
                    # frontier exhausted mid-episode: forced switch to the
                    # only option whose action set is never empty
                    self.option = OptionId.LOOK_AROUND
                    continue
                self._finalize_episode()
        if action is None:
            raise RuntimeError("no macro-action drawable; floorplans saturate instantly")

        packed = pack_state(channels)
        option = self.option
        v_cur = self.vpair
        transcript = self._execute(action)
        next_features = extract_features(model, self.maps)
        next_vpair = self._value_pair(model, next_features)
        if model.HAS_TERMINATION:
            beta = termination_prob(model, next_features, option)
            terminated = bool(self.env.state.rng.random() < beta)
        else:
            beta, terminated = 0.0, False
        transition = Transition(
            packed_state=packed,
            option=option,
            action=action,
            logprob=logprob,
            reward=transcript.reward,
            next_features=next_features,
            beta=beta,
            v_cur=v_cur,
            v_next=next_vpair,
            terminated=terminated,
        )
        buffer.record(self.trajectory, transition)
        self.features = next_features
        self.vpair = next_vpair
        self.last_coverage = coverage(self.maps, self.plan).coverage
        if self.env.done:
            self._finalize_episode()
        elif terminated:
            self.option = self._greedy_option(model, next_vpair)
        return transition


@dataclass
class RoundStats:
    """Aggregates of one collection round, feeding the training log."""

    transitions: int
    mean_macro_reward: float
    option_counts: tuple[int, int]
    episodes_completed: int
    mean_coverage: float


def collect_rollouts(
    model: PolicyModel,
    workers: list[EnvWorker],
    config: TrainConfig,
    buffer: RolloutBuffer | None = None,
) -> tuple[RolloutBuffer, RoundStats]:
    """Run update_every macro-action slots across all workers in lockstep."""
    if buffer is None:
        buffer = RolloutBuffer(config.buffer_capacity)
    done_before = sum(w.episodes_done for w in workers)
    fresh: list[Transition] = []
    for _ in range(config.update_every):
        for worker in workers:
            fresh.append(worker.run_macro(model, buffer))
    counts = [0, 0]
    for t in fresh:
        counts[t.option - 1] += 1
    stats = RoundStats(
        transitions=len(fresh),
        mean_macro_reward=float(np.mean([t.reward for t in fresh])),
        option_counts=(counts[0], counts[1]),
        episodes_completed=sum(w.episodes_done for w in workers) - done_before,
        mean_coverage=float(np.mean([w.last_coverage for w in workers])),
    )
    return buffer, stats


# ---------------------------------------------------------------------------
# Gradient updates
# ---------------------------------------------------------------------------


def clip_gradients(
    grads: dict[str, np.ndarray], keys: list[str], max_norm: float
) -> float:
    """Scale the listed gradients to a global L2 norm of at most max_norm."""
    total = float(np.sqrt(sum(float((grads[k] ** 2).sum()) for k in keys)))
    if total > max_norm > 0.0:
        scale = max_norm / total
        for k in keys:
            grads[k] *= scale
    return total


def _iter_chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _batch_states(model: PolicyModel, chunk: list[Transition]) -> np.ndarray:
    shape = (model.config.in_channels, model.config.height, model.config.width)
    return np.stack([unpack_state(t.packed_state, shape) for t in chunk]).astype(
        np.float64
    )


def policy_update(model: PolicyModel, buffer: RolloutBuffer, config: TrainConfig) -> float:
    """One ascent step on the clipped surrogate plus entropy bonus.

    Per transition: ratio = exp(logpi_now - logpi_collected), objective
    min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A) with A held constant.
    Returns the negated mean surrogate (a loss, for logging).
    """
    transitions = buffer.all_transitions()
    if not transitions:
        raise EmptyBuffer("policy update with no stored transitions")
    grads = model.zero_grads()
    total_obj = 0.0
    for chunk in _iter_chunks(transitions, config.chunk_size):
        x = _batch_states(model, chunk)
        feats, cache = model.trunk_forward(x)
        dfeat = np.zeros_like(feats)
        for i, t in enumerate(chunk):
            bools = x[i] > 0.5
            logits, ctx = model.action_distribution(t.option, feats[i], bools)
            idx = model.action_to_index(t.option, ctx, t.action)
            logp = log_softmax(logits)
            probs = softmax(logits)
            ratio = float(np.exp(logp[idx] - t.logprob))
            adv = advantage(t.reward, t.v_next_same, t.v_cur_same, config.gamma)
            unclipped = ratio * adv
            clipped = float(np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)) * adv
            total_obj += min(unclipped, clipped)
            # gradient of the min: the unclipped branch unless it exceeds the
            # clipped one, in which case the objective is locally constant
            coeff = adv * ratio if unclipped <= clipped else 0.0
            entropy = float(-(probs * logp).sum())
            dlogits = -coeff * probs
            dlogits[idx] += coeff
            dlogits += config.entropy_coef * (-probs * (logp + entropy))
            dfeat[i] = model.action_backward(t.option, ctx, feats[i], dlogits, grads)
        model.trunk_backward(cache, dfeat, grads)
    clip_gradients(grads, model.policy_keys(), config.grad_clip)
    for k in model.policy_keys():
        model.params[k] += config.lr_policy * grads[k]
    return -total_obj / len(transitions)


def termination_update(
    model: PolicyModel, buffer: RolloutBuffer, config: TrainConfig
) -> float:
    """One descent step pushing beta up wherever the option is suboptimal.

    The per-transition objective is beta(s') * (V(s', w) - max_w' V(s', w')),
    whose eta-gradient is exactly the termination-gradient direction; the
    value gap is constant and non-positive, so beta rises when the running
    option's value is beaten and the gradient vanishes when it is optimal.
    """
    transitions = buffer.all_transitions()
    if not transitions:
        raise EmptyBuffer("termination update with no stored transitions")
    grads = model.zero_grads()
    total = 0.0
    for t in transitions:
        beta = sigmoid(model.termination_logit(t.next_features, t.option))
        gap = t.v_next_same - t.v_next_max
        total += beta * gap
        model.termination_backward(
            t.next_features, t.option, beta * (1.0 - beta) * gap, grads
        )
    clip_gradients(grads, model.termination_keys(), config.grad_clip)
    for k in model.termination_keys():
        model.params[k] -= config.lr_termination * grads[k]
    return total / len(transitions)


def value_update(model: PolicyModel, buffer: RolloutBuffer, config: TrainConfig) -> float:
    """One descent step on the squared TD error; targets held constant."""
    transitions = buffer.all_transitions()
    if not transitions:
        raise EmptyBuffer("value update with no stored transitions")
    grads = model.zero_grads()
    total = 0.0
    for chunk in _iter_chunks(transitions, config.chunk_size):
        x = _batch_states(model, chunk)
        feats, cache = model.trunk_forward(x)
        dfeat = np.zeros_like(feats)
        for i, t in enumerate(chunk):
            v = model.option_value(feats[i], t.option)
            target = td_target(t.reward, t.beta, t.v_next_same, t.v_next_max, config.gamma)
            err = v - target
            total += err * err
            dfeat[i] = model.option_value_backward(feats[i], t.option, 2.0 * err, grads)
        model.trunk_backward(cache, dfeat, grads)
    clip_gradients(grads, model.value_keys(), config.grad_clip)
    for k in model.value_keys():
        model.params[k] -= config.lr_value * grads[k]
    return total / len(transitions)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = (
    "update_index",
    "episodes_done",
    "mean_macro_reward",
    "mean_coverage",
    "option1_freq",
    "option2_freq",
    "policy_loss",
    "value_loss",
    "termination_loss",
)


def make_workers(
    config: TrainConfig,
    plan_seeds: list[int],
    width: int,
    height: int,
    gen_params: GenParams | None = None,
    sensor: SensorConfig = DEFAULT_SENSOR,
    master_seed: int = 0,
    stream: int = 0,
) -> list[EnvWorker]:
    return [
        EnvWorker(
            i, config, plan_seeds, width, height, gen_params, sensor, master_seed, stream
        )
        for i in range(config.n_workers)
    ]


def train(
    model: PolicyModel,
    config: TrainConfig,
    plan_seeds: list[int],
    n_updates: int,
    width: int,
    height: int,
    gen_params: GenParams | None = None,
    sensor: SensorConfig = DEFAULT_SENSOR,
    master_seed: int = 0,
    start_update: int = 0,
    on_row=None,
    on_checkpoint=None,
    checkpoint_every: int = 0,
) -> list[dict]:
    """Alternate collection and the three updates for n_updates rounds.

    Returns one log row per update (see LOG_FIELDS).  ``on_row(row)`` is
    called after each update; ``on_checkpoint(updates_completed, model)`` is
    called every ``checkpoint_every`` updates and once at the end (so a run
    of 0 updates still checkpoints the initial parameters).  A resumed run
    passes the restored update counter as ``start_update``, which also
    reseeds the workers' episode streams relative to that point.
    """
    config.validate()
    workers = make_workers(
        config, plan_seeds, width, height, gen_params, sensor, master_seed, start_update
    )
    buffer = RolloutBuffer(config.buffer_capacity)
    rows: list[dict] = []
    saved_at = -1
    for u in range(start_update, start_update + n_updates):
        buffer, stats = collect_rollouts(model, workers, config, buffer)
        policy_loss = policy_update(model, buffer, config)
        if model.HAS_TERMINATION:
            termination_loss = termination_update(model, buffer, config)
        else:
            termination_loss = 0.0
        value_loss = value_update(model, buffer, config)
        row = {
            "update_index": u,
            "episodes_done": sum(w.episodes_done for w in workers),
            "mean_macro_reward": stats.mean_macro_reward,
            "mean_coverage": stats.mean_coverage,
            "option1_freq": stats.option_counts[0] / stats.transitions,
            "option2_freq": stats.option_counts[1] / stats.transitions,
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "termination_loss": float(termination_loss),
        }
        rows.append(row)
        if on_row is not None:
            on_row(row)
        if (
            on_checkpoint is not None
            and checkpoint_every > 0
            and (u + 1 - start_update) % checkpoint_every == 0
        ):
            on_checkpoint(u + 1, model)
            saved_at = u + 1
    final = start_update + n_updates
    if on_checkpoint is not None and saved_at != final:
        on_checkpoint(final, model)
    return rows
