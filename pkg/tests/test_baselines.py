"""Tests for the comparison agents and model variants."""

from collections import deque

import numpy as np
import pytest

from gradcheck import REL_TOL, SMALL_CONFIG, directional_check, random_direction
from helpers import episode_at, open_plan
from optionex.baselines import (
    ArbitraryPointModel,
    AtomicModel,
    BaselineKind,
    FrontierClosestAgent,
    MODEL_KINDS,
    OptionDisabledModel,
    frontier_closest_step,
    load_agent_model,
)
from optionex.errors import CheckpointError, NoFrontier
from optionex.gridworld import AtomicAction, Heading
from optionex.learning import TrainConfig, floorplan_for, train
from optionex.mapping import MapStack, integrate_scan
from optionex.planner import execute_navigation
from optionex.policy import (
    MacroAction,
    OptionId,
    PolicyModel,
    choose_option,
    extract_features,
    load_model,
    log_softmax,
    option_values,
    save_checkpoint,
    save_model,
    softmax,
)


def oracle_closest(maps, pose):
    """Brute-force BFS from the pose; min (distance, y, x) frontier cell."""
    h, w = maps.height, maps.width
    dist = {(pose.x, pose.y): 0}
    queue = deque([(pose.x, pose.y)])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and (nx, ny) not in dist:
                if not maps.occupancy[ny, nx]:
                    dist[(nx, ny)] = dist[(x, y)] + 1
                    queue.append((nx, ny))
    best = None
    for y in range(h):
        for x in range(w):
            if maps.frontier[y, x] and (x, y) in dist:
                key = (dist[(x, y)], y, x)
                if best is None or key < best[0]:
                    best = (key, (x, y))
    return None if best is None else best[1]


# ---------------------------------------------------------------------------
# Closest-frontier selection
# ---------------------------------------------------------------------------


def test_closest_picks_nearer_of_two():
    plan = open_plan(12, 10)
    env, maps = episode_at(plan, 2, 2, Heading.E)
    maps.frontier[:, :] = False
    maps.frontier[2, 5] = True  # path distance 3
    maps.frontier[2, 9] = True  # path distance 7
    assert frontier_closest_step(maps, env.pose) == (5, 2)


def test_closest_single_frontier():
    plan = open_plan(12, 10)
    env, maps = episode_at(plan, 2, 2, Heading.E)
    maps.frontier[:, :] = False
    maps.frontier[7, 8] = True
    assert frontier_closest_step(maps, env.pose) == (8, 7)


def test_closest_tie_breaks_to_lowest_y_then_x():
    plan = open_plan(12, 10)
    env, maps = episode_at(plan, 2, 2, Heading.E)
    maps.frontier[:, :] = False
    maps.frontier[2, 5] = True  # (y=2, x=5), distance 3
    maps.frontier[5, 2] = True  # (y=5, x=2), distance 3
    assert frontier_closest_step(maps, env.pose) == (5, 2)


def test_closest_uses_path_distance_not_euclidean():
    plan = open_plan(12, 10)
    env, maps = episode_at(plan, 2, 4, Heading.E)
    maps.frontier[:, :] = False
    # a known wall forces a detour to the euclidean-nearest cell
    maps.occupancy[2:7, 4] = True
    maps.explored[2:7, 4] = True
    maps.frontier[4, 6] = True  # euclidean 4, path 4 + detour around wall = 8
    maps.frontier[8, 3] = True  # path distance 5
    assert frontier_closest_step(maps, env.pose) == (3, 8)


def test_closest_skips_unreachable_frontier():
    plan = open_plan(14, 12)
    env, maps = episode_at(plan, 2, 2, Heading.E)
    maps.frontier[:, :] = False
    # frontier cell sealed inside a known-occupancy ring
    maps.occupancy[5:10, 6:11] = True
    maps.occupancy[7, 8] = False
    maps.explored[4:11, 5:12] = True
    maps.frontier[7, 8] = True
    maps.frontier[2, 9] = True
    assert frontier_closest_step(maps, env.pose) == (9, 2)
    maps.frontier[2, 9] = False
    with pytest.raises(NoFrontier):
        frontier_closest_step(maps, env.pose)


def test_closest_empty_frontier_raises():
    plan = open_plan(12, 10)
    env, maps = episode_at(plan, 2, 2, Heading.E)
    maps.frontier[:, :] = False
    with pytest.raises(NoFrontier):
        frontier_closest_step(maps, env.pose)


def test_closest_matches_bfs_oracle_on_real_maps():
    rng = np.random.default_rng(7)
    checked = 0
    for plan_seed in (3, 5, 9):
        plan = floorplan_for(plan_seed, 32, 32)
        env, maps = episode_at(plan, *_some_free_cell(plan), Heading.N)
        moves = (AtomicAction.TURN_LEFT, AtomicAction.TURN_RIGHT, AtomicAction.MOVE_FORWARD)
        for step_i in range(150):
            scan, _ = env.step(moves[int(rng.integers(3))])
            integrate_scan(maps, env.pose, scan)
            if step_i % 10 == 0 and maps.frontier.any():
                expect = oracle_closest(maps, env.pose)
                assert frontier_closest_step(maps, env.pose) == expect
                checked += 1
    assert checked >= 40


def _some_free_cell(plan):
    ys, xs = np.nonzero(plan.free_mask)
    return int(xs[0]), int(ys[0])


def test_closest_is_deterministic():
    plan = floorplan_for(4, 32, 32)
    env, maps = episode_at(plan, *_some_free_cell(plan), Heading.S)
    goals = {frontier_closest_step(maps, env.pose) for _ in range(5)}
    assert len(goals) == 1


# ---------------------------------------------------------------------------
# FrontierClosestAgent sequencing
# ---------------------------------------------------------------------------


def test_agent_rotates_after_arrival():
    plan = open_plan(14, 12)
    env, maps = episode_at(plan, 6, 6, Heading.E)
    agent = FrontierClosestAgent()
    first = agent.next_action(maps, env.pose)
    assert first.kind == "goal"
    transcript = execute_navigation(env, plan, maps, first.value, budget=50)
    assert transcript.terminal_state_reached
    agent.observe(first, transcript)
    assert agent.next_action(maps, env.pose) == MacroAction("angle", 360)
    # after the rotation fires once, the agent goes back to navigating
    assert agent.next_action(maps, env.pose).kind == "goal"


def test_agent_rotation_disabled_flag():
    plan = open_plan(14, 12)
    env, maps = episode_at(plan, 6, 6, Heading.E)
    agent = FrontierClosestAgent(rotate_on_arrival=False)
    first = agent.next_action(maps, env.pose)
    transcript = execute_navigation(env, plan, maps, first.value, budget=50)
    assert transcript.terminal_state_reached
    agent.observe(first, transcript)
    assert agent.next_action(maps, env.pose).kind == "goal"


# ---------------------------------------------------------------------------
# Atomic variant
# ---------------------------------------------------------------------------


def test_atomic_equal_logits_uniform():
    model = AtomicModel.init(SMALL_CONFIG, 2)
    zero_features = np.zeros(model.config.feature_dim)
    logits, _ = model.action_distribution(OptionId.FRONTIER_NAVIGATION, zero_features, None)
    probs = softmax(logits)
    assert np.array_equal(probs, np.full(3, 1.0 / 3.0))


def test_atomic_sample_and_index_roundtrip():
    model = AtomicModel.init(SMALL_CONFIG, 3)
    rng = np.random.default_rng(0)
    features = rng.standard_normal(model.config.feature_dim)
    counts = np.zeros(3)
    for _ in range(300):
        action, logprob = model.sample_action(
            OptionId.FRONTIER_NAVIGATION, features, None, rng
        )
        assert action.kind == "atomic"
        idx = model.action_to_index(OptionId.FRONTIER_NAVIGATION, None, action)
        logits, _ = model.action_distribution(OptionId.FRONTIER_NAVIGATION, features, None)
        assert logprob == float(log_softmax(logits)[idx])
        counts[idx] += 1
    assert (counts > 0).all()


def test_atomic_greedy_is_argmax():
    model = AtomicModel.init(SMALL_CONFIG, 4)
    rng = np.random.default_rng(1)
    features = rng.standard_normal(model.config.feature_dim)
    logits, _ = model.action_distribution(OptionId.FRONTIER_NAVIGATION, features, None)
    action, _ = model.sample_action(
        OptionId.FRONTIER_NAVIGATION, features, None, rng, greedy=True
    )
    assert action.value == int(np.argmax(logits))


def test_atomic_gradient_check():
    model = AtomicModel.init(SMALL_CONFIG, 5)
    rng = np.random.default_rng(2)
    failures = 0
    for draw in range(10):
        x = rng.standard_normal((1, 5, SMALL_CONFIG.height, SMALL_CONFIG.width))
        target = int(rng.integers(3))
        grads = model.zero_grads()
        feats, cache = model.trunk_forward(x)
        logits, ctx = model.action_distribution(OptionId.FRONTIER_NAVIGATION, feats[0], None)
        probs = softmax(logits)
        dlogits = -probs.copy()
        dlogits[target] += 1.0
        dfeat = model.action_backward(
            OptionId.FRONTIER_NAVIGATION, ctx, feats[0], dlogits, grads
        )
        model.trunk_backward(cache, dfeat[None], grads)

        def loss_fn():
            f, _ = model.trunk_forward(x)
            lg, _ = model.action_distribution(OptionId.FRONTIER_NAVIGATION, f[0], None)
            return float(log_softmax(lg)[target])

        direction = random_direction(model.params, model.policy_keys(), rng)
        if directional_check(loss_fn, model.params, grads, direction) > REL_TOL:
            failures += 1
    assert failures == 0


# ---------------------------------------------------------------------------
# Arbitrary-point variant
# ---------------------------------------------------------------------------


def test_arbitrary_goal_cells_are_known_free():
    model = ArbitraryPointModel.init(SMALL_CONFIG, 6)
    channels = np.zeros((5, 16, 16), dtype=bool)
    channels[1, 3, 4] = True  # explored free
    channels[1, 5, 6] = True
    channels[0, 5, 6] = True  # explored obstacle: not selectable
    channels[1, 8, 8] = True
    cells = model.goal_cells(OptionId.FRONTIER_NAVIGATION, channels)
    assert sorted(map(tuple, cells)) == [(4, 3), (8, 8)]


def test_arbitrary_distribution_sums_to_one():
    model = ArbitraryPointModel.init(SMALL_CONFIG, 7)
    rng = np.random.default_rng(3)
    channels = np.zeros((5, 16, 16), dtype=bool)
    channels[1] = rng.random((16, 16)) < 0.4
    features = rng.standard_normal(model.config.feature_dim)
    logits, _ = model.action_distribution(OptionId.FRONTIER_NAVIGATION, features, channels)
    assert abs(softmax(logits).sum() - 1.0) < 1e-12
    assert len(logits) == int(channels[1].sum())


def test_arbitrary_single_cell_certainty():
    model = ArbitraryPointModel.init(SMALL_CONFIG, 8)
    rng = np.random.default_rng(4)
    channels = np.zeros((5, 16, 16), dtype=bool)
    channels[1, 9, 2] = True
    features = rng.standard_normal(model.config.feature_dim)
    action, logprob = model.sample_action(
        OptionId.FRONTIER_NAVIGATION, features, channels, rng
    )
    assert action == MacroAction("goal", (2, 9))
    assert logprob == 0.0


def test_arbitrary_no_known_cells_raises():
    model = ArbitraryPointModel.init(SMALL_CONFIG, 9)
    channels = np.zeros((5, 16, 16), dtype=bool)
    with pytest.raises(NoFrontier):
        model.action_distribution(
            OptionId.FRONTIER_NAVIGATION, np.zeros(model.config.feature_dim), channels
        )


# ---------------------------------------------------------------------------
# Option-disabled variant
# ---------------------------------------------------------------------------


def test_option_disabled_matches_full_method_first_macro():
    """With shared weights and the full method preferring navigation, both
    models draw the identical first goal from the identical rng state."""
    full = PolicyModel.init(SMALL_CONFIG, 10)
    disabled = OptionDisabledModel.init(SMALL_CONFIG, 99)
    for k in disabled.params:
        disabled.params[k] = full.params[k].copy()
    full.params["value2.b"][0] = -5.0  # navigation wins the greedy choice

    plan = floorplan_for(11, 16, 16)
    env, maps = episode_at(plan, *_some_free_cell(plan), Heading.E)
    channels = np.stack(maps.channels())
    feats_full = extract_features(full, maps)
    feats_dis = extract_features(disabled, maps)
    assert np.array_equal(feats_full, feats_dis)
    v1, v2 = option_values(full, feats_full)
    assert choose_option(v1, v2) is OptionId.FRONTIER_NAVIGATION

    a1, lp1 = full.sample_action(
        OptionId.FRONTIER_NAVIGATION, feats_full, channels, np.random.default_rng(42)
    )
    a2, lp2 = disabled.sample_action(
        OptionId.FRONTIER_NAVIGATION, feats_dis, channels, np.random.default_rng(42)
    )
    assert a1 == a2 and lp1 == lp2


def test_variant_parameter_sets():
    trunk = set(PolicyModel.init(SMALL_CONFIG, 0).trunk_keys())
    assert set(OptionDisabledModel.init(SMALL_CONFIG, 0).params) == trunk | {
        "frontier.m", "frontier.q", "value1.w", "value1.b"
    }
    assert set(ArbitraryPointModel.init(SMALL_CONFIG, 0).params) == trunk | {
        "frontier.m", "frontier.q", "value1.w", "value1.b"
    }
    assert set(AtomicModel.init(SMALL_CONFIG, 0).params) == trunk | {
        "act.w", "act.b", "value1.w", "value1.b"
    }
    for cls in (OptionDisabledModel, ArbitraryPointModel, AtomicModel):
        model = cls.init(SMALL_CONFIG, 0)
        assert not model.HAS_TERMINATION
        assert model.termination_keys() == []
        assert model.available_options() == (OptionId.FRONTIER_NAVIGATION,)


@pytest.mark.parametrize("cls", [OptionDisabledModel, ArbitraryPointModel, AtomicModel])
def test_variant_training_runs(cls):
    model = cls.init(SMALL_CONFIG, 1)
    config = TrainConfig(n_workers=2, update_every=4, episode_len=50, chunk_size=8)
    before = {k: v.copy() for k, v in model.params.items()}
    rows = train(
        model, config, plan_seeds=[51], n_updates=1, width=16, height=16, master_seed=6
    )
    row = rows[0]
    assert row["option2_freq"] == 0.0
    assert row["termination_loss"] == 0.0
    assert np.isfinite(row["policy_loss"]) and np.isfinite(row["value_loss"])
    assert any(not np.array_equal(model.params[k], before[k]) for k in before)


# ---------------------------------------------------------------------------
# Checkpoint dispatch
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_all_variants(tmp_path):
    for cls in (PolicyModel, OptionDisabledModel, ArbitraryPointModel, AtomicModel):
        model = cls.init(SMALL_CONFIG, 12)
        path = str(tmp_path / f"{cls.KIND}.ckpt")
        save_model(model, path)
        loaded, config = load_agent_model(path)
        assert type(loaded) is cls
        assert config["kind"] == cls.KIND
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])


def test_two_option_loader_rejects_variant_checkpoint(tmp_path):
    model = AtomicModel.init(SMALL_CONFIG, 13)
    path = str(tmp_path / "atomic.ckpt")
    save_model(model, path)
    with pytest.raises(CheckpointError):
        load_model(path)


def test_unknown_kind_rejected(tmp_path):
    model = AtomicModel.init(SMALL_CONFIG, 14)
    path = str(tmp_path / "bogus.ckpt")
    save_checkpoint(
        path, {"kind": "bogus", "model": model.config.to_dict()}, model.params
    )
    with pytest.raises(CheckpointError):
        load_agent_model(path)


def test_baseline_kind_enum_complete():
    assert {k.value for k in BaselineKind} == {
        "frontier", "atomic", "arbitrary", "option-disabled"
    }
    assert set(MODEL_KINDS) == {
        "option_critic", "option_disabled", "arbitrary_point", "atomic"
    }
