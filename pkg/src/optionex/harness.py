"""Experiment driver: config files, training runs, greedy evaluation, reports.

The CLI front end ties the other modules into reproducible experiments.  A
plain-text config (``[section]`` headers over ``key = value`` lines) fixes the
scene distribution, budgets, and learning knobs; every artifact a run writes
(training log, checkpoints, metric CSVs, trajectory logs) embeds a fingerprint
of the scene-defining core of that config so artifacts from incompatible
experiments cannot be mixed.  CSVs are the canonical outputs; plots are
flag-gated so headless runs never touch a graphics stack.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    ArbitraryPointModel,
    AtomicModel,
    FrontierClosestAgent,
    OptionDisabledModel,
    load_agent_model,
)
from .errors import ConfigError, NoFrontier, OptionexError
from .gridworld import AtomicAction, Episode, FloorPlan, GenParams, generate_floorplan
from .learning import (
    ATOMIC_ORDER,
    LOG_FIELDS,
    TrainConfig,
    advantage,
    floorplan_for,
    pack_state,
    td_target,
    train,
    unpack_state,
)
from .mapping import MapStack, compute_frontier, coverage, explored_count, integrate_scan
from .planner import (
    MacroTranscript,
    execute_lookaround,
    execute_navigation,
    wavefront_distances,
)
from .policy import (
    MacroAction,
    ModelConfig,
    OptionId,
    PolicyModel,
    choose_option,
    extract_features,
    option_values,
    save_model,
    termination_prob,
)

METHODS = ("full", "option-disabled", "frontier", "arbitrary", "atomic")

METHOD_MODELS = {
    "full": PolicyModel,
    "option-disabled": OptionDisabledModel,
    "arbitrary": ArbitraryPointModel,
    "atomic": AtomicModel,
}


# ---------------------------------------------------------------------------
# Config file parsing
# ---------------------------------------------------------------------------


class _BadValue(Exception):
    """Internal: a raw config value failed type conversion."""


def _as_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise _BadValue(f"expected an integer, got {text!r}")


def _as_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise _BadValue(f"expected a number, got {text!r}")


def _as_str(text: str) -> str:
    if not text:
        raise _BadValue("expected a non-empty value")
    return text


def _as_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise _BadValue(f"expected true/false, got {text!r}")


def _as_range(text: str) -> tuple[int, int]:
    start, sep, stop = text.partition(":")
    if not sep:
        raise _BadValue(f"expected start:stop, got {text!r}")
    lo, hi = _as_int(start.strip()), _as_int(stop.strip())
    if lo >= hi:
        raise _BadValue(f"range {text!r} is empty (start must be < stop)")
    return lo, hi


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Sections of ``key = value`` lines, each value tagged with its line number."""
    sections: dict[str, tuple[int, dict]] = {}
    current: dict | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{source}:{lineno}: empty section name")
            if name in sections:
                raise ConfigError(f"{source}:{lineno}: duplicate section [{name}]")
            sections[name] = (lineno, {})
            current = sections[name][1]
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value' or '[section]', got {raw.strip()!r}"
            )
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key defined before any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key before '='")
        if key in current:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        current[key] = (value.strip(), lineno)
    return sections


class _Section:
    """Typed, line-precise access to one parsed config section."""

    def __init__(self, source: str, name: str, raw: dict):
        self.source = source
        self.name = name
        self.raw = dict(raw)
        self.lines = {k: lineno for k, (_, lineno) in raw.items()}

    def take(self, key: str, convert, default):
        if key not in self.raw:
            return default
        value, lineno = self.raw.pop(key)
        try:
            return convert(value)
        except _BadValue as exc:
            raise ConfigError(f"{self.source}:{lineno}: [{self.name}] {key}: {exc}")

    def finish(self) -> None:
        for key, (_, lineno) in self.raw.items():
            raise ConfigError(
                f"{self.source}:{lineno}: unknown key {key!r} in [{self.name}]"
            )

    def where(self, key: str) -> str:
        if key in self.lines:
            return f" ({self.source}:{self.lines[key]})"
        return ""


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a method, a scene distribution, budgets, and knobs.

    The train and eval seed ranges are disjoint half-open intervals, so test
    scenes are never seen during training.  ``eval_gen_params`` lets an
    evaluation run use a held-out scene distribution (a transfer run) while
    keeping the trained checkpoint acceptable.
    """

    method: str = "full"
    out_dir: str = "runs/out"
    master_seed: int = 0
    episode_budget: int = 1000
    episodes_per_plan: int = 5
    frontier_rotate: bool = True
    width: int = 64
    height: int = 64
    train_seeds: tuple[int, int] = (0, 200)
    eval_seeds: tuple[int, int] = (1000, 1020)
    gen_params: GenParams | None = None
    eval_gen_params: GenParams | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    n_updates: int = 150
    checkpoint_every: int = 50

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.episode_budget < 1:
            raise ConfigError("episode_budget must be >= 1")
        if self.episodes_per_plan < 1:
            raise ConfigError("episodes_per_plan must be >= 1")
        if self.n_updates < 0:
            raise ConfigError("n_updates must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if min(self.width, self.height) < 16:
            raise ConfigError("plan dimensions must be at least 16x16")
        for name in ("train_seeds", "eval_seeds"):
            lo, hi = getattr(self, name)
            if lo >= hi:
                raise ConfigError(f"{name} range is empty")
        if _ranges_overlap(self.train_seeds, self.eval_seeds):
            raise ConfigError("train_seeds and eval_seeds overlap")
        for params in (self.gen_params, self.eval_gen_params):
            if params is not None:
                try:
                    params.validate()
                except ValueError as exc:
                    raise ConfigError(f"plan generation: {exc}")
                if params.max_room_size > min(self.width, self.height) - 4:
                    raise ConfigError(
                        "max_room_size must be <= min(width, height) - 4"
                    )
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(f"train settings: {exc}")

    def eval_plan_params(self) -> GenParams | None:
        return self.eval_gen_params if self.eval_gen_params is not None else self.gen_params

    def fingerprint(self) -> str:
        """Digest of the scene-defining core shared by every method.

        Learning knobs and the method name stay out so runs of different
        methods on the same scenes can be compared; the eval-side distribution
        override stays out so a transfer evaluation accepts a checkpoint
        trained on the default distribution.
        """
        core = {
            "width": self.width,
            "height": self.height,
            "train_seeds": list(self.train_seeds),
            "eval_seeds": list(self.eval_seeds),
            "gen_params": _gen_params_tuple(self.gen_params),
            "episode_budget": self.episode_budget,
            "episodes_per_plan": self.episodes_per_plan,
            "macro_budget": self.train.macro_budget,
        }
        blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _ranges_overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def _gen_params_tuple(params: GenParams | None) -> list[int] | None:
    if params is None:
        return None
    return [int(v) for v in dataclasses.astuple(params)]


def _take_gen_params(section: _Section, base: GenParams | None) -> GenParams | None:
    updates = {}
    for f in dataclasses.fields(GenParams):
        value = section.take(f.name, _as_int, default=None)
        if value is not None:
            updates[f.name] = value
    if not updates:
        return None
    return dataclasses.replace(base if base is not None else GenParams(), **updates)


def load_experiment_config(
    path: str | None = None, overrides: dict | None = None
) -> ExperimentConfig:
    """Config from an optional file plus CLI overrides, fully validated."""
    source = path if path is not None else "<defaults>"
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}")
        sections = parse_config_text(text, source=source)
    else:
        sections = {}

    def section(name: str) -> _Section:
        _, raw = sections.pop(name, (0, {}))
        return _Section(source, name, raw)

    exp = section("experiment")
    plans = section("plans")
    eval_plans = section("eval_plans")
    train_sec = section("train")
    for name, (lineno, _) in sections.items():
        raise ConfigError(f"{source}:{lineno}: unknown section [{name}]")

    defaults = ExperimentConfig()
    kwargs = {
        "method": exp.take("method", _as_str, defaults.method),
        "out_dir": exp.take("out_dir", _as_str, defaults.out_dir),
        "master_seed": exp.take("master_seed", _as_int, defaults.master_seed),
        "episode_budget": exp.take("episode_budget", _as_int, defaults.episode_budget),
        "episodes_per_plan": exp.take(
            "episodes_per_plan", _as_int, defaults.episodes_per_plan
        ),
        "frontier_rotate": exp.take("frontier_rotate", _as_bool, defaults.frontier_rotate),
        "width": plans.take("width", _as_int, defaults.width),
        "height": plans.take("height", _as_int, defaults.height),
        "train_seeds": plans.take("train_seeds", _as_range, defaults.train_seeds),
        "eval_seeds": plans.take("eval_seeds", _as_range, defaults.eval_seeds),
    }
    kwargs["gen_params"] = _take_gen_params(plans, base=None)
    kwargs["eval_gen_params"] = _take_gen_params(eval_plans, base=kwargs["gen_params"])

    train_kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        convert = _as_int if f.type == "int" else _as_float
        value = train_sec.take(f.name, convert, default=None)
        if value is not None:
            train_kwargs[f.name] = value
    kwargs["train"] = TrainConfig(**train_kwargs)
    kwargs["n_updates"] = train_sec.take("n_updates", _as_int, defaults.n_updates)
    kwargs["checkpoint_every"] = train_sec.take(
        "checkpoint_every", _as_int, defaults.checkpoint_every
    )

    for sec in (exp, plans, eval_plans, train_sec):
        sec.finish()

    if _ranges_overlap(kwargs["train_seeds"], kwargs["eval_seeds"]):
        raise ConfigError(
            "train_seeds{} and eval_seeds{} overlap".format(
                plans.where("train_seeds"), plans.where("eval_seeds")
            )
        )

    config = ExperimentConfig(**kwargs)
    if overrides:
        applied = {k: v for k, v in overrides.items() if v is not None}
        config = dataclasses.replace(config, **applied)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Artifact formatting
# ---------------------------------------------------------------------------


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, fingerprint: str, header: tuple, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# fingerprint={fingerprint}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def read_fingerprint(path: str) -> str:
    """The fingerprint comment a report CSV or training log starts with."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    prefix = "# fingerprint="
    if not first.startswith(prefix):
        raise ValueError(f"{path} does not start with a fingerprint line")
    return first[len(prefix):]


def _thread_cap(n_jobs: int) -> int:
    raw = os.environ.get("OPTIONEX_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"OPTIONEX_THREADS must be an integer, got {raw!r}")
        if cap < 1:
            raise ConfigError("OPTIONEX_THREADS must be >= 1")
    return max(1, min(n_jobs, cap))


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------


def run_train(config: ExperimentConfig, resume: str | None = None) -> str:
    """Train the configured method; returns the final checkpoint path."""
    if config.method == "frontier":
        raise ConfigError("the frontier method is learning-free; nothing to train")
    fingerprint = config.fingerprint()
    model_cls = METHOD_MODELS[config.method]
    model_config = ModelConfig(height=config.height, width=config.width)
    start_update = 0
    if resume is not None:
        model, manifest = load_agent_model(resume)
        _check_artifact(manifest, fingerprint, model_cls.KIND, resume)
        if model.config != model_config:
            raise ConfigError(
                f"checkpoint {resume!r} was trained at "
                f"{model.config.width}x{model.config.height}, "
                f"config wants {config.width}x{config.height}"
            )
        start_update = int(manifest.get("updates_completed", 0))
    else:
        model = model_cls.init(model_config, seed=config.master_seed)

    os.makedirs(config.out_dir, exist_ok=True)
    log_path = os.path.join(config.out_dir, "training_log.csv")
    saved: list[str] = []

    def on_checkpoint(updates_completed: int, trained) -> None:
        name = f"checkpoint_{updates_completed:06d}.ckpt"
        path = os.path.join(config.out_dir, name)
        save_model(
            trained,
            path,
            extra={
                "fingerprint": fingerprint,
                "method": config.method,
                "updates_completed": updates_completed,
            },
        )
        saved.append(path)

    mode = "a" if start_update > 0 else "w"
    with open(log_path, mode, newline="") as fh:
        if start_update == 0:
            fh.write(f"# fingerprint={fingerprint}\n")
            fh.write(",".join(LOG_FIELDS) + "\n")

        def on_row(row: dict) -> None:
            fh.write(",".join(_csv_cell(row[k]) for k in LOG_FIELDS) + "\n")
            fh.flush()

        train(
            model,
            config.train,
            plan_seeds=list(range(*config.train_seeds)),
            n_updates=config.n_updates,
            width=config.width,
            height=config.height,
            gen_params=config.gen_params,
            master_seed=config.master_seed,
            start_update=start_update,
            on_row=on_row,
            on_checkpoint=on_checkpoint,
            checkpoint_every=config.checkpoint_every,
        )
    return saved[-1]


def _check_artifact(manifest: dict, fingerprint: str, kind: str, path: str) -> None:
    got = manifest.get("fingerprint")
    if got != fingerprint:
        raise ConfigError(
            f"artifact {path!r} has fingerprint {got!r}, config has {fingerprint!r}; "
            "refusing to mix experiments"
        )
    if manifest.get("kind") != kind:
        raise ConfigError(
            f"artifact {path!r} holds a {manifest.get('kind')!r} model, "
            f"the configured method needs {kind!r}"
        )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricSeries:
    """Metrics of one evaluation episode.

    ``coverage_by_timestep`` has one entry per atomic timestep (index 0 is
    the post-spawn scan) and is padded flat to the full episode budget when
    the agent finishes early.  ``coverage_by_length`` records a point each
    time the forward-step count grows, so its x axis is trajectory length
    rather than time.  ``option_events`` rows are (macro index, option id,
    start timestep).
    """

    method: str
    plan_seed: int
    episode_idx: int
    coverage_by_timestep: list[float]
    coverage_by_length: list[tuple[int, float]]
    option_events: list[tuple[int, int, int]]

    @property
    def trajectory_id(self) -> str:
        return f"{self.plan_seed}-{self.episode_idx}"

    def coverage_at(self, timestep: int) -> float:
        idx = min(timestep, len(self.coverage_by_timestep) - 1)
        return self.coverage_by_timestep[idx]


class _EpisodeRecorder:
    """Builds both coverage curves from per-atomic-step callbacks."""

    def __init__(self, plan: FloorPlan, maps: MapStack, budget: int):
        self.plan = plan
        self.budget = budget
        first = coverage(maps, plan).coverage
        self.curve = [first]
        self.by_length: list[tuple[int, float]] = [(0, first)]
        self._forward_seen = 0

    def on_step(self, state, maps: MapStack) -> None:
        now = coverage(maps, self.plan).coverage
        self.curve.append(now)
        if state.forward_count > self._forward_seen:
            self._forward_seen = state.forward_count
            self.by_length.append((state.forward_count, now))

    def finish(self) -> None:
        last = self.curve[-1]
        self.curve.extend([last] * (self.budget + 1 - len(self.curve)))


def _run_macro(env, plan, maps, action: MacroAction, budget: int, on_step):
    if action.kind == "goal":
        return execute_navigation(env, plan, maps, action.value, budget=budget, on_step=on_step)
    if action.kind == "angle":
        return execute_lookaround(env, plan, maps, action.value, budget=budget, on_step=on_step)
    before = explored_count(maps, plan)
    atomic = ATOMIC_ORDER[action.value]
    scan, _ = env.step(atomic)
    integrate_scan(maps, env.pose, scan)
    if on_step is not None:
        on_step(env.state, maps)
    gained = explored_count(maps, plan) - before
    return MacroTranscript(
        actions=[atomic],
        reward=gained / plan.total_area,
        terminal_state_reached=True,
        cells_gained=gained,
    )


def _greedy_option(model, features) -> OptionId:
    options = model.available_options()
    if len(options) == 1:
        return options[0]
    v1, v2 = option_values(model, features)
    return choose_option(v1, v2)


def _eval_episode(
    config: ExperimentConfig, model, plan: FloorPlan, plan_seed: int, episode_idx: int
) -> tuple[MetricSeries, dict]:
    """One greedy episode; no parameter updates, argmax actions throughout."""
    start_seed = plan_seed * 1000 + episode_idx
    env = Episode(plan, start_seed=start_seed, budget=config.episode_budget)
    maps = MapStack.fresh(plan.height, plan.width)
    integrate_scan(maps, env.pose, env.last_scan)
    recorder = _EpisodeRecorder(plan, maps, config.episode_budget)
    rng = np.random.default_rng(0)  # greedy sampling never draws from it

    events: list[tuple[int, int, int]] = []
    actions_log: list[str] = []
    agent = None
    if model is None:
        agent = FrontierClosestAgent(rotate_on_arrival=config.frontier_rotate)
    else:
        features = extract_features(model, maps)
        option = _greedy_option(model, features)

    macro_index = 0
    while not env.done and recorder.curve[-1] < 1.0 and macro_index < config.episode_budget:
        if agent is not None:
            try:
                action = agent.next_action(maps, env.pose)
            except NoFrontier:
                break
            option_id = OptionId.FRONTIER_NAVIGATION.value
        else:
            channels = np.stack(maps.channels())
            try:
                action, _ = model.sample_action(option, features, channels, rng, greedy=True)
            except NoFrontier:
                if (
                    len(model.available_options()) > 1
                    and option is not OptionId.LOOK_AROUND
                ):
                    option = OptionId.LOOK_AROUND
                    continue
                break
            option_id = option.value
        events.append((macro_index, option_id, env.state.timestep))
        transcript = _run_macro(
            env, plan, maps, action, config.train.macro_budget, recorder.on_step
        )
        actions_log.extend(a.value for a in transcript.actions)
        macro_index += 1
        if agent is not None:
            agent.observe(action, transcript)
        else:
            features = extract_features(model, maps)
            if model.HAS_TERMINATION:
                if termination_prob(model, features, option) > 0.5:
                    option = _greedy_option(model, features)

    recorder.finish()
    series = MetricSeries(
        method=config.method,
        plan_seed=plan_seed,
        episode_idx=episode_idx,
        coverage_by_timestep=recorder.curve,
        coverage_by_length=recorder.by_length,
        option_events=events,
    )
    log = {
        "fingerprint": config.fingerprint(),
        "method": config.method,
        "plan_seed": plan_seed,
        "width": plan.width,
        "height": plan.height,
        "gen_params": _gen_params_tuple(config.eval_plan_params()),
        "start_seed": start_seed,
        "budget": config.episode_budget,
        "n_actions": len(actions_log),
        "actions": "".join(actions_log),
        "final_coverage": recorder.curve[-1],
    }
    return series, log


def run_eval(
    config: ExperimentConfig, checkpoint: str | None = None, plots: bool = False
) -> list[MetricSeries]:
    """Evaluate the configured method on every held-out plan and start seed."""
    fingerprint = config.fingerprint()
    if config.method == "frontier":
        if checkpoint is not None:
            raise ConfigError("the frontier method takes no checkpoint")
        model = None
    else:
        if checkpoint is None:
            raise ConfigError(f"method {config.method!r} requires --checkpoint")
        model, manifest = load_agent_model(checkpoint)
        _check_artifact(manifest, fingerprint, METHOD_MODELS[config.method].KIND, checkpoint)
        expected = ModelConfig(height=config.height, width=config.width)
        if model.config != expected:
            raise ConfigError(
                f"checkpoint {checkpoint!r} dims do not match the configured plans"
            )

    specs = [
        (plan_seed, episode_idx)
        for plan_seed in range(*config.eval_seeds)
        for episode_idx in range(config.episodes_per_plan)
    ]
    params = config.eval_plan_params()

    def run_one(spec: tuple[int, int]) -> tuple[MetricSeries, dict]:
        plan_seed, episode_idx = spec
        plan = floorplan_for(plan_seed, config.width, config.height, params)
        return _eval_episode(config, model, plan, plan_seed, episode_idx)

    threads = _thread_cap(len(specs))
    if threads == 1:
        results = [run_one(spec) for spec in specs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, specs))

    os.makedirs(config.out_dir, exist_ok=True)
    traj_dir = os.path.join(config.out_dir, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    for series, log in results:
        name = f"trajectory_{series.plan_seed:06d}_{series.episode_idx:02d}.json"
        with open(os.path.join(traj_dir, name), "w", encoding="utf-8") as fh:
            json.dump(log, fh, sort_keys=True)
            fh.write("\n")
    all_series = [series for series, _ in results]
    save_series(os.path.join(config.out_dir, "series.json"), fingerprint, all_series)
    emit_report(all_series, config.out_dir, fingerprint, plots=plots)
    return all_series


def save_series(path: str, fingerprint: str, series_list: list[MetricSeries]) -> None:
    payload = {
        "fingerprint": fingerprint,
        "series": [dataclasses.asdict(s) for s in series_list],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_series(path: str) -> tuple[str, list[MetricSeries]]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    series_list = []
    for entry in payload["series"]:
        series_list.append(
            MetricSeries(
                method=entry["method"],
                plan_seed=int(entry["plan_seed"]),
                episode_idx=int(entry["episode_idx"]),
                coverage_by_timestep=[float(c) for c in entry["coverage_by_timestep"]],
                coverage_by_length=[
                    (int(l), float(c)) for l, c in entry["coverage_by_length"]
                ],
                option_events=[
                    (int(m), int(o), int(t)) for m, o, t in entry["option_events"]
                ],
            )
        )
    return payload["fingerprint"], series_list


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def summary_rows(series_list: list[MetricSeries]) -> list[tuple[str, float, float]]:
    """Per-method mean coverage after 500 and after 1000 atomic steps."""
    by_method: dict[str, list[MetricSeries]] = {}
    for series in series_list:
        by_method.setdefault(series.method, []).append(series)
    rows = []
    for method in sorted(by_method):
        group = by_method[method]
        at_500 = float(np.mean([s.coverage_at(500) for s in group]))
        at_1000 = float(np.mean([s.coverage_at(1000) for s in group]))
        rows.append((method, at_500, at_1000))
    return rows


def emit_report(
    series_list: list[MetricSeries], out_dir: str, fingerprint: str, plots: bool = False
) -> list[str]:
    """Write the four canonical CSVs (and optionally plots); returns the paths."""
    if not series_list:
        raise ValueError("no metric series to report")
    os.makedirs(out_dir, exist_ok=True)
    ordered = sorted(series_list, key=lambda s: (s.method, s.plan_seed, s.episode_idx))

    paths = []

    def csv(name: str, header: tuple, rows) -> None:
        path = os.path.join(out_dir, name)
        _write_csv(path, fingerprint, header, rows)
        paths.append(path)

    csv(
        "coverage_vs_timestep.csv",
        ("method", "trajectory", "timestep", "coverage"),
        (
            (s.method, s.trajectory_id, t, c)
            for s in ordered
            for t, c in enumerate(s.coverage_by_timestep)
        ),
    )
    csv(
        "coverage_vs_length.csv",
        ("method", "trajectory", "length", "coverage"),
        (
            (s.method, s.trajectory_id, length, c)
            for s in ordered
            for length, c in s.coverage_by_length
        ),
    )
    csv(
        "option_selections.csv",
        ("method", "trajectory", "macro_index", "option_id", "start_timestep"),
        (
            (s.method, s.trajectory_id, m, o, t)
            for s in ordered
            for m, o, t in s.option_events
        ),
    )
    csv(
        "summary.csv",
        ("method", "coverage_at_500", "coverage_at_1000"),
        summary_rows(ordered),
    )
    if plots:
        paths.extend(_render_plots(ordered, out_dir))
    return paths


def _render_plots(series_list: list[MetricSeries], out_dir: str) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted({s.method for s in series_list})
    paths = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in methods:
        curves = np.array(
            [s.coverage_by_timestep for s in series_list if s.method == method]
        )
        ax.plot(np.arange(curves.shape[1]), curves.mean(axis=0), label=method)
    ax.set_xlabel("atomic timestep")
    ax.set_ylabel("coverage")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    path = os.path.join(out_dir, "coverage_vs_timestep.png")
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in methods:
        group = [s for s in series_list if s.method == method]
        max_len = max(s.coverage_by_length[-1][0] for s in group)
        grid = np.arange(max_len + 1)
        resampled = []
        for s in group:
            lengths = np.array([l for l, _ in s.coverage_by_length])
            covs = np.array([c for _, c in s.coverage_by_length])
            idx = np.searchsorted(lengths, grid, side="right") - 1
            resampled.append(covs[np.clip(idx, 0, len(covs) - 1)])
        ax.plot(grid, np.mean(resampled, axis=0), label=method)
    ax.set_xlabel("trajectory length (forward steps)")
    ax.set_ylabel("coverage")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    path = os.path.join(out_dir, "coverage_vs_length.png")
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(methods), 1)
    for i, method in enumerate(methods):
        counts = [0, 0]
        for s in series_list:
            if s.method == method:
                for _, option_id, _ in s.option_events:
                    counts[option_id - 1] += 1
        offsets = np.arange(2) + (i - (len(methods) - 1) / 2) * width
        ax.bar(offsets, counts, width=width, label=method)
    ax.set_xticks([0, 1], ["navigation", "look-around"])
    ax.set_ylabel("macro-actions")
    ax.legend()
    path = os.path.join(out_dir, "option_histogram.png")
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

_LOG_FIELDS_REQUIRED = (
    "plan_seed",
    "width",
    "height",
    "gen_params",
    "start_seed",
    "budget",
    "n_actions",
    "actions",
    "final_coverage",
)


def replay(log_path: str, out_dir: str) -> tuple[str, float, bool]:
    """Re-execute a recorded episode and render its final map.

    Returns (image path, replayed coverage, truncated flag).  A complete log
    whose replayed coverage differs from the recorded value is an error; a
    truncated log (fewer actions than ``n_actions``) renders the prefix.
    """
    with open(log_path, encoding="utf-8") as fh:
        log = json.load(fh)
    for key in _LOG_FIELDS_REQUIRED:
        if key not in log:
            raise ValueError(f"trajectory log {log_path!r} is missing field {key!r}")
    params = None
    if log["gen_params"] is not None:
        params = GenParams(*(int(v) for v in log["gen_params"]))
    plan = generate_floorplan(int(log["plan_seed"]), int(log["width"]), int(log["height"]), params)
    env = Episode(plan, start_seed=int(log["start_seed"]), budget=int(log["budget"]))
    maps = MapStack.fresh(plan.height, plan.width)
    integrate_scan(maps, env.pose, env.last_scan)
    poses = [env.pose]
    for ch in log["actions"]:
        if env.done:
            raise ValueError("trajectory log has more actions than the episode budget")
        scan, _ = env.step(AtomicAction(ch))
        integrate_scan(maps, env.pose, scan)
        poses.append(env.pose)
    truncated = len(log["actions"]) < int(log["n_actions"])
    replayed = coverage(maps, plan).coverage
    if not truncated and replayed != log["final_coverage"]:
        raise ValueError(
            f"replayed coverage {replayed!r} does not match the "
            f"recorded value {log['final_coverage']!r}"
        )
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(log_path))[0]
    image = os.path.join(out_dir, f"{stem}.png")
    render_map(maps, poses, image)
    return image, replayed, truncated


def render_map(maps: MapStack, poses, path: str) -> None:
    """Final-map picture: unexplored gray, free white, obstacles dark,
    frontier dots, trajectory line, current pose marker."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = np.full((maps.height, maps.width, 3), 0.62)
    img[maps.explored & ~maps.occupancy] = (1.0, 1.0, 1.0)
    img[maps.explored & maps.occupancy] = (0.12, 0.12, 0.12)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(img, origin="upper", interpolation="nearest")
    fy, fx = np.nonzero(maps.frontier)
    if fx.size:
        ax.scatter(fx, fy, s=10, c="tab:red", marker=".", label="frontier")
    xs = [p.x for p in poses]
    ys = [p.y for p in poses]
    ax.plot(xs, ys, c="tab:blue", lw=1.1, label="trajectory")
    ax.scatter([xs[-1]], [ys[-1]], s=26, c="tab:green", marker="o", zorder=3)
    ax.set_axis_off()
    fig.savefig(path, dpi=140, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Self-test oracles
# ---------------------------------------------------------------------------


def _selftest_frontier() -> None:
    rng = np.random.default_rng(11)
    for _ in range(3):
        explored = rng.random((20, 20)) < 0.5
        occupancy = rng.random((20, 20)) < 0.2
        got = compute_frontier(explored, occupancy)
        expect = np.zeros_like(explored)
        for y in range(20):
            for x in range(20):
                if not explored[y, x] or occupancy[y, x]:
                    continue
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < 20 and 0 <= nx < 20 and not explored[ny, nx]:
                        expect[y, x] = True
        if not np.array_equal(got, expect):
            raise AssertionError("frontier mask differs from the per-cell rule")


def _selftest_wavefront() -> None:
    rng = np.random.default_rng(12)
    for _ in range(3):
        occupancy = rng.random((18, 18)) < 0.3
        occupancy[0, :] = occupancy[-1, :] = True
        occupancy[:, 0] = occupancy[:, -1] = True
        free = np.argwhere(~occupancy)
        sy, sx = free[0]
        got = wavefront_distances(occupancy, (int(sx), int(sy)))
        expect = np.full((18, 18), -1, dtype=np.int64)
        expect[sy, sx] = 0
        queue = deque([(int(sx), int(sy))])
        while queue:
            x, y = queue.popleft()
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if 0 <= nx < 18 and 0 <= ny < 18 and not occupancy[ny, nx]:
                    if expect[ny, nx] < 0:
                        expect[ny, nx] = expect[y, x] + 1
                        queue.append((nx, ny))
        if not np.array_equal(got, expect):
            raise AssertionError("wavefront distances differ from breadth-first search")


def _selftest_arithmetic() -> None:
    if abs(advantage(0.5, 1.0, 2.0, 0.99) - (-0.51)) > 1e-12:
        raise AssertionError("advantage arithmetic off")
    if abs(td_target(0.5, 0.0, 1.0, 3.0, 0.99) - (0.5 + 0.99 * 1.0)) > 1e-12:
        raise AssertionError("td_target with no termination off")
    if abs(td_target(0.5, 1.0, 1.0, 3.0, 0.99) - (0.5 + 0.99 * 3.0)) > 1e-12:
        raise AssertionError("td_target with certain termination off")
    mix = 0.5 + 0.99 * (0.75 * 1.0 + 0.25 * 3.0)
    if abs(td_target(0.5, 0.25, 1.0, 3.0, 0.99) - mix) > 1e-12:
        raise AssertionError("td_target interpolation off")


def _selftest_pack() -> None:
    rng = np.random.default_rng(13)
    channels = rng.random((5, 24, 24)) < 0.5
    packed = pack_state(channels)
    if not np.array_equal(unpack_state(packed, channels.shape), channels):
        raise AssertionError("packed state does not round-trip")


def _open_plan(width: int, height: int) -> FloorPlan:
    grid = np.zeros((height, width), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return FloorPlan(width=width, height=height, obstacles=grid)


def _selftest_rotation() -> None:
    plan = _open_plan(14, 12)
    env = Episode(plan, start_seed=1, budget=100)
    maps = MapStack.fresh(plan.height, plan.width)
    integrate_scan(maps, env.pose, env.last_scan)
    before = env.pose.heading
    transcript = execute_lookaround(env, plan, maps, 360, budget=50)
    if not transcript.terminal_state_reached or env.pose.heading != before:
        raise AssertionError("a full look-around did not return to the start heading")


def _selftest_navigation() -> None:
    plan = _open_plan(14, 12)
    env = Episode(plan, start_seed=2, budget=300)
    maps = MapStack.fresh(plan.height, plan.width)
    integrate_scan(maps, env.pose, env.last_scan)
    goal = (plan.width - 2, plan.height - 2)
    transcript = execute_navigation(env, plan, maps, goal, budget=200)
    if not transcript.terminal_state_reached or env.pose.cell != goal:
        raise AssertionError("navigation on an open plan did not reach its goal")


def _selftest_value_gradient() -> None:
    config = ModelConfig(height=16, width=16)
    model = PolicyModel.init(config, seed=5)
    rng = np.random.default_rng(6)
    for key, value in model.params.items():
        if key.endswith(".b"):
            value += 0.05 * rng.standard_normal(value.shape)
    x = rng.standard_normal((1, 5, 16, 16))

    def loss() -> float:
        feats, _ = model.trunk_forward(x)
        return model.option_value(feats[0], OptionId.FRONTIER_NAVIGATION)

    grads = model.zero_grads()
    feats, cache = model.trunk_forward(x)
    dfeat = model.option_value_backward(feats[0], OptionId.FRONTIER_NAVIGATION, 1.0, grads)
    model.trunk_backward(cache, dfeat[None], grads)
    keys = model.trunk_keys() + ["value1.w", "value1.b"]
    direction = {k: rng.standard_normal(model.params[k].shape) for k in keys}
    analytic = sum(float((grads[k] * direction[k]).sum()) for k in keys)
    best = np.inf
    for h in (1e-6, 1e-7):
        for k in keys:
            model.params[k] += h * direction[k]
        plus = loss()
        for k in keys:
            model.params[k] -= 2.0 * h * direction[k]
        minus = loss()
        for k in keys:
            model.params[k] += h * direction[k]
        numeric = (plus - minus) / (2.0 * h)
        best = min(best, abs(numeric - analytic) / max(abs(analytic), 1e-12))
    if best > 1e-5:
        raise AssertionError(f"value-head directional derivative off by {best:.2e}")


def selftest() -> bool:
    """Check the independent oracles; one PASS/FAIL line per check."""
    checks = (
        ("frontier-mask-oracle", _selftest_frontier),
        ("wavefront-bfs-oracle", _selftest_wavefront),
        ("return-arithmetic", _selftest_arithmetic),
        ("state-pack-roundtrip", _selftest_pack),
        ("rotation-closure", _selftest_rotation),
        ("navigation-reaches-goal", _selftest_navigation),
        ("value-gradient-fd", _selftest_value_gradient),
    )
    all_ok = True
    for name, check in checks:
        try:
            check()
        except Exception as exc:
            all_ok = False
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    return all_ok


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--method", choices=METHODS, help="override the configured method")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optionex",
        description="Option-based autonomous exploration experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the configured method")
    _add_common_flags(p_train)
    p_train.add_argument("--checkpoint", help="resume from this checkpoint")

    p_eval = sub.add_parser("eval", help="evaluate on the held-out plans")
    _add_common_flags(p_eval)
    p_eval.add_argument("--checkpoint", help="trained model to evaluate")
    p_eval.add_argument("--plots", action="store_true", help="also render plot images")

    p_report = sub.add_parser("report", help="merge series files into one report")
    p_report.add_argument("series", nargs="+", help="series.json files to merge")
    p_report.add_argument("--out", required=True, help="report output directory")
    p_report.add_argument("--plots", action="store_true", help="also render plot images")

    p_replay = sub.add_parser("replay", help="re-run a recorded trajectory")
    p_replay.add_argument("log", help="trajectory json written by eval")
    p_replay.add_argument("--out", default=".", help="where to write the map image")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = {
        "method": args.method,
        "master_seed": args.seed,
        "out_dir": args.out,
    }
    return load_experiment_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            config = _config_from_args(args)
            final = run_train(config, resume=args.checkpoint)
            print(f"final checkpoint: {final}")
        elif args.command == "eval":
            config = _config_from_args(args)
            series = run_eval(config, checkpoint=args.checkpoint, plots=args.plots)
            for method, at_500, at_1000 in summary_rows(series):
                print(f"{method}: coverage@500={at_500:.4f} coverage@1000={at_1000:.4f}")
            print(f"report written to {config.out_dir}")
        elif args.command == "report":
            loaded = [load_series(path) for path in args.series]
            fingerprints = {fp for fp, _ in loaded}
            if len(fingerprints) > 1:
                raise ConfigError(
                    f"series files mix fingerprints {sorted(fingerprints)}"
                )
            merged = [s for _, group in loaded for s in group]
            emit_report(merged, args.out, fingerprints.pop(), plots=args.plots)
            print(f"report written to {args.out}")
        elif args.command == "replay":
            image, replayed, truncated = replay(args.log, args.out)
            suffix = " (truncated prefix)" if truncated else ""
            print(f"replayed coverage {replayed:.4f}{suffix}; map image: {image}")
        else:
            return 0 if selftest() else 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OptionexError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
