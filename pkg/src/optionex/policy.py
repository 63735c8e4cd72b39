"""Option-critic model: shared conv trunk, per-option heads, checkpoint I/O.

Everything is float64 numpy with hand-written reverse-mode gradients; there
is no autodiff dependency, so the finite-difference test suite checks the
actual arithmetic used in training.

The model has two options: frontier navigation (samples a goal cell from the
current frontier set) and look-around (samples a rotation angle).  All heads
read one shared feature vector:

- trunk: 7 stride-2 3x3 convolutions and 2 fully connected layers, ReLU
  after every layer, mapping the 5-channel map stack to D features;
- frontier head: pointer-style scores, one logit per frontier cell, computed
  as enc(cell) . (M f + q) where enc is a Fourier positional encoding of the
  normalized cell coordinates (a score linear in f alone would be constant
  across cells and the softmax would ignore it);
- look-around head: 4 angle logits;
- per-option value heads and termination heads: scalar linear readouts, the
  termination logit squashed by the logistic function.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError, DimensionMismatch, NoFrontier
from .mapping import MapStack

LOOKAROUND_CHOICES = (90, 180, 270, 360)
CHECKPOINT_MAGIC = b"OPTEXCKPT1\n"


class OptionId(enum.IntEnum):
    FRONTIER_NAVIGATION = 1
    LOOK_AROUND = 2


@dataclass(frozen=True)
class MacroAction:
    """An intra-option action: a goal cell, a rotation angle, or an atomic index."""

    kind: str  # "goal" | "angle" | "atomic"
    value: tuple[int, int] | int


@dataclass(frozen=True)
class ModelConfig:
    height: int = 128
    width: int = 128
    in_channels: int = 5
    conv_channels: tuple[int, ...] = (8, 16, 16, 32, 32, 32, 32)
    fc_hidden: int = 256
    feature_dim: int = 256
    pos_harmonics: int = 4

    @property
    def encoding_dim(self) -> int:
        return 3 + 4 * self.pos_harmonics

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def conv_output_hw(height: int, width: int, n_layers: int) -> tuple[int, int]:
    """Spatial dims after the stride-2 conv stack (kernel 3, padding 1)."""
    for _ in range(n_layers):
        height = (height + 1) // 2
        width = (width + 1) // 2
    return height, width


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 stride-2 pad-1 convolution via im2col; returns (y, cols cache)."""
    batch, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))[
        :, :, ::2, ::2
    ]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch, ho * wo, cin * 9
    )
    y = cols @ w.reshape(cout, cin * 9).T + b
    return y.transpose(0, 2, 1).reshape(batch, cout, ho, wo), cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray):
    """Gradients of conv2d_forward: returns (dx, dw, db)."""
    batch, cin, h, wd = x_shape
    cout, ho, wo = dy.shape[1], dy.shape[2], dy.shape[3]
    dy_cols = dy.reshape(batch, cout, ho * wo).transpose(0, 2, 1)
    dw = np.tensordot(dy_cols, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dwin = (dy_cols @ w.reshape(cout, cin * 9)).reshape(batch, ho, wo, cin, 3, 3)
    dxp = np.zeros((batch, cin, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + 2 * ho - 1 : 2, kj : kj + 2 * wo - 1 : 2] += (
                dwin[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, 1 : h + 1, 1 : wd + 1], dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def sigmoid(x: float) -> float:
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF categorical draw; deterministic given the rng state."""
    cum = np.cumsum(probs)
    r = rng.random() * cum[-1]
    return min(int(np.searchsorted(cum, r, side="right")), len(probs) - 1)


def positional_encoding(
    cells_xy: np.ndarray, height: int, width: int, harmonics: int
) -> np.ndarray:
    """Fourier features of cell-center coordinates normalized to (0, 1).

    Layout per cell: [u, v, sin/cos(2 pi k u) for k=1..harmonics,
    sin/cos(2 pi k v) likewise, 1].
    """
    u = (cells_xy[:, 0] + 0.5) / width
    v = (cells_xy[:, 1] + 0.5) / height
    cols = [u, v]
    for k in range(1, harmonics + 1):
        cols.append(np.sin(2.0 * np.pi * k * u))
        cols.append(np.cos(2.0 * np.pi * k * u))
    for k in range(1, harmonics + 1):
        cols.append(np.sin(2.0 * np.pi * k * v))
        cols.append(np.cos(2.0 * np.pi * k * v))
    cols.append(np.ones_like(u))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


@dataclass
class TrunkCache:
    conv: list  # per layer: (input shape, cols, relu mask)
    conv_out_shape: tuple
    flat: np.ndarray
    z1_mask: np.ndarray
    a1: np.ndarray
    z2_mask: np.ndarray


class PolicyModel:
    """Parameter container plus forward/backward passes for every head.

    ``params`` maps names to float64 arrays; gradient dictionaries use the
    same keys, which keeps the optimizer, norm clipping, serialization, and
    finite-difference checks uniform.
    """

    KIND = "option_critic"
    HAS_TERMINATION = True

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "PolicyModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0EC)))
        params: dict[str, np.ndarray] = {}
        cin = config.in_channels
        for i, cout in enumerate(config.conv_channels):
            fan_in = cin * 9
            params[f"conv{i}.w"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (cout, cin, 3, 3)
            )
            params[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
        hf, wf = conv_output_hw(config.height, config.width, len(config.conv_channels))
        flat_dim = config.conv_channels[-1] * hf * wf
        params["fc1.w"] = rng.normal(
            0.0, np.sqrt(2.0 / flat_dim), (config.fc_hidden, flat_dim)
        )
        params["fc1.b"] = np.zeros(config.fc_hidden)
        params["fc2.w"] = rng.normal(
            0.0, np.sqrt(2.0 / config.fc_hidden), (config.feature_dim, config.fc_hidden)
        )
        params["fc2.b"] = np.zeros(config.feature_dim)
        params.update(cls._head_params(config, rng))
        return cls(config, params)

    @classmethod
    def _head_params(
        cls, config: ModelConfig, rng: np.random.Generator
    ) -> dict[str, np.ndarray]:
        d = config.feature_dim
        e = config.encoding_dim
        params: dict[str, np.ndarray] = {}
        params["frontier.m"] = rng.normal(0.0, 0.01, (e, d))
        params["frontier.q"] = np.zeros(e)
        params["look.w"] = rng.normal(0.0, 0.01, (4, d))
        params["look.b"] = np.zeros(4)
        for name in ("value1", "value2", "term1", "term2"):
            params[f"{name}.w"] = rng.normal(0.0, 0.01, (d,))
            params[f"{name}.b"] = np.zeros(1)
        return params

    # -- parameter groups ---------------------------------------------------

    def trunk_keys(self) -> list[str]:
        keys = []
        for i in range(len(self.config.conv_channels)):
            keys += [f"conv{i}.w", f"conv{i}.b"]
        return keys + ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]

    def policy_keys(self) -> list[str]:
        return self.trunk_keys() + ["frontier.m", "frontier.q", "look.w", "look.b"]

    def value_keys(self) -> list[str]:
        return self.trunk_keys() + ["value1.w", "value1.b", "value2.w", "value2.b"]

    def termination_keys(self) -> list[str]:
        return ["term1.w", "term1.b", "term2.w", "term2.b"]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- trunk --------------------------------------------------------------

    def trunk_forward(self, x: np.ndarray) -> tuple[np.ndarray, TrunkCache]:
        """Features for a batch of map stacks: (B, 5, H, W) -> (B, D)."""
        expected = (self.config.in_channels, self.config.height, self.config.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionMismatch(f"trunk expects (B,)+{expected}, got {x.shape}")
        a = np.ascontiguousarray(x, dtype=np.float64)
        conv_caches = []
        for i in range(len(self.config.conv_channels)):
            z, cols = conv2d_forward(a, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            conv_caches.append((a.shape, cols, z > 0.0))
            a = np.maximum(z, 0.0)
        flat = a.reshape(a.shape[0], -1)
        z1 = flat @ self.params["fc1.w"].T + self.params["fc1.b"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.params["fc2.w"].T + self.params["fc2.b"]
        feat = np.maximum(z2, 0.0)
        cache = TrunkCache(
            conv=conv_caches,
            conv_out_shape=a.shape,
            flat=flat,
            z1_mask=z1 > 0.0,
            a1=a1,
            z2_mask=z2 > 0.0,
        )
        return feat, cache

    def trunk_backward(
        self, cache: TrunkCache, dfeat: np.ndarray, grads: dict[str, np.ndarray]
    ) -> np.ndarray:
        """Accumulate trunk parameter gradients; returns the input gradient."""
        dz2 = dfeat * cache.z2_mask
        grads["fc2.w"] += dz2.T @ cache.a1
        grads["fc2.b"] += dz2.sum(axis=0)
        da1 = dz2 @ self.params["fc2.w"]
        dz1 = da1 * cache.z1_mask
        grads["fc1.w"] += dz1.T @ cache.flat
        grads["fc1.b"] += dz1.sum(axis=0)
        da = (dz1 @ self.params["fc1.w"]).reshape(cache.conv_out_shape)
        for i in reversed(range(len(self.config.conv_channels))):
            x_shape, cols, mask = cache.conv[i]
            dz = da * mask
            da, dw, db = conv2d_backward(dz, cols, x_shape, self.params[f"conv{i}.w"])
            grads[f"conv{i}.w"] += dw
            grads[f"conv{i}.b"] += db
        return da

    # -- heads (single feature vector) --------------------------------------

    def frontier_logits(
        self, features: np.ndarray, enc: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell scores enc . (M f + q); returns (logits, score vector)."""
        s = self.params["frontier.m"] @ features + self.params["frontier.q"]
        return enc @ s, s

    def frontier_backward(
        self,
        features: np.ndarray,
        enc: np.ndarray,
        dlogits: np.ndarray,
        grads: dict[str, np.ndarray],
    ) -> np.ndarray:
        ds = enc.T @ dlogits
        grads["frontier.m"] += np.outer(ds, features)
        grads["frontier.q"] += ds
        return self.params["frontier.m"].T @ ds

    def lookaround_logits(self, features: np.ndarray) -> np.ndarray:
        return self.params["look.w"] @ features + self.params["look.b"]

    def lookaround_backward(
        self, features: np.ndarray, dlogits: np.ndarray, grads: dict[str, np.ndarray]
    ) -> np.ndarray:
        grads["look.w"] += np.outer(dlogits, features)
        grads["look.b"] += dlogits
        return self.params["look.w"].T @ dlogits

    def _scalar_head(self, name: str, features: np.ndarray) -> float:
        return float(self.params[f"{name}.w"] @ features + self.params[f"{name}.b"][0])

    def _scalar_head_backward(
        self, name: str, features: np.ndarray, dout: float, grads: dict[str, np.ndarray]
    ) -> np.ndarray:
        grads[f"{name}.w"] += dout * features
        grads[f"{name}.b"] += dout
        return dout * self.params[f"{name}.w"]

    def option_value(self, features: np.ndarray, option: OptionId) -> float:
        return self._scalar_head(_VALUE_HEAD[option], features)

    def option_value_backward(
        self,
        features: np.ndarray,
        option: OptionId,
        dv: float,
        grads: dict[str, np.ndarray],
    ) -> np.ndarray:
        return self._scalar_head_backward(_VALUE_HEAD[option], features, dv, grads)

    def termination_logit(self, features: np.ndarray, option: OptionId) -> float:
        return self._scalar_head(_TERM_HEAD[option], features)

    def termination_backward(
        self,
        features: np.ndarray,
        option: OptionId,
        dlogit: float,
        grads: dict[str, np.ndarray],
    ) -> np.ndarray:
        return self._scalar_head_backward(_TERM_HEAD[option], features, dlogit, grads)

    # -- action protocol -----------------------------------------------------
    #
    # The trainer and evaluator drive every model variant through these four
    # methods, so the rollout and update loops never need to know which heads
    # a variant actually has.

    def available_options(self) -> tuple[OptionId, ...]:
        return (OptionId.FRONTIER_NAVIGATION, OptionId.LOOK_AROUND)

    def goal_cells(self, option: OptionId, channels: np.ndarray) -> np.ndarray:
        """Selectable goal cells for a goal-directed option, as (K, 2) xy."""
        return frontier_cells_xy(channels[4])

    def action_distribution(
        self, option: OptionId, features: np.ndarray, channels: np.ndarray
    ) -> tuple[np.ndarray, object]:
        """Logits over this option's action set plus a context for backward."""
        if option is OptionId.LOOK_AROUND:
            return self.lookaround_logits(features), None
        cells = self.goal_cells(option, channels)
        if len(cells) == 0:
            raise NoFrontier("no selectable goal cells")
        enc = positional_encoding(
            cells, self.config.height, self.config.width, self.config.pos_harmonics
        )
        logits, _ = self.frontier_logits(features, enc)
        return logits, (cells, enc)

    def action_to_index(self, option: OptionId, ctx: object, action: MacroAction) -> int:
        if option is OptionId.LOOK_AROUND:
            return LOOKAROUND_CHOICES.index(action.value)
        cells, _ = ctx
        x, y = action.value
        hits = np.flatnonzero((cells[:, 0] == x) & (cells[:, 1] == y))
        if len(hits) == 0:
            raise ValueError(f"goal {action.value} is not a selectable cell")
        return int(hits[0])

    def action_backward(
        self,
        option: OptionId,
        ctx: object,
        features: np.ndarray,
        dlogits: np.ndarray,
        grads: dict[str, np.ndarray],
    ) -> np.ndarray:
        if option is OptionId.LOOK_AROUND:
            return self.lookaround_backward(features, dlogits, grads)
        _, enc = ctx
        return self.frontier_backward(features, enc, dlogits, grads)

    def sample_action(
        self,
        option: OptionId,
        features: np.ndarray,
        channels: np.ndarray,
        rng: np.random.Generator,
        greedy: bool = False,
    ) -> tuple[MacroAction, float]:
        """Draw one intra-option action; returns (action, log-probability)."""
        logits, ctx = self.action_distribution(option, features, channels)
        probs = softmax(logits)
        idx = int(np.argmax(probs)) if greedy else sample_index(probs, rng)
        logprob = float(log_softmax(logits)[idx])
        if option is OptionId.LOOK_AROUND:
            return MacroAction("angle", LOOKAROUND_CHOICES[idx]), logprob
        cells, _ = ctx
        return MacroAction("goal", (int(cells[idx, 0]), int(cells[idx, 1]))), logprob


_VALUE_HEAD = {OptionId.FRONTIER_NAVIGATION: "value1", OptionId.LOOK_AROUND: "value2"}
_TERM_HEAD = {OptionId.FRONTIER_NAVIGATION: "term1", OptionId.LOOK_AROUND: "term2"}


# ---------------------------------------------------------------------------
# Policy-level operations
# ---------------------------------------------------------------------------


def extract_features(model: PolicyModel, maps: MapStack) -> np.ndarray:
    """Feature vector of one map stack."""
    feat, _ = model.trunk_forward(maps.as_features()[None])
    return feat[0]


def option_values(model: PolicyModel, features: np.ndarray) -> tuple[float, float]:
    return (
        model.option_value(features, OptionId.FRONTIER_NAVIGATION),
        model.option_value(features, OptionId.LOOK_AROUND),
    )


def choose_option(v1: float, v2: float) -> OptionId:
    """Greedy policy over options; the tie goes to frontier navigation."""
    return OptionId.LOOK_AROUND if v2 > v1 else OptionId.FRONTIER_NAVIGATION


def frontier_cells_xy(frontier: np.ndarray) -> np.ndarray:
    """Frontier cells as (K, 2) of (x, y), in row-major scan order."""
    yx = np.argwhere(frontier)
    return yx[:, ::-1]


def frontier_distribution(
    model: PolicyModel, features: np.ndarray, frontier: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(cells, probs, logits) of the goal softmax over the frontier set."""
    cells = frontier_cells_xy(frontier)
    if len(cells) == 0:
        raise NoFrontier("frontier set is empty")
    enc = positional_encoding(
        cells, model.config.height, model.config.width, model.config.pos_harmonics
    )
    logits, _ = model.frontier_logits(features, enc)
    return cells, softmax(logits), logits


def sample_frontier_goal(
    model: PolicyModel,
    features: np.ndarray,
    frontier: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
) -> tuple[tuple[int, int], float]:
    """Draw a goal cell from the frontier softmax; argmax when greedy."""
    cells, probs, logits = frontier_distribution(model, features, frontier)
    idx = int(np.argmax(probs)) if greedy else sample_index(probs, rng)
    logprob = float(log_softmax(logits)[idx])
    return (int(cells[idx, 0]), int(cells[idx, 1])), logprob


def sample_lookaround_angle(
    model: PolicyModel,
    features: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
) -> tuple[int, float]:
    """Draw a rotation angle from the 4-way softmax; argmax when greedy."""
    logits = model.lookaround_logits(features)
    probs = softmax(logits)
    idx = int(np.argmax(probs)) if greedy else sample_index(probs, rng)
    return LOOKAROUND_CHOICES[idx], float(log_softmax(logits)[idx])


def termination_prob(model: PolicyModel, features: np.ndarray, option: OptionId) -> float:
    """beta of the given option at this state, strictly inside (0, 1)."""
    return sigmoid(model.termination_logit(features, option))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, config: dict, params: dict[str, np.ndarray]) -> None:
    """Versioned binary dump: magic, JSON config block, raw LE float64 tensors."""
    manifest = {
        "config": config,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (blob_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        manifest = json.loads(data[off : off + blob_len].decode("utf-8"))
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable config block") from exc
    off += blob_len
    params: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        )
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    return manifest["config"], params


def save_model(model: PolicyModel, path: str, extra: dict | None = None) -> None:
    config = {"kind": type(model).KIND, "model": model.config.to_dict()}
    if extra:
        config.update(extra)
    save_checkpoint(path, config, model.params)


def load_model_as(cls: type, path: str) -> tuple[PolicyModel, dict]:
    """Load a checkpoint as the given model class, validating kind and shapes."""
    config, params = load_checkpoint(path)
    if config.get("kind") != cls.KIND:
        raise CheckpointError(f"{path}: checkpoint kind {config.get('kind')!r}")
    model_config = ModelConfig.from_dict(config["model"])
    expected = cls.init(model_config, seed=0).params
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter set does not match config")
    for k in expected:
        if expected[k].shape != params[k].shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {params[k].shape}")
    return cls(model_config, params), config


def load_model(path: str) -> tuple[PolicyModel, dict]:
    """Load a two-option model; returns (model, full config block)."""
    return load_model_as(PolicyModel, path)
