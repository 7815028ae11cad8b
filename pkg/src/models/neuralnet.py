"""
Convolutional repair policy, written directly against numpy.

Architecture: three 3x3 same-padded convolutions with ReLU, a 2x2 max pool
(stride 2, floor) after the second, then a fully connected layer to one logit
per tile and a softmax. Trained with RMSprop on categorical cross-entropy.

Tensors are channels-last: observations are (N, crop, crop, channels) and
convolution weights are (3, 3, in, out).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax
from tqdm import tqdm

from .podgen import Dataset, ObservationSpec, derive_rng

logger = logging.getLogger(__name__)

PARAM_NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc.w", "fc.b")
CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_WEIGHTS = "weights.bin"
_BLOB_DTYPE = np.dtype("<f4")


class NetworkShapeError(ValueError):
    """Raised when layer shapes cannot be derived or inputs do not fit."""


class CheckpointError(ValueError):
    """Raised when a checkpoint manifest or weight blob is unusable."""


@dataclass(frozen=True)
class NetworkSpec:
    # (crop, crop, channels)
    input_shape: Tuple[int, int, int]
    action_count: int
    conv_channels: Tuple[int, int, int] = (128, 128, 256)
    kernel_size: int = 3
    pool_size: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))

        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise NetworkShapeError(f"Input shape must be three positive dims, got {self.input_shape}")
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise NetworkShapeError(f"Need three positive conv channel counts, got {self.conv_channels}")
        if self.action_count < 2:
            raise NetworkShapeError(f"Need at least 2 actions, got {self.action_count}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise NetworkShapeError(f"Kernel size must be odd, got {self.kernel_size}")

        pooled_h, pooled_w = self.pooled_hw
        if pooled_h < 1 or pooled_w < 1:
            raise NetworkShapeError(
                f"Pooling a {self.input_shape[0]}x{self.input_shape[1]} input by "
                f"{self.pool_size} collapses to zero"
            )

    @classmethod
    def for_observation(
            cls,
            obs_spec: ObservationSpec,
            action_count: int,
            conv_channels: Sequence[int] = (128, 128, 256),
    ) -> "NetworkSpec":
        return cls(input_shape=obs_spec.shape, action_count=action_count, conv_channels=tuple(conv_channels))

    @property
    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec(crop_size=self.input_shape[0], channel_count=self.input_shape[2])

    @property
    def pooled_hw(self) -> Tuple[int, int]:
        return self.input_shape[0] // self.pool_size, self.input_shape[1] // self.pool_size

    @property
    def flat_features(self) -> int:
        pooled_h, pooled_w = self.pooled_hw
        return pooled_h * pooled_w * self.conv_channels[2]

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.kernel_size
        c_in = self.input_shape[2]
        c1, c2, c3 = self.conv_channels
        return {
            "conv1.w": (k, k, c_in, c1),
            "conv1.b": (c1,),
            "conv2.w": (k, k, c1, c2),
            "conv2.b": (c2,),
            "conv3.w": (k, k, c2, c3),
            "conv3.b": (c3,),
            "fc.w": (self.flat_features, self.action_count),
            "fc.b": (self.action_count,),
        }

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "action_count": self.action_count,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "pool_size": self.pool_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(data["input_shape"]),
            action_count=int(data["action_count"]),
            conv_channels=tuple(data["conv_channels"]),
            kernel_size=int(data.get("kernel_size", 3)),
            pool_size=int(data.get("pool_size", 2)),
        )


@dataclass
class NetworkState:
    params: Dict[str, np.ndarray]
    # RMSprop running averages of squared gradients, keyed like params
    accumulators: Dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState(
            params={k: v.copy() for k, v in self.params.items()},
            accumulators={k: v.copy() for k, v in self.accumulators.items()},
            seed=self.seed,
        )

    def astype(self, dtype) -> "NetworkState":
        return NetworkState(
            params={k: v.astype(dtype) for k, v in self.params.items()},
            accumulators={k: v.astype(dtype) for k, v in self.accumulators.items()},
            seed=self.seed,
        )

    def check_shapes(self, spec: NetworkSpec) -> None:
        for name, shape in spec.parameter_shapes().items():
            if name not in self.params:
                raise NetworkShapeError(f"Missing parameter {name}")
            if self.params[name].shape != shape:
                raise NetworkShapeError(
                    f"Parameter {name} has shape {self.params[name].shape}, spec needs {shape}"
                )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    epochs: int = 500
    rho: float = 0.9
    epsilon: float = 1e-8
    # None reuses the initialisation seed
    shuffle_seed: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be at least 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"Learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"Epoch count must be at least 1, got {self.epochs}")
        if not 0 < self.rho < 1:
            raise ValueError(f"RMSprop decay must be in (0, 1), got {self.rho}")
        if self.epsilon <= 0:
            raise ValueError(f"RMSprop epsilon must be positive, got {self.epsilon}")


@dataclass
class TrainResult:
    state: NetworkState
    loss_history: List[float] = field(default_factory=list)


def init_network(spec: NetworkSpec, seed: int) -> NetworkState:
    """Uniform weights in +-sqrt(6 / fan_in), zero biases, zero accumulators."""
    rng = np.random.default_rng(seed)
    params, accumulators = {}, {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
        accumulators[name] = np.zeros(shape, dtype=np.float32)
    return NetworkState(params=params, accumulators=accumulators, seed=seed)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 convolution. Returns the output and the im2col matrix."""
    n, h, wd, c_in = x.shape
    k = w.shape[0]
    pad = k // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # (n, h, wd, c_in, k, k) -> rows ordered (ki, kj, c_in) to match w.reshape
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, k * k * c_in)
    out = cols @ w.reshape(k * k * c_in, -1) + b
    return out.reshape(n, h, wd, -1), cols


def conv2d_backward(
        dout: np.ndarray,
        cols: np.ndarray,
        x_shape: Tuple[int, ...],
        w: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, h, wd, c_in = x_shape
    k = w.shape[0]
    pad = k // 2
    d2 = dout.reshape(-1, w.shape[3])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(k * k * c_in, -1).T).reshape(n, h, wd, k, k, c_in)
    dpadded = np.zeros((n, h + 2 * pad, wd + 2 * pad, c_in), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dpadded[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dpadded[:, pad:pad + h, pad:pad + wd, :], dw, db


def maxpool_forward(x: np.ndarray, size: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool; trailing rows/cols that do not fill a window are dropped."""
    n, h, w, c = x.shape
    ph, pw = h // size, w // size
    trimmed = x[:, :ph * size, :pw * size, :]
    windows = (
        trimmed.reshape(n, ph, size, pw, size, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ph, pw, c, size * size)
    )
    index = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    return out, index


def maxpool_backward(dout: np.ndarray, index: np.ndarray, x_shape: Tuple[int, ...], size: int = 2) -> np.ndarray:
    n, h, w, c = x_shape
    ph, pw = dout.shape[1], dout.shape[2]
    dwindows = np.zeros((n, ph, pw, c, size * size), dtype=dout.dtype)
    np.put_along_axis(dwindows, index[..., None], dout[..., None], axis=-1)
    dtrimmed = (
        dwindows.reshape(n, ph, pw, c, size, size)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, ph * size, pw * size, c)
    )
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :ph * size, :pw * size, :] = dtrimmed
    return dx


def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits: (softmax - onehot) / N."""
    n, actions = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ValueError(f"Expected {n} targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= actions:
        raise ValueError(f"Targets must lie in [0, {actions}), got range [{targets.min()}, {targets.max()}]")

    rows = np.arange(n)
    log_probs = log_softmax(logits, axis=1)
    loss = float(-log_probs[rows, targets].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, targets] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def _check_input(spec: NetworkSpec, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise NetworkShapeError(f"Input batch shape {x.shape} does not match network input {spec.input_shape}")


def forward_logits(state: NetworkState, spec: NetworkSpec, x: np.ndarray) -> Tuple[np.ndarray, dict]:
    """Batch forward pass returning logits and the cache needed for backprop."""
    _check_input(spec, x)
    p = state.params
    x = x.astype(p["conv1.w"].dtype, copy=False)

    z1, cols1 = conv2d_forward(x, p["conv1.w"], p["conv1.b"])
    a1, mask1 = relu(z1)
    z2, cols2 = conv2d_forward(a1, p["conv2.w"], p["conv2.b"])
    a2, mask2 = relu(z2)
    pooled, pool_index = maxpool_forward(a2, spec.pool_size)
    z3, cols3 = conv2d_forward(pooled, p["conv3.w"], p["conv3.b"])
    a3, mask3 = relu(z3)
    flat = a3.reshape(len(x), -1)
    logits = flat @ p["fc.w"] + p["fc.b"]

    cache = {
        "shapes": (x.shape, a1.shape, a2.shape, pooled.shape, a3.shape),
        "cols": (cols1, cols2, cols3),
        "masks": (mask1, mask2, mask3),
        "pool_index": pool_index,
        "flat": flat,
    }
    return logits, cache


def backward(state: NetworkState, spec: NetworkSpec, cache: dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    p = state.params
    x_shape, a1_shape, a2_shape, pooled_shape, a3_shape = cache["shapes"]
    cols1, cols2, cols3 = cache["cols"]
    mask1, mask2, mask3 = cache["masks"]

    grads = {
        "fc.w": cache["flat"].T @ dlogits,
        "fc.b": dlogits.sum(axis=0),
    }
    da3 = (dlogits @ p["fc.w"].T).reshape(a3_shape)
    dpooled, grads["conv3.w"], grads["conv3.b"] = conv2d_backward(da3 * mask3, cols3, pooled_shape, p["conv3.w"])
    da2 = maxpool_backward(dpooled, cache["pool_index"], a2_shape, spec.pool_size)
    da1, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(da2 * mask2, cols2, a1_shape, p["conv2.w"])
    _, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(da1 * mask1, cols1, x_shape, p["conv1.w"])
    return grads


def predict_proba(state: NetworkState, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    logits, _ = forward_logits(state, spec, x)
    return softmax(logits.astype(np.float64), axis=1)


def forward(state: NetworkState, spec: NetworkSpec, obs: np.ndarray) -> np.ndarray:
    """Action probabilities for a single (crop, crop, channels) observation."""
    if tuple(obs.shape) != spec.input_shape:
        raise NetworkShapeError(f"Observation shape {obs.shape} does not match network input {spec.input_shape}")
    return predict_proba(state, spec, obs[None])[0]


def loss_and_gradients(
        state: NetworkState,
        spec: NetworkSpec,
        observations: np.ndarray,
        targets: np.ndarray,
) -> Tuple[float, Dict[str, np.ndarray]]:
    if len(observations) == 0:
        raise ValueError("Cannot compute a loss over an empty batch")
    logits, cache = forward_logits(state, spec, observations)
    loss, dlogits = softmax_cross_entropy(logits, targets)
    return loss, backward(state, spec, cache, dlogits)


def rmsprop_step(state: NetworkState, gradients: Dict[str, np.ndarray], config: TrainConfig) -> NetworkState:
    """
    In-place RMSprop update; returns the same state.

    v <- rho * v + (1 - rho) * g^2
    w <- w - lr * g / (sqrt(v) + eps)
    """
    for name, grad in gradients.items():
        param = state.params[name]
        if grad.shape != param.shape:
            raise NetworkShapeError(f"Gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        grad = grad.astype(param.dtype, copy=False)
        v = state.accumulators[name]
        v *= config.rho
        v += (1.0 - config.rho) * grad * grad
        param -= config.learning_rate * grad / (np.sqrt(v) + config.epsilon)
    return state


def train(
        data: Union[Dataset, np.ndarray],
        spec: NetworkSpec,
        config: TrainConfig,
        seed: int,
        targets: Optional[np.ndarray] = None,
        state: Optional[NetworkState] = None,
        show_progress: bool = False,
        start_epoch: int = 0,
) -> TrainResult:
    """
    Minibatch RMSprop training.

    `data` is either a Dataset (observations are cropped per batch) or an
    array of ready observations paired with `targets`. Each epoch draws a
    fresh permutation from derive_rng(shuffle_seed, epoch); the final short
    batch is trained too. Passing `state` and `start_epoch` continues an
    earlier run exactly where it stopped.
    """
    if isinstance(data, Dataset):
        obs_spec = spec.observation_spec
        labels = data.targets

        def batch_inputs(index: np.ndarray) -> np.ndarray:
            return data.observations(obs_spec, index)
    else:
        if targets is None:
            raise ValueError("Targets are required when training from an observation array")
        labels = np.asarray(targets, dtype=np.int64)

        def batch_inputs(index: np.ndarray) -> np.ndarray:
            return data[index]

    count = len(labels)
    if count == 0:
        raise ValueError("Cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= spec.action_count:
        raise ValueError(f"Targets must lie in [0, {spec.action_count})")

    if state is None:
        state = init_network(spec, seed)
    state.check_shapes(spec)
    shuffle_seed = seed if config.shuffle_seed is None else config.shuffle_seed

    history: List[float] = []
    log_every = max(1, config.epochs // 10)
    for epoch in tqdm(range(config.epochs), desc="Training", unit="epoch", disable=not show_progress):
        order = derive_rng(shuffle_seed, start_epoch + epoch).permutation(count)
        total = 0.0
        for begin in range(0, count, config.batch_size):
            index = order[begin:begin + config.batch_size]
            loss, grads = loss_and_gradients(state, spec, batch_inputs(index), labels[index])
            rmsprop_step(state, grads, config)
            total += loss * len(index)
        history.append(total / count)
        if (epoch + 1) % log_every == 0 or epoch == 0:
            logger.info("Epoch %d/%d loss %.5f", start_epoch + epoch + 1, start_epoch + config.epochs, history[-1])

    return TrainResult(state=state, loss_history=history)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _inventory(arrays: Dict[str, np.ndarray], prefix: str, offset: int) -> Tuple[List[dict], int]:
    entries = []
    for name in PARAM_NAMES:
        length = int(arrays[name].size) * _BLOB_DTYPE.itemsize
        entries.append({"name": prefix + name, "shape": list(arrays[name].shape), "offset": offset, "length": length})
        offset += length
    return entries, offset


def save_checkpoint(state: NetworkState, spec: NetworkSpec, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """Write manifest.json and weights.bin (little-endian float32, manifest order) into a directory."""
    state.check_shapes(spec)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    params, offset = _inventory(state.params, "", 0)
    accumulators, _ = _inventory(state.accumulators, "rmsprop/", offset)
    manifest = {
        "format": "pod-checkpoint-1",
        "dtype": "float32-le",
        "spec": spec.to_dict(),
        "seed": state.seed,
        "parameters": params + accumulators,
    }
    if extra:
        manifest["extra"] = extra

    with open(path / CHECKPOINT_WEIGHTS, "wb") as f:
        for source in (state.params, state.accumulators):
            for name in PARAM_NAMES:
                f.write(np.ascontiguousarray(source[name], dtype=_BLOB_DTYPE).tobytes())
    (path / CHECKPOINT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.debug("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[NetworkState, NetworkSpec]:
    path = Path(path)
    try:
        manifest = json.loads((path / CHECKPOINT_MANIFEST).read_text(encoding="utf-8"))
        spec = NetworkSpec.from_dict(manifest["spec"])
        seed = int(manifest["seed"])
        inventory = manifest["parameters"]
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt manifest in {path}: {e}") from None
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Manifest in {path} is missing field {e}") from None

    expected_shapes = spec.parameter_shapes()
    expected_names = list(PARAM_NAMES) + ["rmsprop/" + n for n in PARAM_NAMES]
    if [entry.get("name") for entry in inventory] != expected_names:
        raise CheckpointError(f"Manifest in {path} lists unexpected parameters")

    blob = (path / CHECKPOINT_WEIGHTS).read_bytes()
    expected_bytes = sum(int(entry["length"]) for entry in inventory)
    if len(blob) != expected_bytes:
        raise CheckpointError(
            f"{CHECKPOINT_WEIGHTS} in {path} holds {len(blob)} bytes, manifest expects {expected_bytes}"
        )

    arrays = {}
    for entry in inventory:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if shape != expected_shapes[name.replace("rmsprop/", "")]:
            raise CheckpointError(
                f"Shape mismatch for {name}: manifest inventory says {shape}, "
                f"spec derives {expected_shapes[name.replace('rmsprop/', '')]}"
            )
        count = int(np.prod(shape))
        if int(entry["length"]) != count * _BLOB_DTYPE.itemsize:
            raise CheckpointError(f"Byte length for {name} does not match its shape {shape}")
        values = np.frombuffer(blob, dtype=_BLOB_DTYPE, count=count, offset=int(entry["offset"]))
        arrays[name] = values.reshape(shape).astype(np.float32)

    state = NetworkState(
        params={n: arrays[n] for n in PARAM_NAMES},
        accumulators={n: arrays["rmsprop/" + n] for n in PARAM_NAMES},
        seed=seed,
    )
    return state, spec


def checkpoint_extra(path: Union[str, Path]) -> dict:
    """The free-form `extra` block a checkpoint was saved with (empty if none)."""
    try:
        manifest = json.loads((Path(path) / CHECKPOINT_MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt manifest in {path}: {e}") from None
    return dict(manifest.get("extra") or {})
