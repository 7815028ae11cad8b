"""
Tests for the numpy repair network: layers, gradients, RMSprop, training
and checkpoints.

Run with:
    python -m pytest tests/test_neuralnet.py
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json
import math
from pathlib import Path

import numpy as np
import pytest

from src.models.games import ZELDA, ZELDA_ALPHABET
from src.models.neuralnet import (
    CheckpointError, NetworkShapeError, NetworkSpec, NetworkState, TrainConfig, conv2d_forward,
    forward, forward_logits, init_network, load_checkpoint, loss_and_gradients, maxpool_backward,
    maxpool_forward, predict_proba, rmsprop_step, save_checkpoint, softmax_cross_entropy, train,
)
from src.models.podgen import ObservationSpec, crop_observation
from src.models.tilemap import load_levels

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def small_spec(channels=(4, 4, 8), crop=5):
    return NetworkSpec.for_observation(ObservationSpec.for_game(ZELDA, crop), ZELDA_ALPHABET.size, channels)


def random_observations(rng, count, spec):
    crop, _, channels = spec.input_shape
    tiles = rng.integers(0, channels, size=(count, crop, crop))
    return np.eye(channels, dtype=np.float32)[tiles]


# ---------------------------------------------------------------------------
# Spec and initialisation
# ---------------------------------------------------------------------------

def test_init_is_deterministic():
    spec = small_spec()
    a, b = init_network(spec, 3), init_network(spec, 3)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
        assert a.params[name].dtype == np.float32
        assert not a.accumulators[name].any()
    assert not np.array_equal(a.params["conv1.w"], init_network(spec, 4).params["conv1.w"])


def test_shape_trace_full_network():
    """crop 5, 9 channels, 8 actions: 5x5x128 -> 5x5x128 -> 2x2x128 -> 2x2x256 -> 1024 -> 8"""
    spec = NetworkSpec.for_observation(ObservationSpec.for_game(ZELDA, 5), 8)
    shapes = spec.parameter_shapes()
    assert shapes["conv1.w"] == (3, 3, 9, 128)
    assert shapes["fc.w"] == (1024, 8)
    assert spec.flat_features == 1024

    state = init_network(spec, 0)
    logits, cache = forward_logits(state, spec, np.zeros((1, 5, 5, 9), dtype=np.float32))
    _, a1, a2, pooled, a3 = cache["shapes"]
    assert (a1, a2, pooled, a3) == ((1, 5, 5, 128), (1, 5, 5, 128), (1, 2, 2, 128), (1, 2, 2, 256))
    assert logits.shape == (1, 8)


def test_spec_rejects_degenerate_shapes():
    with pytest.raises(NetworkShapeError, match="collapses"):
        NetworkSpec(input_shape=(1, 1, 9), action_count=8)
    with pytest.raises(NetworkShapeError):
        NetworkSpec(input_shape=(5, 5, 9), action_count=1)
    with pytest.raises(NetworkShapeError):
        NetworkSpec(input_shape=(5, 5, 9), action_count=8, conv_channels=(4, 4))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def test_identity_convolution():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5, 3)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[1, 1, c, c] = 1.0
    out, _ = conv2d_forward(x, w, np.zeros(3, dtype=np.float32))
    np.testing.assert_array_equal(out, x)


def test_maxpool_matches_brute_force():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 5, 4))
    out, index = maxpool_forward(x, 2)
    assert out.shape == (3, 2, 2, 4)
    for n in range(3):
        for i in range(2):
            for j in range(2):
                for c in range(4):
                    assert out[n, i, j, c] == x[n, 2 * i:2 * i + 2, 2 * j:2 * j + 2, c].max()

    # the gradient lands on each window's maximum only
    dx = maxpool_backward(np.ones_like(out), index, x.shape, 2)
    assert dx.sum() == out.size
    assert not dx[:, 4, :, :].any() and not dx[:, :, 4, :].any()
    for n, i, j, c in np.ndindex(out.shape):
        window = (slice(2 * i, 2 * i + 2), slice(2 * j, 2 * j + 2))
        assert dx[n][window][:, :, c].sum() == 1
        assert x[n][window][:, :, c][dx[n][window][:, :, c] == 1][0] == out[n, i, j, c]


def test_softmax_is_stable_for_extreme_logits():
    logits = np.array([[1e4, 0.0, -1e4], [0.0, 0.0, 0.0]])
    loss, grad = softmax_cross_entropy(logits, np.array([0, 1]))
    assert math.isfinite(loss)
    assert np.all(np.isfinite(grad))

    spec = small_spec()
    state = init_network(spec, 0)
    for name in state.params:
        state.params[name] *= 1000
    probs = predict_proba(state, spec, random_observations(np.random.default_rng(0), 4, spec))
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_cross_entropy_targets_checked():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


# ---------------------------------------------------------------------------
# Forward and loss
# ---------------------------------------------------------------------------

def test_forward_returns_probabilities():
    spec = small_spec()
    state = init_network(spec, 2)
    obs = random_observations(np.random.default_rng(2), 1, spec)[0]
    probs = forward(state, spec, obs)
    assert probs.shape == (8,)
    assert np.all(probs > 0)
    assert abs(probs.sum() - 1.0) < 1e-6

    with pytest.raises(NetworkShapeError):
        forward(state, spec, np.zeros((3, 3, 9), dtype=np.float32))


def test_zero_network_is_uniform():
    spec = small_spec()
    state = init_network(spec, 0)
    for name in state.params:
        state.params[name][...] = 0
    obs = random_observations(np.random.default_rng(0), 5, spec)

    np.testing.assert_allclose(predict_proba(state, spec, obs), 1 / 8, atol=1e-7)
    loss, _ = loss_and_gradients(state, spec, obs, np.arange(5))
    assert loss == pytest.approx(math.log(8), abs=1e-6)


def test_logit_gradient_identity():
    logits = np.array([[0.5, -1.0, 2.0]])
    _, grad = softmax_cross_entropy(logits, np.array([1]))
    expected = np.exp(logits) / np.exp(logits).sum()
    expected[0, 1] -= 1.0
    np.testing.assert_allclose(grad, expected, atol=1e-12)


def _activation_pattern(state, spec, obs):
    _, cache = forward_logits(state, spec, obs)
    return [m.copy() for m in cache["masks"]] + [cache["pool_index"].copy()]


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_gradients_match_finite_differences():
    """Every analytic gradient matches central differences (h=1e-3) on 3 random batches"""
    print("\n🧪 Testing gradients against finite differences...")
    spec = small_spec(channels=(4, 4, 8), crop=5)
    h = 1e-3
    checked = skipped = 0
    for batch_seed in range(3):
        rng = np.random.default_rng(100 + batch_seed)
        state = init_network(spec, batch_seed).astype(np.float64)
        for name in ("conv1.b", "conv2.b", "conv3.b", "fc.b"):
            state.params[name][...] = rng.normal(0.0, 0.1, size=state.params[name].shape)
        obs = random_observations(rng, 4, spec).astype(np.float64)
        targets = rng.integers(0, spec.action_count, size=4)

        _, grads = loss_and_gradients(state, spec, obs, targets)
        base_pattern = _activation_pattern(state, spec, obs)
        for name, param in state.params.items():
            for index in np.ndindex(param.shape):
                original = param[index]
                param[index] = original + h
                plus, _ = loss_and_gradients(state, spec, obs, targets)
                plus_pattern = _activation_pattern(state, spec, obs)
                param[index] = original - h
                minus, _ = loss_and_gradients(state, spec, obs, targets)
                minus_pattern = _activation_pattern(state, spec, obs)
                param[index] = original

                # a ReLU or pooling switch inside the stencil makes the difference meaningless
                if not (_same_pattern(base_pattern, plus_pattern) and _same_pattern(base_pattern, minus_pattern)):
                    skipped += 1
                    continue
                numeric = (plus - minus) / (2 * h)
                analytic = grads[name][index]
                assert abs(analytic - numeric) <= 1e-3 * (abs(analytic) + abs(numeric)) + 1e-7, \
                    f"{name}{index}: analytic {analytic}, numeric {numeric}"
                checked += 1
    assert checked > 1000
    assert skipped < 0.25 * (checked + skipped)
    print(f"   ✅ {checked} gradients checked, {skipped} skipped at activation switches")


# ---------------------------------------------------------------------------
# Optimiser and training
# ---------------------------------------------------------------------------

def _scalar_state(w=0.0):
    return NetworkState(params={"w": np.array([w])}, accumulators={"w": np.array([0.0])})


def test_rmsprop_single_scalar():
    """v = 0.1, dw = 0.001 / (sqrt(0.1) + 1e-8)"""
    state = rmsprop_step(_scalar_state(), {"w": np.array([1.0])}, TrainConfig())
    assert state.accumulators["w"][0] == pytest.approx(0.1)
    assert state.params["w"][0] == pytest.approx(-0.001 / (math.sqrt(0.1) + 1e-8))
    assert state.params["w"][0] == pytest.approx(-0.0031623, abs=1e-7)


def test_rmsprop_zero_gradient_is_a_no_op():
    state = rmsprop_step(_scalar_state(0.5), {"w": np.array([0.0])}, TrainConfig())
    assert state.params["w"][0] == 0.5
    assert state.accumulators["w"][0] == 0.0


def test_rmsprop_is_deterministic():
    spec = small_spec()
    a, b = init_network(spec, 1), init_network(spec, 1)
    rng = np.random.default_rng(0)
    for _ in range(3):
        grads = {n: rng.normal(size=p.shape).astype(np.float32) for n, p in a.params.items()}
        rmsprop_step(a, grads, TrainConfig())
        rmsprop_step(b, grads, TrainConfig())
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
        assert np.all(a.accumulators[name] >= 0)


def test_train_config_validation():
    for bad in ({"batch_size": 0}, {"learning_rate": 0.0}, {"rho": 1.0}, {"epsilon": 0.0}, {"epochs": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def _single_example(spec):
    goal = load_levels(FIXTURES / "zelda5", ZELDA_ALPHABET)[0]
    obs = crop_observation(goal, (1, 1), spec.observation_spec)
    return np.repeat(obs[None], 64, axis=0), np.full(64, goal[(1, 1)])


def test_overfit_single_example():
    """64 copies of one example drop below 0.01 loss within 50 epochs"""
    print("\n🧪 Testing memorisation of a single example...")
    spec = small_spec(channels=(16, 16, 32))
    observations, targets = _single_example(spec)
    result = train(observations, spec, TrainConfig(epochs=50), seed=0, targets=targets)

    history = result.loss_history
    assert len(history) == 50
    assert min(history) < 0.01
    assert all(later < earlier for earlier, later in zip(history[:10], history[1:10]))
    print(f"   ✅ Loss {history[0]:.4f} -> {history[-1]:.6f}")


def test_train_is_deterministic_and_resumable(tmp_path):
    spec = small_spec()
    rng = np.random.default_rng(5)
    observations = random_observations(rng, 100, spec)
    targets = rng.integers(0, spec.action_count, size=100)
    config = TrainConfig(batch_size=16, epochs=4)

    first = train(observations, spec, config, seed=9, targets=targets)
    second = train(observations, spec, config, seed=9, targets=targets)
    assert first.loss_history == second.loss_history

    half = TrainConfig(batch_size=16, epochs=2)
    partial = train(observations, spec, half, seed=9, targets=targets)
    save_checkpoint(partial.state, spec, tmp_path / "half")
    state, loaded_spec = load_checkpoint(tmp_path / "half")
    resumed = train(observations, loaded_spec, half, seed=9, targets=targets, state=state, start_epoch=2)

    for name in first.state.params:
        np.testing.assert_array_equal(first.state.params[name], second.state.params[name])
        np.testing.assert_array_equal(first.state.params[name], resumed.state.params[name])
    assert partial.loss_history + resumed.loss_history == first.loss_history


def test_train_rejects_bad_data():
    spec = small_spec()
    with pytest.raises(ValueError):
        train(np.zeros((0, 5, 5, 9), dtype=np.float32), spec, TrainConfig(epochs=1), 0, targets=np.zeros(0))
    with pytest.raises(ValueError):
        train(np.zeros((2, 5, 5, 9), dtype=np.float32), spec, TrainConfig(epochs=1), 0, targets=np.array([0, 8]))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    spec = small_spec()
    state = init_network(spec, 7)
    state.accumulators["fc.b"][...] = 0.25
    path = save_checkpoint(state, spec, tmp_path / "ckpt")

    loaded, loaded_spec = load_checkpoint(path)
    assert loaded_spec == spec
    assert loaded.seed == 7
    for name in state.params:
        np.testing.assert_array_equal(loaded.params[name], state.params[name])
        np.testing.assert_array_equal(loaded.accumulators[name], state.accumulators[name])

    obs = random_observations(np.random.default_rng(0), 3, spec)
    np.testing.assert_array_equal(predict_proba(loaded, loaded_spec, obs), predict_proba(state, spec, obs))

    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    inventory = manifest["parameters"]
    assert inventory[0]["name"] == "conv1.w" and inventory[0]["offset"] == 0
    assert sum(e["length"] for e in inventory) == (path / "weights.bin").stat().st_size


def test_truncated_blob_is_reported(tmp_path):
    spec = small_spec()
    path = save_checkpoint(init_network(spec, 0), spec, tmp_path / "ckpt")
    blob = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(blob[:-4])

    with pytest.raises(CheckpointError, match=f"holds {len(blob) - 4} bytes, manifest expects {len(blob)}"):
        load_checkpoint(path)


def test_manifest_from_other_spec_is_reported(tmp_path):
    spec = small_spec()
    path = save_checkpoint(init_network(spec, 0), spec, tmp_path / "ckpt")
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    manifest["spec"]["conv_channels"] = [4, 4, 16]
    (path / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")

    with pytest.raises(CheckpointError, match="Shape mismatch"):
        load_checkpoint(path)


def test_corrupt_manifest_is_reported(tmp_path):
    spec = small_spec()
    path = save_checkpoint(init_network(spec, 0), spec, tmp_path / "ckpt")
    (path / "manifest.json").write_text("{", encoding="utf-8")
    with pytest.raises(CheckpointError, match="Corrupt manifest"):
        load_checkpoint(path)
