import numpy as np
import pytest

from modellight.errors import CheckpointError, NonFiniteError
from modellight.nn import (
    Activation,
    AdamState,
    DenseParams,
    GATES,
    LstmLayerParams,
    LstmParams,
    adam_update,
    dense_backward,
    dense_forward,
    dense_init,
    finite_difference_gradient,
    gradient_relative_error,
    lstm_backward,
    lstm_cell,
    lstm_forward,
    lstm_init,
    load_arrays,
    named_arrays,
    rebuild_like,
    save_arrays,
    sgd_update,
)

# Hand calculation (30-digit arithmetic, frozen): one LSTM unit, every weight
# and bias 0.5, input 1.0, zero initial states. All gate pre-activations are
# 1.0, so i = f = o = sigmoid(1), candidate = tanh(1),
# c = sigmoid(1) * tanh(1) = 0.556769941145939744, and
# h = sigmoid(1) * tanh(c) = 0.369606352935705773.
HAND_LSTM_CELL = 0.556769941145939744
HAND_LSTM_HIDDEN = 0.369606352935705773


class TestDense:
    def test_identity_map(self):
        p = DenseParams(np.eye(3), np.zeros(3))
        x = np.array([1.0, -2.0, 0.5])
        y, _ = dense_forward(p, x, Activation.IDENTITY)
        assert np.allclose(y, x)

    def test_bias_only(self):
        p = DenseParams(np.zeros((2, 3)), np.array([1.0, 2.0]))
        y, _ = dense_forward(p, np.ones(3))
        assert np.allclose(y, [1.0, 2.0])

    def test_relu(self):
        p = DenseParams(np.eye(2), np.zeros(2))
        y, _ = dense_forward(p, np.array([-1.0, 2.0]), Activation.RELU)
        assert np.allclose(y, [0.0, 2.0])

    def test_shape_mismatch(self):
        p = DenseParams(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            dense_forward(p, np.ones(3))

    def test_linear_squared_loss_closed_form(self):
        # f(x) = w x, L = (f - t)^2: dL/dw = 2 (f - t) x
        rng = np.random.default_rng(0)
        p = dense_init(rng, 4, 1)
        x = rng.normal(size=4)
        target = 0.7
        y, cache = dense_forward(p, x)
        dy = np.array([2.0 * (y[0] - target)])
        _, grads = dense_backward(p, cache, dy)
        assert np.allclose(grads.w, 2.0 * (y[0] - target) * x[None, :])
        assert np.allclose(grads.b, dy)

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        p = dense_init(rng, 3, 2)
        y, cache = dense_forward(p, rng.normal(size=3), Activation.TANH)
        dx, grads = dense_backward(p, cache, np.zeros(2))
        assert not dx.any() and not grads.w.any() and not grads.b.any()


class TestLstmForward:
    def test_zero_parameters_zero_hidden(self):
        layer = LstmLayerParams(
            wx={g: np.zeros((3, 2)) for g in GATES},
            wh={g: np.zeros((3, 3)) for g in GATES},
            b={g: np.zeros(3) for g in GATES},
        )
        params = LstmParams((layer,))
        h, _ = lstm_forward(params, np.ones((4, 2)))
        assert np.allclose(h, 0.0)

    def test_length_one_equals_single_cell(self):
        rng = np.random.default_rng(2)
        params = lstm_init(rng, 5, hidden_sizes=(4,))
        x = rng.normal(size=5)
        h_seq, _ = lstm_forward(params, x[None, :])
        h_cell, _, _ = lstm_cell(
            params.layers[0], x[None, :], np.zeros((1, 4)), np.zeros((1, 4))
        )
        assert np.allclose(h_seq, h_cell[0])

    def test_hand_computed_unit(self):
        layer = LstmLayerParams(
            wx={g: np.full((1, 1), 0.5) for g in GATES},
            wh={g: np.full((1, 1), 0.5) for g in GATES},
            b={g: np.full(1, 0.5) for g in GATES},
        )
        h, _ = lstm_forward(LstmParams((layer,)), np.array([[1.0]]))
        assert abs(h[0] - HAND_LSTM_HIDDEN) < 1e-12
        _, c, _ = lstm_cell(layer, np.array([[1.0]]), np.zeros((1, 1)), np.zeros((1, 1)))
        assert abs(c[0, 0] - HAND_LSTM_CELL) < 1e-12

    def test_empty_sequence_rejected(self):
        params = lstm_init(np.random.default_rng(0), 3, (2,))
        with pytest.raises(ValueError, match="empty"):
            lstm_forward(params, np.zeros((0, 3)))

    def test_stacked_output_size(self):
        params = lstm_init(np.random.default_rng(3), 16, hidden_sizes=(16, 64))
        h, _ = lstm_forward(params, np.random.default_rng(4).normal(size=(1, 16)))
        assert h.shape == (64,)


def _lstm_loss(params_template, xs, direction):
    def loss(arrays):
        params = rebuild_like(params_template, arrays, "lstm")
        h, _ = lstm_forward(params, xs)
        return float(h @ direction)

    return loss


class TestGradients:
    def test_dense_backprop_matches_finite_differences(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            p = dense_init(rng, 4, 3)
            x = rng.normal(size=(5, 4))
            target = rng.normal(size=(5, 3))
            act = [Activation.TANH, Activation.SIGMOID, Activation.RELU][seed % 3]

            y, cache = dense_forward(p, x, act)
            dy = 2.0 * (y - target) / y.shape[0]
            _, grads = dense_backward(p, cache, dy)

            def loss(arrays):
                q = rebuild_like(p, arrays, "d")
                out, _ = dense_forward(q, x, act)
                return float(np.mean(np.sum((out - target) ** 2, axis=1)))

            fd = finite_difference_gradient(loss, named_arrays(p, "d"))
            err = gradient_relative_error(named_arrays(grads, "d"), fd)
            assert err < 1e-4, f"seed {seed}: rel err {err}"

    def test_lstm_backprop_matches_finite_differences(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            params = lstm_init(rng, 3, hidden_sizes=(4, 5))
            xs = rng.normal(size=(3, 2, 3))  # seq len 3, batch 2
            direction = rng.normal(size=5)

            h, cache = lstm_forward(params, xs)
            grads = lstm_backward(params, cache, np.tile(direction, (2, 1)))

            def loss(arrays):
                q = rebuild_like(params, arrays, "lstm")
                out, _ = lstm_forward(q, xs)
                return float(out.sum(axis=0) @ direction)

            fd = finite_difference_gradient(loss, named_arrays(params, "lstm"))
            err = gradient_relative_error(named_arrays(grads, "lstm"), fd)
            assert err < 1e-4, f"seed {seed}: rel err {err}"

    def test_finite_difference_quadratic(self):
        params = {"w": np.array([3.0])}
        fd = finite_difference_gradient(lambda a: float(a["w"][0] ** 2), params)
        assert abs(fd["w"][0] - 6.0) < 1e-6

    def test_finite_difference_constant(self):
        params = {"w": np.arange(4.0)}
        fd = finite_difference_gradient(lambda a: 1.5, params)
        assert np.allclose(fd["w"], 0.0)


class TestSgd:
    def test_zero_lr(self):
        p = {"w": np.array([1.0, 2.0])}
        out = sgd_update(p, {"w": np.array([5.0, -1.0])}, 0.0)
        assert np.allclose(out["w"], p["w"])

    def test_arithmetic(self):
        out = sgd_update(np.array([1.0]), np.array([2.0]), 0.1)
        assert np.allclose(out, [0.8])

    def test_quadratic_convergence(self):
        # w <- w - 0.1 * 2w = 0.8 w, so |w_50| = 0.8^50 < 1e-4
        w = np.array([1.0])
        for _ in range(50):
            w = sgd_update(w, 2.0 * w, 0.1)
        assert abs(w[0]) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            sgd_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(p)
        for _ in range(10):
            p, state = adam_update(p, {"w": np.zeros(2)}, state, 0.01)
        assert np.allclose(p["w"], [1.0, -2.0])

    def test_bias_corrected_first_step(self):
        p = {"w": np.array([0.0])}
        state = AdamState.zeros_like(p)
        p2, state2 = adam_update(p, {"w": np.array([1.0])}, state, 0.001)
        assert abs(p2["w"][0] + 0.001) < 1e-9
        assert state2.step == 1

    def test_quadratic_convergence(self):
        p = {"w": np.array([1.0])}
        state = AdamState.zeros_like(p)
        for _ in range(2000):
            p, state = adam_update(p, {"w": 2.0 * p["w"]}, state, 0.01)
        assert abs(p["w"][0]) < 1e-2

    def test_purity(self):
        rng = np.random.default_rng(5)
        p = {"w": rng.normal(size=3)}
        g = {"w": rng.normal(size=3)}
        state = AdamState.zeros_like(p)
        a1, s1 = adam_update(p, g, state, 0.01)
        a2, s2 = adam_update(p, g, state, 0.01)
        assert np.array_equal(a1["w"], a2["w"])
        assert s1.step == s2.step and np.array_equal(s1.m["w"], s2.m["w"])


class TestNonFinite:
    def test_dense_forward_raises(self):
        p = DenseParams(np.array([[np.inf]]), np.zeros(1))
        with pytest.raises(NonFiniteError):
            dense_forward(p, np.ones(1))

    def test_sgd_raises_on_nan_gradient(self):
        with pytest.raises(NonFiniteError):
            sgd_update({"w": np.ones(1)}, {"w": np.array([np.nan])}, 0.1)


class TestFlatten:
    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        tree = {
            "lstm": lstm_init(rng, 4, (3, 2)),
            "head": dense_init(rng, 2, 5),
        }
        flat = named_arrays(tree)
        rebuilt = rebuild_like(tree, flat)
        for name, arr in named_arrays(rebuilt).items():
            assert np.array_equal(arr, flat[name])


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        arrays = {
            "a.w": rng.normal(size=(3, 4)),
            "a.b": rng.normal(size=3) * 1e-17,
            "deep.nest.x": np.array([np.pi, np.e]),
        }
        path = tmp_path / "ck.npz"
        save_arrays(path, arrays, {"note": "test", "version": 3})
        loaded, meta = load_arrays(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == np.float64
        assert meta["note"] == "test" and meta["version"] == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "absent.npz")

    def test_bad_format_version(self, tmp_path):
        path = tmp_path / "bad.npz"
        import json

        meta = np.frombuffer(json.dumps({"checkpoint_format": 99}).encode(), dtype=np.uint8)
        np.savez(path, meta=meta)
        with pytest.raises(CheckpointError, match="format"):
            load_arrays(path)
