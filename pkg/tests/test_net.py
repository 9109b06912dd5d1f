import numpy as np
import pytest

from blendtrack import net
from blendtrack.net import (
    AdamState,
    Conv2d,
    Dense,
    ReLU,
    RegressorModel,
    Sigmoid,
    TrainingDivergedError,
    WeightFileError,
    adam_init,
    backward,
    gradient_check,
    load_weights,
    relative_gradient_error,
    save_weights,
    train_step,
    weighted_l1_loss,
)

from oracles import finite_difference_loss_grad


def kink_safe_labels(model, x, margin=0.25):
    """Labels a fixed distance from the initial predictions, clear of the L1 kink."""
    p0 = model.forward(x)
    return np.where(p0 > 0.5, p0 - margin, p0 + margin)


class TestForward:
    def test_zero_params_give_half(self):
        model = RegressorModel(16, 16)
        out = model.forward(np.zeros((3, 16, 16, 3)))
        assert out.shape == (3, 34)
        assert np.allclose(out, 0.5)

    def test_outputs_strictly_inside_unit_interval(self):
        model = RegressorModel(16, 16).initialize(1)
        out = model.forward(np.random.default_rng(2).random((4, 16, 16, 3)))
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_identical_rows_identical_outputs(self):
        model = RegressorModel(16, 16).initialize(3)
        row = np.random.default_rng(4).random((16, 16, 3))
        out = model.forward(np.stack([row, row]))
        assert np.array_equal(out[0], out[1])

    def test_shape_mismatch_rejected(self):
        model = RegressorModel(16, 16)
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 16, 17, 3)))
        with pytest.raises(ValueError):
            model.forward(np.zeros((16, 16, 3)))

    def test_regression_fixture(self):
        # Frozen from the seeded initialization; guards numeric drift.
        model = RegressorModel(16, 16).initialize(12)
        x = np.random.default_rng(13).random((2, 16, 16, 3))
        out = model.forward(x)
        expected_row0 = [0.5012991287931896, 0.49971393341562503, 0.5009074620965456,
                         0.4972771731241355, 0.4984776410472049, 0.49775037179765275]
        expected_row1 = [0.5014324017753612, 0.5007946308678646, 0.4997989140449682,
                         0.49567061753339065, 0.4998129098603202, 0.49581995866829026]
        assert np.allclose(out[0, :6], expected_row0, atol=1e-6)
        assert np.allclose(out[1, :6], expected_row1, atol=1e-6)
        assert out.sum() == pytest.approx(33.981471521790375, abs=1e-6)


class TestLoss:
    def test_zero_iff_equal(self):
        rng = np.random.default_rng(5)
        y = rng.random((3, 34))
        assert weighted_l1_loss(y, y) == 0.0
        p = y.copy()
        p[1, 7] += 1e-9
        assert weighted_l1_loss(p, y) > 0.0

    def test_missed_activation_costs_fifty(self):
        assert weighted_l1_loss(np.array([[0.0]]), np.array([[1.0]])) == pytest.approx(50.0)

    def test_false_activation_costs_one(self):
        assert weighted_l1_loss(np.array([[1.0]]), np.array([[0.0]])) == pytest.approx(1.0)

    def test_weight_monotone_in_label(self):
        gap = 0.1
        losses = [weighted_l1_loss(np.array([[y - gap]]), np.array([[y]]))
                  for y in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        assert weighted_l1_loss(rng.random((4, 34)), rng.random((4, 34))) >= 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            weighted_l1_loss(np.zeros((2, 34)), np.zeros((3, 34)))


class TestBackward:
    def test_zero_gradients_at_equality(self):
        model = RegressorModel(8, 8).initialize(0)
        x = np.random.default_rng(1).random((2, 8, 8, 3))
        labels = model.forward(x)
        grads = backward(model, x, labels)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_duplicated_batch_keeps_mean_gradients(self):
        model = RegressorModel(8, 8).initialize(2)
        x = np.random.default_rng(3).random((2, 8, 8, 3))
        y = kink_safe_labels(model, x)
        g1 = backward(model, x, y)
        g2 = backward(model, np.concatenate([x, x]), np.concatenate([y, y]))
        for name in g1:
            assert np.allclose(g1[name], g2[name], atol=1e-12)

    def test_composed_gradient_check_8x8(self):
        model = RegressorModel(8, 8).initialize(0)
        x = np.random.default_rng(100).random((2, 8, 8, 3))
        y = kink_safe_labels(model, x)
        assert gradient_check(model, x, y, epsilon=1e-4) < 1e-3


class TestLayerGradients:
    def test_conv_layer(self):
        rng = np.random.default_rng(20)
        layer = Conv2d("conv", 3, 4)
        layer.init_params(rng)
        x = rng.random((2, 6, 6, 3))
        coefs = rng.random((2, 3, 3, 4))

        def loss():
            y, _ = layer.forward(x)
            return float((y * coefs).sum())

        y, cache = layer.forward(x)
        dx, grads = layer.backward(coefs, cache)
        for name, arr in layer.params().items():
            fd = finite_difference_loss_grad(loss, arr.view(np.float32).reshape(arr.shape)
                                             if False else _as64(layer, name), 1e-4)
            assert relative_gradient_error(grads[name], fd) < 1e-3
        fd_x = finite_difference_loss_grad(loss, x, 1e-4)
        assert relative_gradient_error(dx, fd_x) < 1e-3

    def test_dense_layer(self):
        rng = np.random.default_rng(21)
        layer = Dense("dense", 10, 6)
        layer.init_params(rng)
        x = rng.random((3, 10))
        coefs = rng.random((3, 6))

        def loss():
            y, _ = layer.forward(x)
            return float((y * coefs).sum())

        y, cache = layer.forward(x)
        dx, grads = layer.backward(coefs, cache)
        for name in ("w", "b"):
            fd = finite_difference_loss_grad(loss, _as64(layer, name), 1e-4)
            assert relative_gradient_error(grads[name], fd) < 1e-3
        fd_x = finite_difference_loss_grad(loss, x, 1e-4)
        assert relative_gradient_error(dx, fd_x) < 1e-3

    def test_relu_input_gradient(self):
        rng = np.random.default_rng(22)
        layer = ReLU()
        x = rng.random((4, 9)) - 0.5
        x[np.abs(x) < 1e-3] = 0.1  # keep clear of the kink
        coefs = rng.random((4, 9))

        def loss():
            y, _ = layer.forward(x.copy())
            return float((y * coefs).sum())

        _, cache = layer.forward(x.copy())
        dx, _ = layer.backward(coefs, cache)
        fd = finite_difference_loss_grad(loss, x, 1e-4)
        assert relative_gradient_error(dx, fd) < 1e-3

    def test_sigmoid_input_gradient(self):
        rng = np.random.default_rng(23)
        layer = Sigmoid()
        x = rng.random((4, 9)) * 4 - 2
        coefs = rng.random((4, 9))

        def loss():
            y, _ = layer.forward(x)
            return float((y * coefs).sum())

        _, cache = layer.forward(x)
        dx, _ = layer.backward(coefs, cache)
        fd = finite_difference_loss_grad(loss, x, 1e-4)
        assert relative_gradient_error(dx, fd) < 1e-3


def _as64(layer, name):
    """Replace a float32 parameter with a float64 view-alike for FD perturbation."""
    arr64 = layer.params()[name].astype(np.float64)
    setattr(layer, name, arr64)
    return arr64


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        model = RegressorModel(8, 8).initialize(7)
        state = adam_init(model, learning_rate=0.0)
        x = np.random.default_rng(8).random((4, 8, 8, 3))
        y = np.random.default_rng(9).random((4, 34))
        before = {k: v.copy() for k, v in model.parameters().items()}
        train_step(model, state, x, y)
        for k, v in model.parameters().items():
            assert np.array_equal(v, before[k])

    def test_memorization_sanity(self):
        # 50 samples whose labels are a visible function of quadrant brightness.
        rng = np.random.default_rng(8)
        xs = rng.random((50, 8, 8, 3))
        feats = np.stack([xs[:, :4, :4].mean((1, 2, 3)), xs[:, 4:, :4].mean((1, 2, 3)),
                          xs[:, :4, 4:].mean((1, 2, 3)), xs[:, 4:, 4:].mean((1, 2, 3))], axis=1)
        mixer = np.random.default_rng(9).random((4, 34))
        ys = np.clip((feats - 0.35) @ mixer * 2.5, 0.0, 0.98)
        model = RegressorModel(8, 8).initialize(7)
        state = adam_init(model, learning_rate=3e-3)
        first = None
        for _ in range(200):
            loss = train_step(model, state, xs, ys)
            if first is None:
                first = loss
        final = weighted_l1_loss(model.forward(xs), ys)
        assert final <= 0.1 * first

    def test_deterministic_trajectory(self):
        def run():
            model = RegressorModel(8, 8).initialize(11)
            state = adam_init(model, learning_rate=1e-3)
            rng = np.random.default_rng(12)
            for _ in range(10):
                train_step(model, state, rng.random((4, 8, 8, 3)), rng.random((4, 34)))
            return {k: v.copy() for k, v in model.parameters().items()}

        a, b = run(), run()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_nonfinite_labels_raise(self):
        model = RegressorModel(8, 8).initialize(13)
        state = adam_init(model)
        x = np.zeros((1, 8, 8, 3))
        y = np.full((1, 34), np.inf)
        with pytest.raises(TrainingDivergedError):
            train_step(model, state, x, y)

    def test_loss_returned_is_pre_update(self):
        model = RegressorModel(8, 8).initialize(14)
        state = adam_init(model, learning_rate=1e-2)
        x = np.random.default_rng(15).random((4, 8, 8, 3))
        y = np.random.default_rng(16).random((4, 34))
        expected = weighted_l1_loss(model.forward(x), y)
        assert train_step(model, state, x, y) == pytest.approx(expected)


class TestWeightFile:
    def test_round_trip_bit_exact(self, tmp_path):
        model = RegressorModel(32, 24).initialize(17)
        x = np.random.default_rng(18).random((2, 32, 24, 3))
        path = tmp_path / "model.btrk"
        save_weights(model, path)
        again = load_weights(path)
        assert np.array_equal(model.forward(x), again.forward(x))
        for k, v in model.parameters().items():
            assert np.array_equal(v, again.parameters()[k])

    def test_truncated_file_rejected(self, tmp_path):
        model = RegressorModel(16, 16).initialize(19)
        path = tmp_path / "model.btrk"
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(WeightFileError, match="end of file"):
            load_weights(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.btrk"
        model = RegressorModel(16, 16).initialize(20)
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(WeightFileError, match="magic"):
            load_weights(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "model.btrk"
        model = RegressorModel(16, 16).initialize(21)
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(WeightFileError, match="version"):
            load_weights(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "model.btrk"
        model = RegressorModel(16, 16).initialize(22)
        save_weights(model, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(WeightFileError, match="trailing"):
            load_weights(path)

    def test_architecture_shape_mismatch_rejected(self, tmp_path):
        # Declare a different input size in the header than the params were built for.
        model = RegressorModel(16, 16).initialize(23)
        path = tmp_path / "model.btrk"
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        # input_spec payload starts after magic(4)+version/count(8)+namelen(2)+name(10)+dtype/rank(2)+dims(4)
        offset = 4 + 8 + 2 + len("input_spec") + 2 + 4
        data[offset:offset + 4] = np.array([32.0], dtype="<f4").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(WeightFileError, match="shape mismatch"):
            load_weights(path)
