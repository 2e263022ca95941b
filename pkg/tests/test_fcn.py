import math

import numpy as np
import pytest

from liverseg.errors import MissingClassError, NumericalError, VolumeFormatError
from liverseg.fcn import (
    ClassWeights,
    ToyNet,
    TrainConfig,
    class_weights,
    forward,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train,
    weighted_ce_loss,
)
from liverseg.volume import LabelVolume


class TestClassWeights:
    def test_inverse_counts(self):
        labels = np.zeros((1, 10, 10), dtype=np.uint8)
        labels[0, :1, :] = 1  # 10 voxels of class 1, 90 of class 0
        w = class_weights([LabelVolume(labels, (1, 1, 1))], classes=2)
        assert w.w[0] == pytest.approx(1 / 90)
        assert w.w[1] == pytest.approx(1 / 10)

    def test_balanced_counts_equal_weights(self):
        labels = np.array([[[0, 1], [1, 0]]], dtype=np.uint8)
        w = class_weights([LabelVolume(labels, (1, 1, 1))], classes=2)
        assert w.w[0] == w.w[1]

    def test_absent_class_named_in_error(self):
        labels = np.zeros((1, 2, 2), dtype=np.uint8)
        labels[0, 0, 0] = 1
        with pytest.raises(MissingClassError, match="class 2"):
            class_weights([LabelVolume(labels, (1, 1, 1))], classes=3)

    def test_min_count_floor(self):
        labels = np.zeros((1, 2, 2), dtype=np.uint8)
        w = class_weights([labels], classes=2, min_count=5)
        assert w.w[1] == pytest.approx(1 / 5)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            ClassWeights(np.array([1.0, 0.0]))


class TestLoss:
    def test_perfect_prediction_near_zero(self):
        eps = 1e-7
        p = np.full(9, 1.0 - eps)
        loss, _ = weighted_ce_loss(p, np.ones(9), np.ones(9))
        assert abs(loss) < 1e-6

    def test_hand_value_ln2(self):
        loss, grad = weighted_ce_loss(np.array([0.5]), np.array([1.0]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2), abs=1e-9)
        assert grad[0] == pytest.approx(-2.0, abs=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        p = rng.uniform(0.1, 0.9, 12)
        t = (rng.random(12) > 0.5).astype(float)
        w = rng.uniform(0.5, 2.0, 12)
        _, grad = weighted_ce_loss(p, t, w)
        h = 1e-6
        for i in range(12):
            dp = np.zeros(12)
            dp[i] = h
            lp, _ = weighted_ce_loss(p + dp, t, w)
            lm, _ = weighted_ce_loss(p - dp, t, w)
            assert grad[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            weighted_ce_loss(np.ones(3) * 0.5, np.ones(4), np.ones(3))

    def test_nonpositive_weights(self):
        with pytest.raises(ValueError, match="weights"):
            weighted_ce_loss(np.ones(3) * 0.5, np.ones(3), np.zeros(3))

    def test_weight_scaling_linearity(self, rng):
        p = rng.uniform(0.1, 0.9, 20)
        t = (rng.random(20) > 0.5).astype(float)
        w = rng.uniform(0.5, 2.0, 20)
        base, _ = weighted_ce_loss(p, t, w)
        for c in (0.1, 3.0, 42.0):
            scaled, _ = weighted_ce_loss(p, t, c * w)
            assert scaled / c == pytest.approx(base, rel=1e-12)


class TestForward:
    def test_zero_net_uniform(self):
        net = ToyNet(1, 4, 2, classes=3, seed=0)
        for w in net.weights:
            w[:] = 0.0
        probs = forward(net, np.random.default_rng(0).random((6, 6)))
        assert np.allclose(probs, 1 / 3, atol=1e-12)

    def test_softmax_normalized(self, rng):
        net = ToyNet(1, 8, 3, classes=2, seed=1)
        probs = forward(net, rng.random((9, 7)))
        assert np.max(np.abs(probs.sum(axis=0) - 1.0)) < 1e-6

    def test_single_conv_hand_computed(self):
        net = ToyNet(1, 1, 1, classes=2, seed=0)
        net.weights[0][:] = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        net.biases[0][:] = 0.5
        net.weights[1][:] = 0.0
        net.weights[1][0, 0] = 1.0  # class-0 logit = hidden activation
        net.biases[1][:] = 0.0
        net.use_relu = False
        img = np.array([[2.0]])
        # 1x1 image, zero padding: only the kernel centre (index 4) sees the pixel
        expected_hidden = 4.0 * 2.0 + 0.5
        probs = forward(net, img)
        z0, z1 = expected_hidden, 0.0
        e = np.exp([z0, z1])
        assert probs[0, 0, 0] == pytest.approx(e[0] / e.sum())

    def test_shift_equivariance_interior(self, rng):
        net = ToyNet(1, 5, 2, classes=2, seed=2)
        img = rng.random((10, 10))
        shifted = np.zeros_like(img)
        shifted[:, 1:] = img[:, :-1]
        p0 = forward(net, img)
        p1 = forward(net, shifted)
        # interior excludes anything the padding can reach (depth-2 receptive field)
        k = 3
        assert np.allclose(p1[:, k:-k, k + 1 : -k], p0[:, k:-k, k : -k - 1], atol=1e-10)

    def test_channel_mismatch(self, rng):
        net = ToyNet(2, 4, 1, classes=2, seed=0)
        with pytest.raises(ValueError, match="channels"):
            forward(net, rng.random((5, 5)))


class TestTrain:
    def _tiny_dataset(self, rng, n=4):
        data = []
        for _ in range(n):
            img = rng.random((6, 6))
            lab = (img > 0.5).astype(np.uint8)
            data.append((img, lab))
        return data

    def test_loss_strictly_decreases_first_steps(self, rng):
        img = np.array([[0.7]])
        lab = np.array([[1]], dtype=np.uint8)
        net = ToyNet(1, 2, 1, classes=2, seed=4)
        cfg = TrainConfig(learning_rate=0.5, momentum=0.0, weight_decay=0.0,
                          epochs=10, batch_size=1, seed=0)
        w = ClassWeights(np.array([1.0, 1.0]))
        trace = train(net, [(img, lab)], cfg, w)
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_zero_learning_rate_keeps_weights(self, rng):
        net = ToyNet(1, 3, 2, classes=2, seed=5)
        before = [w.copy() for w in net.weights]
        cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=2, seed=1)
        w = ClassWeights(np.array([1.0, 1.0]))
        trace = train(net, self._tiny_dataset(rng), cfg, w)
        for a, b in zip(before, net.weights):
            assert np.array_equal(a, b)
        assert max(trace) - min(trace) < 1e-12

    def test_same_seed_identical_traces(self, rng):
        w = ClassWeights(np.array([1.0, 1.0]))
        cfg = TrainConfig(epochs=3, batch_size=2, seed=7)
        data = self._tiny_dataset(rng)
        net1 = ToyNet(1, 3, 2, classes=2, seed=5)
        net2 = ToyNet(1, 3, 2, classes=2, seed=5)
        t1 = train(net1, data, cfg, w)
        t2 = train(net2, data, cfg, w)
        assert t1 == t2
        for a, b in zip(net1.weights, net2.weights):
            assert np.array_equal(a, b)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_aborts(self, rng):
        net = ToyNet(1, 3, 1, classes=2, seed=0)
        cfg = TrainConfig(learning_rate=1e9, epochs=50, batch_size=1, seed=0)
        w = ClassWeights(np.array([1.0, 1.0]))
        with pytest.raises(NumericalError, match="diverged"):
            train(net, self._tiny_dataset(rng, 2), cfg, w)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train(ToyNet(), [], TrainConfig(), ClassWeights(np.ones(2)))


class TestGradientCheck:
    def _case(self, seed, use_relu=True):
        if use_relu:
            from conftest import kink_free_gradcheck_case

            return kink_free_gradcheck_case(seed)
        r = np.random.default_rng(seed)
        net = ToyNet(1, 4, 2, classes=2, use_relu=False, seed=seed)
        img = r.random((8, 8))
        lab = (r.random((8, 8)) > 0.5).astype(np.uint8)
        w = class_weights([lab], 2, min_count=1)
        return net, img, lab, w

    def test_seeded_nets_within_tolerance(self):
        for seed in (0, 1, 2):
            net, img, lab, w = self._case(seed)
            assert gradient_check(net, img, lab, w) <= 1e-4

    def test_linear_net_near_machine_precision(self):
        net, img, lab, w = self._case(11, use_relu=False)
        assert gradient_check(net, img, lab, w) <= 1e-6

    def test_corrupted_gradient_detected(self, monkeypatch):
        net, img, lab, w = self._case(3)
        import liverseg.fcn as fcn_mod

        orig = fcn_mod._loss_and_grads

        def corrupted(*args, **kwargs):
            loss, gw, gb = orig(*args, **kwargs)
            return loss, [g * 1.1 for g in gw], [g * 1.1 for g in gb]

        monkeypatch.setattr(fcn_mod, "_loss_and_grads", corrupted)
        err = gradient_check(net, img, lab, w)
        assert 0.08 < err < 0.12

    def test_rejects_large_nets(self, rng):
        net = ToyNet(1, 32, 4, classes=2, seed=0)
        if net.n_params <= 10_000:
            pytest.skip("net unexpectedly small")
        with pytest.raises(ValueError, match="parameters"):
            gradient_check(net, rng.random((4, 4)), np.zeros((4, 4), dtype=np.uint8),
                           ClassWeights(np.ones(2)))


class TestCheckpoint:
    def test_round_trip_values(self, tmp_path):
        net = ToyNet(1, 6, 3, classes=2, seed=9)
        save_checkpoint(net, tmp_path / "net.bin")
        back = load_checkpoint(tmp_path / "net.bin")
        assert len(back.weights) == len(net.weights)
        for a, b in zip(net.weights, back.weights):
            assert np.array_equal(a.astype(np.float32), b.astype(np.float32))

    def test_resave_byte_identical(self, tmp_path):
        net = ToyNet(1, 6, 3, classes=2, seed=9)
        save_checkpoint(net, tmp_path / "a.bin")
        back = load_checkpoint(tmp_path / "a.bin")
        save_checkpoint(back, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_forward_identical_after_reload(self, tmp_path, rng):
        net = ToyNet(1, 6, 2, classes=2, seed=10)
        save_checkpoint(net, tmp_path / "n.bin")
        back = load_checkpoint(tmp_path / "n.bin")
        img = rng.random((7, 7))
        a = forward(net, img)
        b = forward(back, img)
        assert np.max(np.abs(a - b)) < 1e-6

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTANET0" + b"\x00" * 16)
        with pytest.raises(VolumeFormatError, match="magic"):
            load_checkpoint(tmp_path / "x.bin")

    def test_truncated(self, tmp_path):
        net = ToyNet(1, 4, 1, classes=2, seed=0)
        save_checkpoint(net, tmp_path / "t.bin")
        blob = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(blob[:-8])
        with pytest.raises(VolumeFormatError):
            load_checkpoint(tmp_path / "t.bin")
