import numpy as np
import pytest
import torch

from postureid import net
from postureid.dataset import TargetStats
from postureid.dec import Controlled, ModuleParams
from postureid.features import ImageStats

TINY = net.ArchSpec(in_channels=1, out_dim=2, height=8, width=8,
                    widths=(4, 6))


def _unit_stats(spec):
    shape = (spec.height, spec.width, spec.in_channels)
    return ImageStats(mean=np.zeros(shape), variance=np.ones(shape))


class TestArchSpec:
    def test_spatial_chain(self):
        assert net.ArchSpec().spatial_chain() == (26, 13, 7, 4, 2)
        assert net.ArchSpec().flat_dim == 512

    def test_parameter_count_closed_form(self):
        spec = net.ArchSpec()
        # independently: conv w+b per block, then the linear head
        expected = 0
        c = 3
        for w in (16, 32, 64, 128, 128):
            expected += w * (c * 9 + 1)
            c = w
        expected += (512 + 1) * 5
        assert spec.parameter_count() == expected == 247589
        built = net.init(spec, 0)
        assert sum(p.numel() for p in built.parameters()) == expected

    def test_monolithic_variant_same_torso(self):
        # only the input and output layers differ between the two variants
        mod = net.init(net.ArchSpec(in_channels=3, out_dim=5), 0)
        mono = net.init(net.ArchSpec(in_channels=5, out_dim=15), 0)
        mod_shapes = [tuple(p.shape) for p in mod.parameters()]
        mono_shapes = [tuple(p.shape) for p in mono.parameters()]
        assert mod_shapes[2:-2] == mono_shapes[2:-2]
        assert mod_shapes[0][1] == 3 and mono_shapes[0][1] == 5
        assert mod_shapes[-1] == (5,) and mono_shapes[-1] == (15,)


class TestInit:
    def test_seed_determinism(self):
        a = net.init(TINY, 42)
        b = net.init(TINY, 42)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a = net.init(TINY, 1)
        b = net.init(TINY, 2)
        assert not torch.equal(a.parameters()[0], b.parameters()[0])

    def test_zero_init_forward_zero(self):
        z = net.init(TINY, 0, scheme="zeros")
        img = np.random.default_rng(0).standard_normal((8, 8, 1))
        assert np.all(net.forward(z, img) == 0.0)

    def test_biases_zero(self):
        built = net.init(TINY, 3)
        for p in built.parameters():
            if p.ndim == 1:
                assert torch.all(p == 0.0)


class TestForward:
    def test_batch_of_one_equals_single_bitwise(self):
        n = net.init(TINY, 5)
        img = np.random.default_rng(1).standard_normal((8, 8, 1)).astype(np.float32)
        single = net.forward(n, img)
        batch = net.forward_batch(n, img[None])
        assert np.array_equal(single, batch[0])

    def test_batch_matches_per_sample(self):
        n = net.init(TINY, 5)
        imgs = np.random.default_rng(2).standard_normal((6, 8, 8, 1)).astype(np.float32)
        batch = net.forward_batch(n, imgs)
        singles = np.stack([net.forward(n, imgs[i]) for i in range(6)])
        # torch batches reduce in a different order; equality to roundoff
        assert np.allclose(batch, singles, rtol=1e-5, atol=1e-6)

    def test_dim_mismatch_rejected(self):
        n = net.init(TINY, 5)
        with pytest.raises(ValueError):
            net.forward(n, np.zeros((9, 9, 1)))

    def test_relu_positive_homogeneity(self):
        # conv/relu/pool/linear with zero biases is positively homogeneous
        # of degree 2 in the input scale (two weight layers)
        n = net.init(net.ArchSpec(in_channels=1, out_dim=1, height=4,
                                  width=4, widths=(2,)), 7)
        img = np.abs(np.random.default_rng(3).standard_normal((4, 4, 1)))
        base = net.forward(n, img.astype(np.float32))
        scaled = net.forward(n, (3.0 * img).astype(np.float32))
        assert np.allclose(scaled, 3.0 * base, rtol=1e-5)


class TestLossAndGrads:
    def test_zero_loss_zero_grads_at_target(self):
        n = net.init(TINY, 0, scheme="zeros")
        imgs = np.zeros((3, 8, 8, 1), dtype=np.float32)
        targets = np.zeros((3, 2), dtype=np.float32)
        loss, grads = net.loss_and_grads(n, imgs, targets)
        assert loss == 0.0
        for g in grads:
            assert torch.all(g == 0.0)

    def test_empty_batch_rejected(self):
        n = net.init(TINY, 0)
        with pytest.raises(ValueError):
            net.loss_and_grads(n, np.zeros((0, 8, 8, 1)), np.zeros((0, 2)))

    def test_hand_computed_linear_gradient(self):
        # identity conv (center tap), relu on positives, 2x2 max pool:
        # y = w * max(img) + b; MSE over two samples is hand-computable
        spec = net.ArchSpec(in_channels=1, out_dim=1, height=2, width=2,
                            widths=(1,))
        n = net.init(spec, 0, scheme="zeros")
        with torch.no_grad():
            n.parameters()[0][0, 0, 1, 1] = 1.0  # center tap
            n.parameters()[2][0, 0] = 2.0        # head weight w
            n.parameters()[3][0] = 0.5           # head bias b
        imgs = np.zeros((2, 2, 2, 1), dtype=np.float32)
        imgs[0, :, :, 0] = [[1.0, 2.0], [0.5, 1.5]]   # max 2.0
        imgs[1, :, :, 0] = [[3.0, 1.0], [0.25, 2.0]]  # max 3.0
        targets = np.array([[4.0], [7.0]], dtype=np.float32)
        loss, grads = net.loss_and_grads(n, imgs, targets)
        # predictions 4.5 and 6.5; errors +0.5 and -0.5; mse 0.25
        assert loss == pytest.approx(0.25, abs=1e-7)
        dw = np.mean([2 * 0.5 * 2.0, 2 * (-0.5) * 3.0])
        db = np.mean([2 * 0.5, 2 * (-0.5)])
        assert float(grads[2][0, 0]) == pytest.approx(dw, abs=1e-6)
        assert float(grads[3][0]) == pytest.approx(db, abs=1e-6)

    def test_finite_difference_gradcheck_tiny(self):
        n = net.init(TINY, 11)
        rng = np.random.default_rng(4)
        imgs = rng.standard_normal((4, 8, 8, 1))
        targets = rng.standard_normal((4, 2))
        worst = net.check_gradients(n, imgs, targets)
        assert worst <= 1e-4


class TestTrain:
    def _data(self, n=24, seed=0):
        rng = np.random.default_rng(seed)
        images = rng.standard_normal((n, 8, 8, 1)).astype(np.float32)
        targets = rng.standard_normal((n, 2))
        splits = np.zeros(n, dtype=np.int64)
        splits[-6:] = 1
        stats = ImageStats(mean=np.zeros((8, 8, 1)), variance=np.ones((8, 8, 1)))
        from postureid.dataset import compute_target_stats

        return net.RegressionData(images=images, targets=targets,
                                  splits=splits, image_stats=stats,
                                  target_stats=compute_target_stats(
                                      targets[splits == 0]))

    def test_zero_learning_rate_keeps_parameters(self):
        data = self._data()
        n = net.init(TINY, 9)
        before = [p.clone() for p in n.parameters()]
        net.train(n, data, net.TrainingSchedule(learning_rate=0.0, epochs=3,
                                                batch_size=8))
        for p, b in zip(n.parameters(), before):
            assert torch.equal(p, b)

    def test_same_seed_identical_history(self):
        sched = net.TrainingSchedule(learning_rate=1e-3, epochs=4, batch_size=8)
        h = []
        for _ in range(2):
            torch.set_num_threads(1)
            n = net.init(TINY, 21)
            net.train(n, self._data(), sched)
            h.append((list(n.history["train"]), list(n.history["val"])))
        assert h[0] == h[1]

    def test_history_recorded_and_best_val_restored(self):
        data = self._data()
        n = net.init(TINY, 2)
        sched = net.TrainingSchedule(learning_rate=1e-3, epochs=5, batch_size=8)
        net.train(n, data, sched)
        assert len(n.history["train"]) == 5
        assert len(n.history["val"]) == 5
        x_val = net.prepare_images(data.images[data.splits == 1],
                                   data.image_stats)
        t_val = net._standardize(data.targets[data.splits == 1],
                                 data.target_stats)
        preds = net.forward_batch(n, x_val)
        val = float(np.mean((preds - t_val) ** 2))
        assert val == pytest.approx(min(n.history["val"]), rel=1e-5)

    def test_divergence_detected(self):
        data = self._data()
        n = net.init(TINY, 2)
        with pytest.raises(RuntimeError, match="diverged"):
            net.train(n, data, net.TrainingSchedule(learning_rate=1e9,
                                                    epochs=5, batch_size=8))

    def test_schedule_decay(self):
        s = net.TrainingSchedule(learning_rate=0.01, lr_decay=0.5,
                                 lr_decay_every=50)
        assert s.lr_at(0) == 0.01
        assert s.lr_at(49) == 0.01
        assert s.lr_at(50) == 0.005
        assert s.lr_at(100) == 0.0025


class TestCheckpoint:
    def test_round_trip_and_byte_stability(self, tmp_path):
        n = net.init(TINY, 33)
        n.image_stats = ImageStats(mean=np.zeros((8, 8, 1)),
                                   variance=np.ones((8, 8, 1)))
        n.target_stats = TargetStats(mean=np.zeros(2), variance=np.ones(2))
        n.history = {"train": [1.0, 0.5], "val": [1.2, 0.7]}
        p1 = tmp_path / "a.pcnn"
        p2 = tmp_path / "b.pcnn"
        net.save_checkpoint(n, p1)
        back = net.load_checkpoint(p1)
        for pa, pb in zip(n.parameters(), back.parameters()):
            assert torch.equal(pa, pb)
        assert back.history == n.history
        assert back.spec == n.spec
        net.save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.pcnn"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            net.load_checkpoint(path)


class TestPredictParams:
    ANKLE = ModuleParams(kp=465.98, ki=11.649, kd=116.49, delay=0.10)

    def test_zero_output_returns_defaults(self):
        n = net.init(net.ArchSpec(), 0, scheme="zeros")
        n.image_stats = _unit_stats(net.ArchSpec())
        n.target_stats = TargetStats(mean=np.zeros(5), variance=np.ones(5))
        img = np.random.default_rng(0).standard_normal((51, 51, 3))
        params, vec = net.predict_params(n, img, self.ANKLE)
        assert (params.kp, params.ki, params.kd, params.delay) == \
            (465.98, 11.649, 116.49, 0.10)
        assert np.all(vec == 0.0)

    def test_sign_decoding(self):
        assert net.decode_controlled(0.3) is Controlled.COM_SWAY
        assert net.decode_controlled(-0.3) is Controlled.JOINT_ANGLE
        # invariant under positive rescaling
        for scale in (1e-3, 1.0, 1e3):
            assert net.decode_controlled(0.3 * scale) is Controlled.COM_SWAY
            assert net.decode_controlled(-0.3 * scale) is Controlled.JOINT_ANGLE

    def test_round_trip_recovers_drawn_params(self, defaults):
        from postureid import dataset

        rng = np.random.default_rng(17)
        params, targets = dataset.sample_parameters(rng, defaults)
        stats = TargetStats(mean=np.full(5, 0.1), variance=np.full(5, 0.3))
        for j in range(3):
            t = targets[j].to_array()
            z = dataset.standardize_targets(t, stats)
            vec = dataset.destandardize_targets(z, stats)
            rec = net.params_from_deviations(vec, defaults.modules[j])
            assert rec.kp == pytest.approx(params[j].kp, rel=1e-6)
            assert rec.ki == pytest.approx(params[j].ki, rel=1e-6)
            assert rec.kd == pytest.approx(params[j].kd, rel=1e-6)
            assert rec.delay == pytest.approx(params[j].delay, rel=1e-6)
            assert rec.controlled is params[j].controlled

    def test_deviation_clamp(self):
        p = net.params_from_deviations(np.array([-1.5, 0, 0, -2.0, 1.0]),
                                       self.ANKLE)
        assert p.kp == 0.0
        assert p.delay == 0.0
