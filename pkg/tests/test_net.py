import numpy as np
import pytest

from apcotta.cloud import IGNORE, PointCloud, SubCloudBatch, make_batch
from apcotta.net import (
    BATCH_STATS,
    RUNNING_STATS,
    AugmentParams,
    CheckpointError,
    NetSpec,
    NetworkFault,
    batch_neighbors,
    cross_entropy,
    init_network,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    softmax_with_temperature,
    strong_augment,
    weak_augment,
)
from apcotta.train import PretrainConfig, BatchGeometry, pretrain, train_step
from oracles import gradient_errors, reference_logits


def tiny_batch(seed=0, b=1, n=17, f=1, c=5):
    rng = np.random.default_rng(seed)
    return SubCloudBatch(rng.normal(size=(b, n, 3)) * 3, rng.normal(size=(b, n, f)),
                         np.zeros((b, 3)), np.zeros((b, n), dtype=np.int64),
                         rng.integers(0, c, (b, n)))


def pairwise(p):
    return np.linalg.norm(p[:, :, None] - p[:, None, :], axis=-1)


class TestArchitecture:
    def test_twelve_layer_ids(self):
        net = init_network(NetSpec())
        assert net.layer_ids == list(range(12))
        kinds = [layer.kind for layer in net.layers]
        assert kinds.count("affine") == 7 and kinds.count("bn") == 5
        # 6 hidden affine layers plus the head
        assert net.layers[-1].name == "head"

    def test_same_seed_same_params(self):
        a, b = init_network(NetSpec(), 3), init_network(NetSpec(), 3)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p.values, q.values)

    def test_glorot_bounds_and_zero_bias(self):
        net = init_network(NetSpec(), 1)
        for layer in net.layers:
            if layer.kind == "affine":
                fan_in, fan_out = layer.weight.values.shape
                assert np.abs(layer.weight.values).max() <= np.sqrt(6 / (fan_in + fan_out))
                assert not layer.bias.values.any()

    def test_two_class_head(self):
        net = init_network(NetSpec(class_count=2))
        logits, _ = net.forward(tiny_batch(c=2))
        assert logits.shape == (17, 2)

    def test_invalid_widths(self):
        with pytest.raises(ValueError):
            NetSpec(widths=(32, 0, 64, 128, 64))

    def test_feature_mismatch(self):
        with pytest.raises(ValueError):
            init_network(NetSpec(in_features=2)).forward(tiny_batch(f=1))


class TestForward:
    def test_zero_head(self):
        net = init_network(NetSpec())
        net.head.weight.values[:] = 0
        logits, _ = net.forward(tiny_batch())
        assert not logits.any()

    def test_batch_stats_normalizes(self):
        net = init_network(NetSpec(), 2)
        batch = tiny_batch(n=200, b=2)
        _, trace = net.forward(batch, BATCH_STATS)
        for bn in net.bn_layers:
            xhat, inv_std = trace.cache[bn.name]
            var = 1 / inv_std ** 2 - 1e-5
            assert np.abs(xhat.mean(axis=0)).max() < 1e-5
            wide = var > 0.1  # where eps is negligible the variance is 1
            assert np.abs(xhat.var(axis=0)[wide] - 1).max() < 1e-4
            np.testing.assert_allclose(xhat.var(axis=0), var / (var + 1e-5), rtol=1e-6)

    def test_matches_reference(self):
        net = init_network(NetSpec(), 4)
        batch = tiny_batch(n=40, b=2)
        logits, trace = net.forward(batch)
        ref, _ = reference_logits(net.state(), net.prepare_input(batch), trace.neighbors)
        np.testing.assert_allclose(logits, ref, atol=1e-12)

    def test_permutation_equivariance(self):
        net = init_network(NetSpec(), 5)
        batch = tiny_batch(n=30)
        nbr = batch_neighbors(batch.positions, 16)
        x = net.prepare_input(batch)
        perm = np.random.default_rng(0).permutation(30)
        inv = np.argsort(perm)
        a, _ = net.forward_array(x, nbr)
        b, _ = net.forward_array(x[perm], inv[nbr[perm]])
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_duplicate_rows(self):
        net = init_network(NetSpec(), 6)
        batch = tiny_batch(n=30)
        batch.positions[0, 29] = batch.positions[0, 0]
        batch.features[0, 29] = batch.features[0, 0]
        x = net.prepare_input(batch)
        nbr = batch_neighbors(batch.positions, 16)
        # give the copy the same neighbourhood, with the twins standing in for each other
        nbr[29] = np.where(nbr[0] == 29, 0, nbr[0])
        logits, _ = net.forward_array(x, nbr)
        np.testing.assert_array_equal(logits[0], logits[29])

    def test_nan_fault_names_layer(self):
        net = init_network(NetSpec())
        net.enc[1][0].weight.values[0, 0] = np.nan
        with pytest.raises(NetworkFault, match="enc2"):
            net.forward(tiny_batch())


class TestBackward:
    def test_zero_upstream(self):
        net = init_network(NetSpec())
        logits, trace = net.forward(tiny_batch())
        net.backward(trace, np.zeros_like(logits))
        assert all(not p.grad.any() for p in net.params())

    def test_linearity(self):
        net = init_network(NetSpec(), 1)
        logits, trace = net.forward(tiny_batch())
        g = np.random.default_rng(0).normal(size=logits.shape)
        net.backward(trace, g)
        once = [p.grad.copy() for p in net.params()]
        net.backward(trace, 2 * g)
        for p, g1 in zip(net.params(), once):
            np.testing.assert_allclose(p.grad, 2 * g1, rtol=1e-12, atol=1e-15)

    def test_overwrite_and_accumulate(self):
        net = init_network(NetSpec(), 1)
        logits, trace = net.forward(tiny_batch())
        g = np.ones_like(logits)
        net.backward(trace, g)
        first = [p.grad.copy() for p in net.params()]
        net.backward(trace, g)
        for p, f in zip(net.params(), first):
            np.testing.assert_array_equal(p.grad, f)
        net.backward(trace, g, accumulate=True)
        for p, f in zip(net.params(), first):
            np.testing.assert_allclose(p.grad, 2 * f)

    def test_shape_mismatch(self):
        net = init_network(NetSpec())
        logits, trace = net.forward(tiny_batch())
        with pytest.raises(ValueError):
            net.backward(trace, np.zeros((3, 5)))

    def test_finite_differences_batch_stats(self):
        net = init_network(NetSpec(), 7)
        g = np.random.default_rng(7).normal(size=(17, 5))
        errors = gradient_errors(net, tiny_batch(7), g)
        assert len(errors) == 24
        assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])

    def test_finite_differences_running_stats(self):
        net = init_network(NetSpec(), 8)
        rng = np.random.default_rng(8)
        for bn in net.bn_layers:
            bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
            bn.running_var[:] = rng.uniform(0.5, 2, size=bn.running_var.shape)
        g = rng.normal(size=(17, 5))
        errors = gradient_errors(net, tiny_batch(8), g, RUNNING_STATS)
        assert max(errors.values()) < 1e-4

    def test_float32_path_close_to_float64(self):
        batch = tiny_batch(3, n=64, b=2)
        g = np.random.default_rng(3).normal(size=(128, 5))
        grads = {}
        for dtype in (np.float64, np.float32):
            net = init_network(NetSpec(), 3, dtype=dtype)
            logits, trace = net.forward(batch)
            net.backward(trace, g)
            grads[dtype] = {p.name: p.grad.astype(np.float64) for p in net.params()}
        floor = 1e-3 * max(np.linalg.norm(v) for v in grads[np.float64].values())
        for name, ref in grads[np.float64].items():
            diff = np.linalg.norm(grads[np.float32][name] - ref)
            assert diff / max(np.linalg.norm(ref), floor) < 1e-2, name


class TestSgd:
    def test_plain_step(self):
        net = init_network(NetSpec())
        before = net.state()
        for p in net.params():
            p.grad[...] = 0.5
        sgd_step(net, lr=1.0, momentum=0.0)
        for p in net.params():
            np.testing.assert_array_equal(p.values, before[p.name] - 0.5)

    def test_all_false_mask_is_noop(self):
        net = init_network(NetSpec())
        rng = np.random.default_rng(0)
        for p in net.params():
            p.grad[...] = rng.normal(size=p.grad.shape)
            p.momentum_buf[...] = rng.normal(size=p.grad.shape)
        values = {p.name: p.values.tobytes() for p in net.params()}
        bufs = {p.name: p.momentum_buf.tobytes() for p in net.params()}
        sgd_step(net, 1e-2, 0.98, {lid: False for lid in net.layer_ids})
        for p in net.params():
            assert p.values.tobytes() == values[p.name]
            assert p.momentum_buf.tobytes() == bufs[p.name]

    def test_two_step_unroll(self):
        net = init_network(NetSpec())
        before = net.state()
        lr, g = 0.1, 0.3
        for _ in range(2):
            for p in net.params():
                p.grad[...] = g
            sgd_step(net, lr, 0.98)
        for p in net.params():
            np.testing.assert_allclose(before[p.name] - p.values, lr * g * (1 + 1.98),
                                       rtol=0, atol=1e-12)

    def test_mask_selects_layers(self):
        net = init_network(NetSpec())
        before = net.state()
        for p in net.params():
            p.grad[...] = 1.0
        sgd_step(net, 0.1, 0.0, {3: True})
        for p in net.params():
            changed = not np.array_equal(p.values, before[p.name])
            assert changed == (p.layer_id == 3)


class TestSoftmax:
    def test_equal_logits(self):
        for T in (0.5, 1, 50):
            np.testing.assert_allclose(softmax_with_temperature(np.full((3, 4), 2.0), T), 0.25)

    def test_two_class_value(self):
        np.testing.assert_allclose(softmax_with_temperature(np.array([[1.0, 0.0]]), 1),
                                   [[0.7311, 0.2689]], atol=1e-4)

    def test_huge_temperature(self):
        p = softmax_with_temperature(np.array([[5.0, -3.0, 1.0]]), 1e6)
        assert np.abs(p - 1 / 3).max() < 1e-5

    def test_rows_sum_and_shift_invariance(self):
        z = np.random.default_rng(0).normal(size=(100, 7)) * 30
        p = softmax_with_temperature(z, 0.7)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
        np.testing.assert_allclose(softmax_with_temperature(z + 123.0, 0.7), p, atol=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            softmax_with_temperature(np.zeros((1, 2)), 0)

    def test_cross_entropy_skips_ignore(self):
        z = np.random.default_rng(1).normal(size=(4, 3))
        loss, grad = cross_entropy(z, np.array([0, IGNORE, 2, IGNORE]))
        ref, gref = cross_entropy(z[[0, 2]], np.array([0, 2]))
        assert loss == pytest.approx(ref)
        np.testing.assert_allclose(grad[[0, 2]], gref)
        assert not grad[[1, 3]].any()


class TestAugment:
    def test_weak_is_rigid(self):
        batch = tiny_batch(n=50, b=3)
        out = weak_augment(batch, np.random.default_rng(0))
        np.testing.assert_allclose(pairwise(out.positions), pairwise(batch.positions), atol=1e-9)
        np.testing.assert_array_equal(out.labels, batch.labels)

    def test_strong_without_jitter_or_scale_is_rigid(self):
        batch = tiny_batch(n=50, b=3)
        params = AugmentParams(strong_jitter=0.0, strong_scale=(1.0, 1.0))
        out = strong_augment(batch, np.random.default_rng(0), params)
        np.testing.assert_allclose(pairwise(out.positions), pairwise(batch.positions), atol=1e-9)

    def test_strong_changes_geometry(self):
        batch = tiny_batch(n=50)
        out = strong_augment(batch, np.random.default_rng(0))
        assert np.abs(pairwise(out.positions) - pairwise(batch.positions)).max() > 0.05

    def test_deterministic(self):
        batch = tiny_batch(n=20)
        for fn in (weak_augment, strong_augment):
            a = fn(batch, np.random.default_rng(9))
            b = fn(batch, np.random.default_rng(9))
            np.testing.assert_array_equal(a.positions, b.positions)

    def test_weak_bounds(self):
        batch = SubCloudBatch(np.zeros((200, 1, 3)), np.zeros((200, 1, 1)), np.zeros((200, 3)),
                              np.zeros((200, 1), dtype=np.int64))
        out = weak_augment(batch, np.random.default_rng(1))
        assert np.abs(out.positions).max() <= 0.05


class TestCheckpoint:
    def trained(self):
        net = init_network(NetSpec(), 2)
        batch = tiny_batch(n=40)
        for _ in range(3):
            train_step(net, batch, 0.05, 0.9, 0.9)
        return net, batch

    def test_round_trip_bit_identical(self, tmp_path):
        net, batch = self.trained()
        save_checkpoint(net, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt", net.spec)
        for mode in (BATCH_STATS, RUNNING_STATS):
            a, _ = net.forward(batch, mode)
            b, _ = back.forward(batch, mode)
            assert a.tobytes() == b.tobytes()
        for p, q in zip(net.params(), back.params()):
            assert p.momentum_buf.tobytes() == q.momentum_buf.tobytes()

    def test_header(self, tmp_path):
        net, _ = self.trained()
        save_checkpoint(net, tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        assert data[:4] == b"APCT"
        assert int.from_bytes(data[4:8], "little") == 1

    def test_bad_magic(self, tmp_path):
        net, _ = self.trained()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        net, _ = self.trained()
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_spec_mismatch(self, tmp_path):
        net, _ = self.trained()
        save_checkpoint(net, tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="spec"):
            load_checkpoint(tmp_path / "m.ckpt", NetSpec(class_count=3))


class TestPretrain:
    def test_single_batch_overfit(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 6, (600, 3))
        labels = (pts[:, 2] > 3).astype(int) + 2 * (pts[:, 0] > 3)
        cloud = PointCloud(pts, rng.random((600, 1)), labels, 4)
        batch = make_batch(cloud, 2, 256, 100.0, rng)
        net = init_network(NetSpec(class_count=4), 0)
        for _ in range(200):
            train_step(net, batch, 0.05, 0.9)
        logits, _ = net.forward(batch, BATCH_STATS)
        assert np.mean(logits.argmax(1) == batch.labels.ravel()) >= 0.99

    def scene(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 20, (3000, 3))
        return PointCloud(pts, rng.random((3000, 1)), (pts[:, 2] > 10).astype(int), 2)

    def test_loss_decreases(self):
        cfg = PretrainConfig(epochs=3, steps_per_epoch=10, geometry=BatchGeometry(2, 128, 6.0))
        net = init_network(NetSpec(class_count=2), 0)
        _, history = pretrain(net, self.scene(), cfg, rng=0)
        assert history[-1] < history[0]

    def test_zero_lr_keeps_params(self):
        cfg = PretrainConfig(epochs=1, steps_per_epoch=3, lr=0.0, geometry=BatchGeometry(1, 64, 6.0))
        net = init_network(NetSpec(class_count=2), 0)
        before = net.state()
        pretrain(net, self.scene(), cfg, rng=0)
        for name, v in net.state().items():
            np.testing.assert_array_equal(v, before[name])

    def test_requires_labels(self):
        cloud = PointCloud(np.zeros((5, 3)), np.zeros((5, 1)), np.full(5, IGNORE), 2)
        with pytest.raises(ValueError, match="labeled"):
            pretrain(init_network(NetSpec(class_count=2)), cloud)
