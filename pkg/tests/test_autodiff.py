import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from poseforge import autodiff as ad
from poseforge import gradcheck
from poseforge.autodiff import (
    BatchNorm,
    CheckpointError,
    Linear,
    Module,
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
)

PRIMITIVES = gradcheck.primitive_checks(np.random.default_rng(0))


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


@pytest.mark.parametrize("name,fn,leaves", PRIMITIVES, ids=[c[0] for c in PRIMITIVES])
def test_primitive_matches_finite_differences(name, fn, leaves):
    res = gradcheck.check(name, fn, leaves, np.random.default_rng(1))
    assert res.max_rel_error < 1e-4, res


@pytest.mark.parametrize("mode", ["pc", "mv"])
def test_toy_network_matches_finite_differences(mode):
    res = gradcheck.network_check(mode, np.random.default_rng(2))
    assert res.max_rel_error < 1e-4, res


def test_relative_error_floor():
    assert gradcheck.relative_error(1.0, 1.0 + 1e-6) == pytest.approx(1e-6, rel=1e-3)
    # tiny gradients are judged on an absolute scale
    assert gradcheck.relative_error(0.0, 1e-9) == pytest.approx(1e-9 / gradcheck.FLOOR)


class TestForward:
    def test_softmax_uniform(self):
        out = ad.softmax(Tensor(np.full((2, 7), 3.3))).data
        np.testing.assert_allclose(out, 1 / 7, atol=1e-15)

    @given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_softmax_simplex(self, x):
        out = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out >= 0) and np.all(out <= 1)

    def test_softmax_open_interval_for_moderate_logits(self, rng):
        out = ad.softmax(Tensor(rng.uniform(-5, 5, (4, 24)))).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_relu(self):
        x = np.array([-2.0, -0.5, 0.5, 3.0])
        np.testing.assert_array_equal(ad.relu(Tensor(x)).data, [0, 0, 0.5, 3.0])

    def test_identity_conv(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3)] = 1.0
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w)).data, x, atol=1e-15)

    def test_conv_matches_direct_sum(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    want = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
                    assert out[0, o, i, j] == pytest.approx(want, abs=1e-12)

    def test_max_pool2d(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ad.max_pool2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])

    def test_global_max_pool_ties_lowest_index(self):
        x = leaf(np.array([[[1.0], [3.0], [3.0]]]))
        out, idx = ad.global_max_pool(x, axis=1)
        assert idx.tolist() == [[1]]
        ad.backward(ad.sum_(out))
        np.testing.assert_array_equal(x.grad[0, :, 0], [0, 1, 0])

    @given(st.permutations(list(range(9))))
    def test_global_max_pool_permutation_invariant(self, perm):
        x = np.random.default_rng(3).normal(size=(2, 9, 4))
        a, _ = ad.global_max_pool(Tensor(x), axis=1)
        b, _ = ad.global_max_pool(Tensor(x[:, perm]), axis=1)
        np.testing.assert_array_equal(a.data, b.data)

    def test_batchnorm_train_and_running_stats(self, rng):
        x = rng.normal(2.0, 3.0, size=(50, 4))
        rm, rv = np.zeros(4), np.ones(4)
        out = ad.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, True).data
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1), atol=1e-12)

    def test_batchnorm_eval_deterministic(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        bn.running_mean[:] = [0.1, 0.2, 0.3]
        bn.running_var[:] = [1.5, 0.5, 2.0]
        bn.eval()
        x = Tensor(rng.normal(size=(1, 3)))
        a, b = bn(x).data, bn(x).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, (x.data - bn.running_mean) / np.sqrt(bn.running_var + 1e-5))

    def test_batchnorm_needs_two_samples(self):
        with pytest.raises(ShapeError):
            BatchNorm(2)(Tensor(np.ones((1, 2), dtype=np.float32)))

    def test_shape_errors_name_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_non_finite_is_fatal(self):
        big = Tensor(np.array([1e308]))
        with pytest.raises(NumericalError), np.errstate(over="ignore"):
            big * big
        with pytest.raises(NumericalError):
            ad.relu(Tensor(np.array([np.nan])))


class TestLosses:
    @pytest.mark.parametrize("n", [2, 12, 24])
    def test_cross_entropy_uniform(self, n):
        p = Tensor(np.full((1, n), 1.0 / n))
        assert ad.cross_entropy(p, np.array([0])).data[0] == pytest.approx(math.log(n), abs=1e-12)

    def test_cross_entropy_values(self):
        p = Tensor(np.array([[0.25, 0.75], [0.0, 1.0]]))
        out = ad.cross_entropy(p, np.array([0, 1])).data
        assert out[0] == pytest.approx(math.log(4), abs=1e-12)
        assert out[1] == 0.0
        # clamped instead of infinite
        clamp = ad.cross_entropy(p, np.array([0, 0])).data[1]
        assert clamp == pytest.approx(-math.log(1e-12))

    def test_cross_entropy_target_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor(np.full((1, 3), 1 / 3)), np.array([3]))

    @pytest.mark.parametrize("r,delta,want", [(0.0, 1.0, 0.0), (0.5, 1.0, 0.125),
                                              (2.0, 1.0, 1.5), (-2.0, 1.0, 1.5),
                                              (3.0, 2.0, 4.0)])
    def test_huber(self, r, delta, want):
        assert ad.huber(Tensor(np.array([r])), delta).data[0] == pytest.approx(want, abs=1e-15)

    def test_huber_delta_positive(self):
        with pytest.raises(ValueError):
            ad.huber(Tensor(np.zeros(1)), 0.0)


class TestBackward:
    def test_sum_of_squares(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        ad.backward(ad.sum_(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_unused_branch_zero(self, rng):
        a, b = Parameter(rng.normal(size=3)), Parameter(rng.normal(size=3))
        used = ad.sum_(a * a)
        _ = ad.sum_(b * a)  # built but not part of the loss
        ad.backward(used)
        np.testing.assert_array_equal(b.grad, 0.0)

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.relu(leaf(np.ones(3))))

    def test_shared_subexpression(self, rng):
        x = leaf(rng.normal(size=4))
        y = ad.tanh(x)
        ad.backward(ad.sum_(y * y + y))
        t = np.tanh(x.data)
        np.testing.assert_allclose(x.grad, (2 * t + 1) * (1 - t * t), atol=1e-14)

    def test_leaf_gradients_accumulate(self):
        x = leaf([2.0])
        ad.backward(ad.sum_(x * x))
        ad.backward(ad.sum_(x * x))
        assert x.grad[0] == pytest.approx(8.0)


class TestAdam:
    def test_first_step_magnitude(self, rng):
        p = Parameter(rng.normal(size=20))
        start = p.data.copy()
        p.grad = rng.choice([-1, 1], 20) * rng.uniform(0.1, 10, 20)
        ad.adam_step([p], lr=1e-3)
        np.testing.assert_allclose(np.abs(p.data - start), 1e-3, rtol=1e-6)
        assert p.step == 1
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_zero_gradient_no_move(self):
        p = Parameter(np.array([1.0, -2.0]))
        ad.adam_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_quadratic(self):
        x = Parameter(np.array([0.0]))
        for _ in range(500):
            d = x - Tensor(np.array([3.0]))
            ad.backward(ad.sum_(d * d))
            ad.adam_step([x], lr=0.1)
        assert abs(x.data[0] - 3.0) < 1e-2

    def test_matches_reference_rule(self, rng):
        p = Parameter(rng.normal(size=5))
        x, m, v = p.data.copy(), np.zeros(5), np.zeros(5)
        for t in range(1, 6):
            g = rng.normal(size=5)
            p.grad = g.copy()
            ad.adam_step([p], lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)

    def test_lr_positive(self):
        with pytest.raises(ValueError):
            ad.adam_step([Parameter(np.zeros(1))], lr=0.0)


class Tiny(Module):
    def __init__(self, seed):
        super().__init__()
        r = np.random.default_rng(seed)
        self.fc = self.add("fc", Linear(3, 4, r, dtype=np.float64))
        self.bn = self.add("bn", BatchNorm(4, dtype=np.float64))

    def __call__(self, x):
        return self.bn(self.fc(x))


class TestModules:
    def test_linear_init_deterministic_and_bounded(self):
        a, b = Tiny(1), Tiny(1)
        np.testing.assert_array_equal(a.fc.weight.data, b.fc.weight.data)
        assert np.abs(a.fc.weight.data).max() <= math.sqrt(6 / 3)
        assert [n for n, _ in a.named_parameters()] == ["fc.weight", "fc.bias", "bn.gamma",
                                                       "bn.beta"]
        assert [n for n, _ in a.named_buffers()] == ["bn.running_mean", "bn.running_var"]


class TestCheckpoint:
    def _trained(self, rng):
        net = Tiny(0)
        for _ in range(3):
            out = net(Tensor(rng.normal(size=(5, 3))))
            ad.backward(ad.mean(out * out))
            ad.adam_step(net.parameters(), 0.01)
        return net

    def test_round_trip(self, tmp_path, rng):
        net = self._trained(rng)
        ad.save_checkpoint(tmp_path / "c.ckpt", net, {"epoch": 3})
        raw = (tmp_path / "c.ckpt").read_bytes()
        assert raw[:8] == b"PFSCKPT\x01"
        manifest, arrays = ad.read_checkpoint(tmp_path / "c.ckpt")
        assert manifest["extra"] == {"epoch": 3}
        fresh = Tiny(99)
        ad.load_into(fresh, manifest, arrays)
        for (_, p), (_, q) in zip(net.named_parameters(), fresh.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
            np.testing.assert_array_equal(p.m, q.m)
            np.testing.assert_array_equal(p.v, q.v)
            assert p.step == q.step == 3
        np.testing.assert_array_equal(net.bn.running_var, fresh.bn.running_var)

    def test_save_is_deterministic(self, tmp_path, rng):
        net = self._trained(rng)
        ad.save_checkpoint(tmp_path / "a", net)
        ad.save_checkpoint(tmp_path / "b", net)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_corrupt_files(self, tmp_path, rng):
        net = self._trained(rng)
        ad.save_checkpoint(tmp_path / "c", net)
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "bad").write_bytes(b"X" + raw[1:])
        with pytest.raises(CheckpointError, match="magic"):
            ad.read_checkpoint(tmp_path / "bad")
        (tmp_path / "short").write_bytes(raw[:-4])
        with pytest.raises(CheckpointError):
            ad.read_checkpoint(tmp_path / "short")

    def test_shape_mismatch(self, tmp_path, rng):
        ad.save_checkpoint(tmp_path / "c", self._trained(rng))
        other = Tiny(0)
        other.fc = other.add("fc", Linear(2, 4, np.random.default_rng(0), dtype=np.float64))
        with pytest.raises(CheckpointError, match="shape mismatch"):
            ad.load_into(other, *ad.read_checkpoint(tmp_path / "c"))
