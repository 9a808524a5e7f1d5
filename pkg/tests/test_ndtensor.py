import numpy as np
import pytest
from gradcheck import check_gradients

from vox2surf import ndtensor as nd
from vox2surf.ndtensor import Tensor


class TestElementwise:
    def test_add_componentwise(self):
        out = nd.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_zero_annihilates_value_and_grad(self):
        x = Tensor([2.0, -3.0], requires_grad=True)
        out = nd.mul(x, Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])
        nd.backward(nd.sum_(out))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_exp_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        y = nd.exp(x)
        np.testing.assert_array_equal(y.data, [1.0])
        nd.backward(nd.sum_(y))
        np.testing.assert_allclose(x.grad, [1.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            nd.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_scalar_broadcast(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        out = x * s
        np.testing.assert_array_equal(out.data, [[2.0, 4.0], [6.0, 8.0]])
        nd.backward(out.sum())
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))
        np.testing.assert_allclose(s.grad, 10.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_unary_chain_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(0.2, 1.0, size=7), requires_grad=True)
        def f():
            return nd.sum_(nd.log(nd.sqrt(x) + nd.exp(nd.tanh(x * 0.5))))
        check_gradients(f, [x])

    @pytest.mark.parametrize("seed", range(5))
    def test_binary_gradcheck(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = Tensor(rng.uniform(0.3, 1.0, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.3, 1.0, size=(3, 4)), requires_grad=True)
        def f():
            return nd.sum_((a * b - a / b) ** 2.0)
        check_gradients(f, [a, b])

    def test_leaky_relu(self):
        x = Tensor([-2.0, 3.0], requires_grad=True)
        y = nd.leaky_relu(x, slope=0.01)
        np.testing.assert_allclose(y.data, [-0.02, 3.0])
        nd.backward(y.sum())
        np.testing.assert_allclose(x.grad, [0.01, 1.0])


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nd.matmul(Tensor(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_dot_product(self):
        out = nd.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(4, 2)), requires_grad=True)
        def f():
            return nd.sum_(nd.matmul(a, b) ** 2.0)
        check_gradients(f, [a, b], eps=1e-6, tol=1e-6)


class TestConv3d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1, 1, size=(1, 4, 4, 4)))
        k = Tensor(np.ones((1, 1, 1, 1, 1)))
        out = nd.conv3d(x, k)
        np.testing.assert_allclose(out.data, x.data)

    def test_box_sum_interior(self):
        x = Tensor(np.ones((1, 8, 8, 8)))
        k = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = nd.conv3d(x, k, padding=1)
        assert out.shape == (1, 8, 8, 8)
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1, 1:-1], 27.0)

    def test_stride_two_halves_extent(self):
        x = Tensor(np.zeros((2, 8, 8, 8)))
        k = Tensor(np.zeros((3, 2, 3, 3, 3)))
        out = nd.conv3d(x, k, stride=2, padding=1)
        assert out.shape == (3, 4, 4, 4)

    def test_non_positive_extent_errors(self):
        with pytest.raises(ValueError, match="non-positive"):
            nd.conv3d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 5, 5, 5))))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)), requires_grad=True)
        k = Tensor(rng.uniform(-0.5, 0.5, size=(2, 2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-0.5, 0.5, size=2), requires_grad=True)
        stride = 1 if seed % 2 == 0 else 2
        def f():
            return nd.sum_(nd.conv3d(x, k, bias=b, stride=stride, padding=1) ** 2.0)
        check_gradients(f, [x, k, b], eps=1e-6, tol=1e-5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        nd.backward(nd.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_fanout_accumulates(self):
        x = Tensor([1.0], requires_grad=True)
        y = x + x
        nd.backward(nd.sum_(y))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_backward_twice_doubles(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = nd.sum_(x * x)
        nd.backward(y)
        first = x.grad.copy()
        nd.backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        with pytest.raises(ValueError, match="scalar"):
            nd.backward(y)

    def test_detached_never_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        d = x.detach()
        y = nd.sum_(d * 3.0)
        assert not y.requires_grad and y.node is None
        assert d.grad is None and x.grad is None

    def test_off_tape_root_rejected(self):
        with pytest.raises(ValueError, match="tape"):
            nd.backward(Tensor([1.0]))


class TestShapeAndIndexOps:
    def test_reshape_roundtrip_grad(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        y = nd.reshape(x, (2, 3))
        nd.backward(nd.sum_(y * y))
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_concat_splits_gradient(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        out = nd.concat([a, b])
        nd.backward(nd.sum_(out * Tensor([1.0, 2.0, 3.0])))
        np.testing.assert_array_equal(a.grad, [1.0, 2.0])
        np.testing.assert_array_equal(b.grad, [3.0])

    def test_gather_rows_scatter_adds(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = nd.gather_rows(x, np.array([0, 0, 2]))
        nd.backward(nd.sum_(out))
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_segment_sum_forward_and_grad(self):
        x = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        seg = np.array([0, 1, 0, 1])
        out = nd.segment_sum(x, seg, 2)
        np.testing.assert_array_equal(out.data, [[4.0, 6.0], [8.0, 10.0]])
        nd.backward(nd.sum_(out * Tensor([[1.0, 1.0], [2.0, 2.0]])))
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [2.0, 2.0], [1.0, 1.0], [2.0, 2.0]])

    @pytest.mark.parametrize("seed", range(3))
    def test_scale_rows_and_bias_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(4, 3)), requires_grad=True)
        s = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)
        def f():
            return nd.sum_(nd.add_bias(nd.scale_rows(x, s), b) ** 2.0)
        check_gradients(f, [x, s, b])

    def test_sum_axis_and_mean(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        np.testing.assert_array_equal(nd.sum_(x, axis=1).data, [3.0, 12.0])
        np.testing.assert_allclose(nd.mean(x).item(), 2.5)

    def test_upsample_nearest_grad(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
        y = nd.upsample_nearest2(x)
        assert y.shape == (1, 4, 4, 4)
        nd.backward(nd.sum_(y))
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 2, 2), 8.0))


class TestTapeDeterminism:
    def _run(self, seed):
        nd.reset_tape()
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        loss = nd.sum_(nd.tanh(nd.matmul(x, w)) ** 2.0)
        nd.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    def test_identical_seed_bit_identical(self):
        assert self._run(42) == self._run(42)


class TestPrecision:
    def test_default_dtype_switch(self):
        nd.set_default_dtype(np.float32)
        try:
            t = Tensor([1.0, 2.0])
            assert t.dtype == np.float32
            out = t * 2.0
            assert out.dtype == np.float32
        finally:
            nd.set_default_dtype(np.float64)

    def test_rejects_non_float(self):
        with pytest.raises(ValueError, match="float32 or float64"):
            nd.set_default_dtype(np.int32)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {
            "net.layer0.weight": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
            "net.layer0.bias": Tensor(rng.standard_normal(3), requires_grad=True),
        }
        path = tmp_path / "model.ckpt"
        nd.save_checkpoint(path, params, meta={"stages": 3})
        loaded, meta = nd.load_checkpoint(path)
        assert meta == {"stages": 3}
        assert set(loaded) == set(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name].data, params[name].data)
            assert loaded[name].requires_grad

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="magic"):
            nd.load_checkpoint(path)

    def test_float32_payload(self, tmp_path):
        nd.set_default_dtype(np.float32)
        try:
            params = {"w": Tensor([1.5, -2.5], requires_grad=True)}
            path = tmp_path / "m32.ckpt"
            nd.save_checkpoint(path, params)
            loaded, _ = nd.load_checkpoint(path)
            assert loaded["w"].dtype == np.float32
            np.testing.assert_array_equal(loaded["w"].data, [1.5, -2.5])
        finally:
            nd.set_default_dtype(np.float64)
