"""Tensor engine: forward values against hand/naive oracles, gradients against finite differences."""

import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tokenvos.autodiff import (
    SGD,
    Adam,
    GeometryError,
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    clip_grad_norm,
    load_checkpoint,
    no_grad,
    numerical_grad,
    ops,
    precision,
    rel_error,
    save_checkpoint,
)
from tokenvos.autodiff.checkpoint import CheckpointError
from tokenvos.autodiff.nn import Conv2d, LayerNorm, Linear


def grad_check(fn, inputs, tol=1e-5):
    """Compare analytic and central-difference gradients of scalar ``fn(*inputs)``."""
    for t in inputs:
        t.grad = None
    fn(*inputs).backward()
    for t in inputs:
        num = numerical_grad(lambda: fn(*inputs).item(), t)
        err = rel_error(t.grad, num, floor=1e-7)
        assert err.max() < tol, f"max rel err {err.max():.2e}"


def param(rng, *shape):
    return Parameter(rng.uniform(-1, 1, size=shape))


def naive_conv(x, w, b, stride, padding):
    """Direct nested-loop convolution, (B, Cin, H, W) x (Cout, Cin, k, k)."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Cin):
                        for u in range(k):
                            for v in range(k):
                                acc += x[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(ops.matmul(a, b).data, [[3, 4], [5, 6]])

    def test_hand_product(self):
        assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient(self, rng):
        a, b = param(rng, 5, 4), param(rng, 4, 3)
        grad_check(lambda a, b: ops.sum(ops.square(ops.matmul(a, b))), [a, b], tol=1e-6)

    def test_backward_formula(self, rng):
        a, b = param(rng, 5, 4), param(rng, 4, 3)
        g = rng.normal(size=(5, 3))
        ops.matmul(a, b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_saturation(self):
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[1000.0, 0.0, 0.0]])).data, [[1, 0, 0]], atol=1e-12)

    def test_long_double_oracle(self):
        getcontext().prec = 40
        xs = [Decimal(1), Decimal(2), Decimal(3)]
        den = sum(x.exp() for x in xs)
        want = [float(x.exp() / den) for x in xs]
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], want, rtol=1e-15)

    def test_nan_raises(self):
        with pytest.raises(NumericalError):
            ops.softmax(Tensor([[0.0, np.nan]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        p = ops.softmax_rows(Tensor(x)).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self, rng):
        x = param(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        grad_check(lambda x: ops.sum(ops.mul(ops.softmax(x, axis=-1), w)), [x])

    def test_log_softmax_gradient(self, rng):
        x = param(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        grad_check(lambda x: ops.sum(ops.mul(ops.log_softmax(x, axis=-1), w)), [x])

    def test_weighted_softmax_matches_unit_weights(self, rng):
        x = Tensor(rng.normal(size=(2, 6)))
        ones = Tensor(np.ones((1, 6)))
        np.testing.assert_allclose(ops.weighted_softmax(x, ones).data, ops.softmax(x).data, atol=1e-15)

    def test_weighted_softmax_zero_weight_drops_key(self, rng):
        x = rng.normal(size=(2, 5))
        w = np.array([[1.0, 0.0, 1.0, 1.0, 0.0]])
        got = ops.weighted_softmax(Tensor(x), Tensor(w)).data
        keep = [0, 2, 3]
        np.testing.assert_allclose(got[:, keep], ops.softmax(Tensor(x[:, keep])).data, atol=1e-15)
        assert (got[:, [1, 4]] == 0).all()

    def test_weighted_softmax_gradient(self, rng):
        x = param(rng, 3, 5)
        w = Parameter(rng.uniform(0.2, 1.0, size=(1, 5)))
        c = rng.normal(size=(3, 5))
        grad_check(lambda x, w: ops.sum(ops.mul(ops.weighted_softmax(x, w), c)), [x, w])


class TestConv:
    def test_counting(self):
        out = ops.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))

    def test_zero_kernel(self, rng):
        out = ops.conv2d(Tensor(rng.normal(size=(2, 3, 8, 8))), Tensor(np.zeros((4, 3, 4, 4))), stride=4)
        assert not out.data.any()

    def test_indivisible_geometry(self):
        with pytest.raises(GeometryError):
            ops.conv2d(Tensor(np.zeros((1, 3, 10, 8))), Tensor(np.zeros((2, 3, 4, 4))), stride=4)

    @pytest.mark.parametrize("k,stride,padding", [(4, 4, 0), (3, 1, 1), (2, 2, 0), (1, 1, 0)])
    def test_nested_loop_oracle(self, rng, k, stride, padding):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("k,stride,padding", [(4, 4, 0), (3, 1, 1)])
    def test_gradient(self, rng, k, stride, padding):
        x, w, b = param(rng, 1, 2, 8, 8), param(rng, 3, 2, k, k), param(rng, 3)
        c = rng.normal(size=ops.conv2d(x, w, b, stride=stride, padding=padding).shape)
        grad_check(lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=stride, padding=padding), c)),
                   [x, w, b])


class TestElementwiseAndShape:
    @pytest.mark.parametrize("op", [ops.gelu, ops.exp, ops.square, ops.relu, ops.neg])
    def test_unary_gradients(self, rng, op):
        x = param(rng, 4, 3)
        c = rng.normal(size=(4, 3))
        grad_check(lambda x: ops.sum(ops.mul(op(x), c)), [x])

    def test_gelu_value(self):
        x = 0.7
        want = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert ops.gelu(Tensor([x])).data[0] == pytest.approx(want, abs=1e-15)

    def test_broadcast_add_mul_div(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4)
        d = Parameter(rng.uniform(1.0, 2.0, size=(3, 1)))
        grad_check(lambda a, b, d: ops.sum(ops.div(ops.mul(ops.add(a, b), a), d)), [a, b, d])

    def test_layer_norm(self, rng):
        x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
        c = rng.normal(size=(3, 6))
        grad_check(lambda x, g, b: ops.sum(ops.mul(ops.layer_norm(x, g, b), c)), [x, g, b])
        y = ops.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)

    def test_concat_split_gather(self, rng):
        a, b = param(rng, 2, 3), param(rng, 4, 3)
        idx = np.array([5, 0, 2, 2])
        c = rng.normal(size=(4, 3))

        def f(a, b):
            x = ops.concat([a, b], axis=0)
            top, rest = ops.split(x, (2, 4), axis=0)
            return ops.add(ops.sum(ops.mul(ops.gather_rows(x, idx), c)), ops.sum(ops.square(top)))

        grad_check(f, [a, b])
        np.testing.assert_array_equal(ops.gather_rows(ops.concat([a, b]), idx).data,
                                      np.concatenate([a.data, b.data])[idx])

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_getitem_max_mean(self, rng):
        x = param(rng, 3, 5)
        grad_check(lambda x: ops.add(ops.sum(ops.max(x, axis=0)), ops.mean(ops.getitem(x, (slice(None), 1)))), [x])

    def test_upsample_bilinear(self, rng):
        x = param(rng, 1, 2, 3, 3)
        c = rng.normal(size=(1, 2, 6, 6))
        grad_check(lambda x: ops.sum(ops.mul(ops.upsample_bilinear(x, 2), c)), [x])
        const = ops.upsample_bilinear(Tensor(np.full((1, 1, 2, 2), 3.0)), 4).data
        np.testing.assert_allclose(const, 3.0, atol=1e-14)

    def test_straight_through(self, rng):
        soft = param(rng, 5)
        hard = (soft.data > 0).astype(float)
        y = ops.straight_through(hard, soft)
        np.testing.assert_array_equal(y.data, hard)
        ops.sum(ops.scale(y, 2.0)).backward()
        np.testing.assert_array_equal(soft.grad, np.full(5, 2.0))


class TestBackward:
    def test_sum_grad_ones(self):
        p = Parameter(np.arange(4.0).reshape(2, 2))
        ops.sum(p).backward()
        np.testing.assert_array_equal(p.grad, np.ones((2, 2)))

    def test_quadratic(self, rng):
        p = param(rng, 2, 2)
        ops.scale(ops.sum(ops.mul(p, p)), 0.5).backward()
        np.testing.assert_allclose(p.grad, p.data, atol=1e-15)

    def test_accumulates(self, rng):
        p = param(rng, 3)
        ops.sum(ops.square(p)).backward()
        first = p.grad.copy()
        ops.sum(ops.square(p)).backward()
        np.testing.assert_allclose(p.grad, 2 * first)

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ValueError):
            ops.square(param(rng, 3)).backward()

    def test_shared_subexpression(self, rng):
        p = param(rng, 3)
        y = ops.square(p)
        ops.sum(ops.add(y, y)).backward()
        np.testing.assert_allclose(p.grad, 4 * p.data)

    def test_no_grad_builds_no_graph(self, rng):
        p = param(rng, 3)
        with no_grad():
            y = ops.square(p)
        assert not y.requires_grad

    def test_deep_chain_is_iterative(self):
        p = Parameter(np.ones(2))
        y = p
        for _ in range(5000):
            y = ops.add(y, 0.0)
        ops.sum(y).backward()
        np.testing.assert_array_equal(p.grad, np.ones(2))

    def test_precision_switch(self):
        with precision("float32"):
            lin = Linear(4, 3, np.random.default_rng(0))
            assert lin.weight.dtype == np.float32
        assert Linear(4, 3, np.random.default_rng(0)).weight.dtype == np.float64


class TestModulesAndOptim:
    def test_linear_layernorm_conv_modules(self, rng):
        lin, ln, conv = Linear(3, 2, rng), LayerNorm(3), Conv2d(1, 2, 2, rng, stride=2)
        x = Tensor(rng.normal(size=(4, 3)))
        np.testing.assert_allclose(lin(x).data, x.data @ lin.weight.data + lin.bias.data)
        assert ln(x).shape == (4, 3)
        assert conv(Tensor(rng.normal(size=(1, 1, 4, 4)))).shape == (1, 2, 2, 2)

    def test_sgd_momentum(self):
        p = Parameter(np.array([1.0]))
        opt = SGD([p], lr=0.1, momentum=0.5)
        for _ in range(2):
            opt.zero_grad()
            ops.sum(p).backward()
            opt.step()
        # buf: 1, then 1.5 -> p = 1 - 0.1 - 0.15
        assert p.data[0] == pytest.approx(0.75)

    def test_adam_first_step_is_lr_sign(self):
        p = Parameter(np.array([1.0, -2.0]))
        opt = Adam([p], lr=0.01)
        ops.sum(ops.square(p)).backward()
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-8)

    def test_adam_minimises_quadratic(self, rng):
        p = param(rng, 5)
        opt = Adam([p], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            ops.sum(ops.square(ops.sub(p, 3.0))).backward()
            opt.step()
        np.testing.assert_allclose(p.data, 3.0, atol=1e-3)

    def test_clip_grad_norm(self):
        p = Parameter(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        params = {"a.weight": rng.normal(size=(3, 4)), "b.bias": rng.normal(size=5)}
        save_checkpoint(tmp_path / "m.ckpt", params, {"model": {"C": 8}}, "abc123", {"steps": 3})
        loaded, header = load_checkpoint(tmp_path / "m.ckpt")
        for k, v in params.items():
            assert loaded[k].tobytes() == v.tobytes()
        assert header["config_digest"] == "abc123"
        assert header["meta"]["steps"] == 3

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
