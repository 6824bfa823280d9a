import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsdf.numerics import (
    NonFiniteError,
    ShapeError,
    Tensor,
    clip_range,
    evaluate_with_gradients,
    finite_difference_gradient,
    no_grad,
    ops,
    precision,
    project_linf,
)


def gradcheck(fn, *arrays, step=1e-4):
    """Relative error of autodiff against central differences, in float64."""
    worst = 0.0
    with precision(np.float64):
        _, grads = evaluate_with_gradients(lambda *ts: fn(*ts), list(arrays))
        for k, a in enumerate(arrays):

            def f(x, k=k):
                args = [Tensor(x) if j == k else Tensor(arrays[j]) for j in range(len(arrays))]
                with no_grad():
                    return fn(*args).item()

            fd = finite_difference_gradient(f, a, step)
            scale = max(np.abs(fd).max(), 1e-8)
            worst = max(worst, np.abs(grads[k] - fd).max() / scale)
    return worst


def away_from_zero(rng, shape, gap=0.05):
    """Uniform in [-1, 1] but kept clear of the kink at zero."""
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# Each entry builds (function, inputs) from a generator.  Together with
# four draws per entry this gives well over a hundred cases.
CASES = {
    "add": lambda r: (lambda a, b: ops.sum_(a + b * b), [r.uniform(-1, 1, (3, 4)), r.uniform(-1, 1, (4,))]),
    "sub": lambda r: (lambda a, b: ops.sum_((a - b) * a), [r.uniform(-1, 1, (2, 3)), r.uniform(-1, 1, (2, 1))]),
    "mul": lambda r: (lambda a, b: ops.sum_(a * b), [r.uniform(-1, 1, (2, 3)), r.uniform(-1, 1, (2, 3))]),
    "div": lambda r: (lambda a, b: ops.sum_(a / b), [r.uniform(-1, 1, (3,)), r.uniform(1, 2, (3,))]),
    "exp": lambda r: (lambda a: ops.sum_(ops.exp(a)), [r.uniform(-1, 1, (5,))]),
    "log": lambda r: (lambda a: ops.sum_(ops.log(a)), [r.uniform(0.5, 2, (5,))]),
    "sqrt": lambda r: (lambda a: ops.sum_(ops.sqrt(a)), [r.uniform(0.5, 2, (5,))]),
    "sigmoid": lambda r: (lambda a: ops.sum_(ops.sigmoid(a) * a), [r.uniform(-1, 1, (5,))]),
    "abs": lambda r: (lambda a: ops.sum_(ops.abs_(a) * a), [away_from_zero(r, (6,))]),
    "relu": lambda r: (lambda a: ops.sum_(ops.relu(a) * a), [away_from_zero(r, (6,))]),
    "clamp": lambda r: (lambda a: ops.sum_(ops.clamp(a, -0.5, 0.5) * a), [r.choice([-0.9, -0.2, 0.3, 0.8], 6) + r.uniform(-0.05, 0.05, 6)]),
    "reshape": lambda r: (lambda a: ops.sum_(ops.reshape(a, (3, 2)) * np.arange(6.0).reshape(3, 2)), [r.uniform(-1, 1, (2, 3))]),
    "transpose": lambda r: (lambda a: ops.sum_(ops.transpose(a, (1, 0)) * np.arange(6.0).reshape(3, 2)), [r.uniform(-1, 1, (2, 3))]),
    "getitem": lambda r: (lambda a: ops.sum_(a[1:, ::2] * a[1:, ::2]), [r.uniform(-1, 1, (3, 4))]),
    "concat": lambda r: (lambda a, b: ops.sum_(ops.concat([a, b], 1) * np.arange(10.0).reshape(2, 5)), [r.uniform(-1, 1, (2, 2)), r.uniform(-1, 1, (2, 3))]),
    "broadcast_to": lambda r: (lambda a: ops.sum_(ops.broadcast_to(a, (2, 3, 4)) * np.arange(24.0).reshape(2, 3, 4)), [r.uniform(-1, 1, (3, 1))]),
    "sum": lambda r: (lambda a: ops.sum_(ops.sum_(a, 1) * ops.sum_(a, 1)), [r.uniform(-1, 1, (3, 4))]),
    "mean": lambda r: (lambda a: ops.sum_(ops.mean(a, (-2, -1), keepdims=True) * a), [r.uniform(-1, 1, (2, 3, 3))]),
    "std": lambda r: (lambda a: ops.sum_(ops.std(a, (-2, -1)) * np.array([1.0, -2.0])), [r.uniform(-1, 1, (2, 4, 4))]),
    "l1_norm": lambda r: (lambda a: ops.l1_norm(a), [away_from_zero(r, (7,))]),
    "l2_norm": lambda r: (lambda a: ops.l2_norm(a), [r.uniform(-1, 1, (7,))]),
    "squared_error": lambda r: (lambda a, b: ops.squared_error(a, b), [r.uniform(-1, 1, (3, 3)), r.uniform(-1, 1, (3, 3))]),
    "matmul": lambda r: (lambda a, b: ops.sum_(ops.matmul(a, b) * ops.matmul(a, b)), [r.uniform(-1, 1, (2, 3)), r.uniform(-1, 1, (3, 4))]),
    "conv2d": lambda r: (lambda x, w, b: ops.sum_(ops.conv2d(x, w, b, 1, 1) * ops.conv2d(x, w, b, 1, 1)), [r.uniform(-1, 1, (1, 2, 4, 4)), r.uniform(-1, 1, (3, 2, 3, 3)), r.uniform(-1, 1, (3,))]),
    "conv2d_stride2": lambda r: (lambda x, w: ops.sum_(ops.conv2d(x, w, None, 2, 1) * np.arange(12.0).reshape(1, 3, 2, 2)), [r.uniform(-1, 1, (1, 2, 4, 4)), r.uniform(-1, 1, (3, 2, 3, 3))]),
    "pixel_shuffle": lambda r: (lambda x: ops.sum_(ops.pixel_shuffle(x, 2) * np.arange(16.0).reshape(1, 1, 4, 4)), [r.uniform(-1, 1, (1, 4, 2, 2))]),
    "avg_pool2d": lambda r: (lambda x: ops.sum_(ops.avg_pool2d(x, 2) * ops.avg_pool2d(x, 2)), [r.uniform(-1, 1, (1, 2, 4, 4))]),
    "max_pool2d": lambda r: (lambda x: ops.sum_(ops.max_pool2d(x, 2) * np.arange(8.0).reshape(1, 2, 2, 2)), [r.permutation(32).reshape(1, 2, 4, 4) / 32.0]),
    "upsample_nearest": lambda r: (lambda x: ops.sum_(ops.upsample_nearest(x, 2) * np.arange(16.0).reshape(1, 1, 4, 4)), [r.uniform(-1, 1, (1, 1, 2, 2))]),
    "spatial_softmax": lambda r: (lambda x: ops.sum_(ops.spatial_softmax(x) * np.arange(16.0).reshape(1, 1, 4, 4)), [r.uniform(-1, 1, (1, 1, 4, 4))]),
    "resize_bilinear": lambda r: (lambda x: ops.sum_(ops.resize_bilinear(x, (3, 5)) * np.arange(15.0).reshape(1, 1, 3, 5)), [r.uniform(-1, 1, (1, 1, 4, 4))]),
}


@pytest.mark.parametrize("draw", range(4))
@pytest.mark.parametrize("name", sorted(CASES))
def test_operator_gradients_match_finite_differences(name, draw):
    rng = np.random.default_rng(1000 * draw + sorted(CASES).index(name))
    fn, inputs = CASES[name](rng)
    assert gradcheck(fn, *inputs) < 1e-4


def test_square_derivative():
    _, (g,) = evaluate_with_gradients(lambda x: x * x, [np.array(3.0)])
    assert g == pytest.approx(6.0)


def test_sigmoid_sum_gradient_at_zero():
    _, (g,) = evaluate_with_gradients(lambda x: ops.sum_(ops.sigmoid(x)), [np.zeros(4)])
    np.testing.assert_allclose(g, 0.25)


def test_mapping_leaves_and_gradient_shapes():
    value, grads = evaluate_with_gradients(lambda a, b: ops.sum_(a * b), {"a": np.ones((2, 3)), "b": np.full((2, 3), 2.0)})
    assert value.item() == 12
    assert grads["a"].shape == (2, 3)
    np.testing.assert_array_equal(grads["a"], 2.0)


def test_unused_leaf_gets_zero_gradient():
    _, (ga, gb) = evaluate_with_gradients(lambda a, b: ops.sum_(a), [np.ones(3), np.ones(2)])
    np.testing.assert_array_equal(gb, 0.0)


def test_shared_subexpression_accumulates():
    # y = a*a used twice: d/da (y + y) = 4a
    def fn(a):
        y = a * a
        return ops.sum_(y + y)

    _, (g,) = evaluate_with_gradients(fn, [np.array([1.5, -2.0])])
    np.testing.assert_allclose(g, [6.0, -8.0])


class TestFiniteDifference:
    def test_square(self):
        g = finite_difference_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-3)
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant(self):
        np.testing.assert_array_equal(finite_difference_gradient(lambda x: 4.0, np.ones((2, 2))), 0.0)

    def test_l1(self):
        g = finite_difference_gradient(lambda x: float(np.abs(x).sum()), np.array([2.0, -2.0]), 1e-3)
        np.testing.assert_allclose(g, [1.0, -1.0], atol=1e-9)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda x: 0.0, np.ones(1), 0.0)

    def test_non_finite_value(self):
        with pytest.raises(NonFiniteError):
            finite_difference_gradient(lambda x: float("nan"), np.ones(2))


class TestErrors:
    def test_shape_mismatch_names_operator_and_shapes(self):
        with pytest.raises(ShapeError) as e:
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))
        assert e.value.op == "add"
        assert "(2, 3)" in str(e.value) and "(4,)" in str(e.value)

    def test_matmul_shapes(self):
        with pytest.raises(ShapeError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_intermediate_reports_node(self):
        a = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        with pytest.raises(NonFiniteError) as e, np.errstate(divide="ignore"):
            Tensor(np.ones(2)) / a
        assert e.value.op == "div"
        assert isinstance(e.value.node_id, int)

    def test_exp_argument_clamped(self):
        out = ops.exp(np.array([40.0, -40.0, 1.0]))
        np.testing.assert_allclose(out.data, np.exp([30.0, -30.0, 1.0]).astype(np.float32))
        _, (g,) = evaluate_with_gradients(lambda x: ops.sum_(ops.exp(x)), [np.array([40.0, 0.0])])
        assert g[0] == 0.0 and g[1] == pytest.approx(1.0)

    def test_implicit_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()


class TestPrecision:
    def test_default_is_float32(self):
        assert Tensor([1.0]).data.dtype == np.float32

    def test_precision_context_restores(self):
        with precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            b = a * 2
        assert b.node is None and not b.requires_grad


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))

    def run():
        return ops.spatial_softmax(ops.conv2d(x, w, None, 1, 1)).data

    assert run().tobytes() == run().tobytes()


class TestProjection:
    def test_examples(self):
        np.testing.assert_allclose(project_linf(np.array([0.08, -0.2, 0.01]), 0.05).data, [0.05, -0.05, 0.01])
        np.testing.assert_array_equal(project_linf(np.zeros(4), 0.05).data, 0.0)

    def test_clip_examples(self):
        assert clip_range(np.array([1.3]), 0, 1).data[0] == 1.0
        assert clip_range(np.array([0.4]), 0, 1).data[0] == np.float32(0.4)
        assert clip_range(np.array([-0.07]), -0.05, 0.05).data[0] == np.float32(-0.05)

    def test_errors(self):
        with pytest.raises(ValueError):
            clip_range(np.zeros(2), 1.0, 0.0)
        with pytest.raises(ValueError):
            project_linf(np.zeros(2), -0.1)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float32, st.integers(1, 20), elements=st.floats(-10, 10, width=32)),
        st.floats(0, 1, width=32),
    )
    def test_idempotent_and_bounded(self, t, eps):
        once = project_linf(t, eps).data
        assert project_linf(once, eps).data.tobytes() == once.tobytes()
        assert np.abs(once).max() <= np.float32(eps)
        inside = np.abs(t) <= np.float32(eps)
        np.testing.assert_array_equal(once[inside], t[inside])
