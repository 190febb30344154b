import numpy as np
import pytest

from mrtnet.tensor import (
    Tensor,
    backward,
    concat_channels,
    elementwise,
    finite_diff_check,
    matmul,
    precision,
    reduce,
    reduce_min,
    relu,
    reshape,
    tanh,
    topological_order,
    transpose,
)


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


def test_relu_values():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0, 0, 2])


def test_add_values():
    np.testing.assert_array_equal(elementwise("add", Tensor([1.0, 2]), Tensor([3.0, 4])).data, [4, 6])


def test_tanh_at_zero():
    x = Tensor([0.0], requires_grad=True)
    y = tanh(x)
    assert y.data[0] == 0
    backward(y.sum())
    assert x.grad[0] == 1


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\[2\].*\[3\]"):
        elementwise("add", Tensor([1.0, 2]), Tensor([1.0, 2, 3]))


def test_relu_backward_masks_nonpositive():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    backward(relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_scale_and_sub():
    a, b = Tensor([3.0, 5.0], requires_grad=True), Tensor([1.0, 1.0], requires_grad=True)
    y = elementwise("scale", elementwise("sub", a, b), c=2.0)
    np.testing.assert_array_equal(y.data, [4, 8])
    backward(y.sum())
    np.testing.assert_array_equal(a.grad, [2, 2])
    np.testing.assert_array_equal(b.grad, [-2, -2])


def test_reductions():
    assert reduce("sum", Tensor([1.0, 2, 3])).item() == 6
    assert reduce("mean", Tensor([2.0, 4])).item() == 3
    val, idx = reduce("min", Tensor([5.0, 1, 3]))
    assert val.item() == 1 and idx == 1


def test_min_ties_take_lowest_index_and_route_gradient():
    x = Tensor([[2.0, 1.0, 1.0], [0.5, 3.0, 0.5]], requires_grad=True)
    vals, idx = reduce_min(x, axis=1)
    np.testing.assert_array_equal(idx, [1, 0])
    backward(vals.sum())
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_reduce_bad_axis():
    with pytest.raises(ValueError):
        reduce("sum", Tensor([1.0, 2.0]), axis=1)
    with pytest.raises(ValueError):
        reduce("sum", Tensor(np.zeros((2, 0))), axis=1)


def test_concat_shapes_and_identity():
    a, b = Tensor(np.ones((4, 8))), Tensor(np.ones((2, 8)))
    assert concat_channels([a, b], axis=0).shape == (6, 8)
    assert concat_channels([a]) is a


def test_concat_backward_splits_gradient():
    a = Tensor(np.zeros((1, 2, 3)), requires_grad=True)
    b = Tensor(np.zeros((1, 1, 3)), requires_grad=True)
    y = concat_channels([a, b])
    g = np.arange(9.0).reshape(1, 3, 3)
    backward((y * Tensor(g)).sum())
    np.testing.assert_array_equal(a.grad, g[:, :2])
    np.testing.assert_array_equal(b.grad, g[:, 2:])


def test_concat_then_split_roundtrip():
    rng = np.random.default_rng(0)
    parts = [Tensor(rng.normal(size=(2, c, 5))) for c in (1, 3, 2)]
    y = concat_channels(parts).data
    offsets = np.cumsum([0, 1, 3, 2])
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(y[:, offsets[i]:offsets[i + 1]], p.data)


def test_concat_rejects_incompatible():
    with pytest.raises(ValueError):
        concat_channels([Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 4)))])


def test_backward_examples():
    x = Tensor([1.0, 2, 3], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4, 6])

    x, y = Tensor([2.0], requires_grad=True), Tensor([5.0], requires_grad=True)
    backward((x * y).sum())
    assert x.grad[0] == 5 and y.grad[0] == 2

    x = Tensor([1.0], requires_grad=True)
    backward(x.sum() + x.sum())
    assert x.grad[0] == 2


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2)


def test_tape_order_is_topological_and_unique():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = x * x
    b = a + x
    loss = (b * a).sum()
    order = topological_order(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    assert len(pos) == len(order)
    for t in order:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]


def test_fd_quadratic():
    x = Tensor(np.random.default_rng(1).normal(size=10))
    assert finite_diff_check(lambda t: (t * t).sum(), x, eps=1e-5) < 1e-7


def test_fd_relu_away_from_kink():
    v = np.random.default_rng(2).normal(size=20)
    v[np.abs(v) < 0.1] += 0.5
    assert finite_diff_check(lambda t: relu(t).sum(), Tensor(v), eps=1e-6) < 1e-6


def test_fd_reports_nan_as_failure():
    def f(t):
        return (t * Tensor(np.array([np.nan]))).sum()

    assert finite_diff_check(f, Tensor([1.0])) == float("inf")


@pytest.mark.parametrize("trial", range(100))
def test_primitives_gradients_random(trial):
    rng = np.random.default_rng(100 + trial)
    y = Tensor(rng.normal(size=(2, 3, 4)))

    proj = rng.normal(size=(8, 2))

    def f(t):
        h = tanh(t) * y + relu(t - y) * 0.5
        c = concat_channels([h, t])
        m = reshape(transpose(c, (0, 2, 1)), (8, 6))
        p = matmul(transpose(m, (1, 0)), Tensor(proj)) * 0.1
        vals, _ = reduce_min(p, axis=1)
        return vals.sum() + c.mean() + (h * h).sum()

    x = Tensor(rng.normal(size=(2, 3, 4)))
    # keep relu(x - y) away from its kink
    near = np.abs(x.data - y.data) < 1e-3
    x.data[near] += 1e-2
    assert finite_diff_check(f, x, eps=1e-6) < 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    v = rng.normal(size=6)

    def grads(fn):
        x = Tensor(v.copy(), requires_grad=True)
        backward(fn(x))
        return x.grad

    l1 = lambda x: (tanh(x) * x).sum()
    l2 = lambda x: relu(x).sum() + (x * x * x).sum()
    a, b = 0.7, -1.3
    combo = grads(lambda x: l1(x) * a + l2(x) * b)
    np.testing.assert_allclose(combo, a * grads(l1) + b * grads(l2), rtol=0, atol=1e-12)
