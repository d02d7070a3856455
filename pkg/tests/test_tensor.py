import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualticket import tensor as T
from dualticket.errors import ConfigurationError, DimensionError, InputError, NonFiniteError, UsageError

from conftest import central_diff, rel_error


def test_matmul_identity():
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    T.backward(T.tensor_sum(T.matmul(a, b)))
    num = central_diff(lambda: (a.data @ b.data).sum(), a.data)
    assert rel_error(a.grad, num) < 1e-4
    num_b = central_diff(lambda: (a.data @ b.data).sum(), b.data)
    assert rel_error(b.grad, num_b) < 1e-4


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_sum_kernel():
    out = T.conv2d(T.Tensor(np.ones((1, 2, 2))), T.Tensor(np.ones((1, 1, 2, 2))))
    assert out.data.tolist() == [[[4.0]]]


def test_conv_non_integral_output_is_config_error():
    with pytest.raises(ConfigurationError):
        T.conv2d(T.Tensor(np.ones((1, 6, 6))), T.Tensor(np.ones((1, 1, 3, 3))), stride=2)


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(2, 7, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_grads(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    k = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    h = (5 + 2 * padding - 3) // stride + 1
    weights = rng.normal(size=(3, h, h))
    T.backward(T.tensor_sum(T.mul(T.conv2d(x, k, stride, padding), weights)))

    def f():
        return float((T.conv2d(T.Tensor(x.data), T.Tensor(k.data), stride, padding).data * weights).sum())

    assert rel_error(k.grad, central_diff(f, k.data)) < 1e-4
    assert rel_error(x.grad, central_diff(f, x.data)) < 1e-4


def test_conv_is_independent_of_batch_order(rng):
    x = rng.normal(size=(5, 2, 6, 6))
    k = T.Tensor(rng.normal(size=(4, 2, 3, 3)))
    perm = np.array([3, 0, 4, 1, 2])
    a = T.conv2d(T.Tensor(x), k, 1, 1).data
    b = T.conv2d(T.Tensor(x[perm]), k, 1, 1).data
    assert np.array_equal(a[perm], b)
    single = T.conv2d(T.Tensor(x[2]), k, 1, 1).data
    assert np.array_equal(single, a[2])


def test_relu_values():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = np.array([0.5, 3.0, 1e-9])
    assert np.array_equal(T.relu(T.Tensor(x)).data, x)


@pytest.mark.parametrize("seed", range(10))
def test_relu_grad_is_indicator(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    T.backward(T.tensor_sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


def test_relu_subgradient_at_zero_is_zero():
    x = T.Tensor([0.0, 1.0], requires_grad=True)
    T.backward(T.tensor_sum(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert loss.item() == pytest.approx(np.log(10), abs=1e-12)
    assert loss.item() == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_large_logit_is_stable():
    loss = T.softmax_cross_entropy(T.Tensor([[1000.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InputError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_grad(seed):
    rng = np.random.default_rng(seed)
    z = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=4)
    T.backward(T.softmax_cross_entropy(z, labels))
    num = central_diff(lambda: T.softmax_cross_entropy(T.Tensor(z.data), labels).item(), z.data)
    assert rel_error(z.grad, num) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_cross_entropy_finite_for_bounded_logits(logits, labels):
    z = T.Tensor(logits, requires_grad=True)
    loss = T.softmax_cross_entropy(z, labels)
    T.backward(loss)
    assert np.isfinite(loss.item()) and np.all(np.isfinite(z.grad))


def test_backward_sum_gives_ones(rng):
    x = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_accumulates_reuse(rng):
    x = T.Tensor(rng.normal(size=4), requires_grad=True)
    T.backward(T.tensor_sum(T.add(x, x)))
    np.testing.assert_array_equal(x.grad, np.full(4, 2.0))


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        T.backward(T.relu(x))


def test_backward_consumes_graph():
    x = T.Tensor(np.ones(3), requires_grad=True)
    loss = T.tensor_sum(T.relu(x))
    T.backward(loss)
    with pytest.raises(UsageError):
        T.backward(loss)


def _mlp_loss(x, y, w1, b1, w2, b2):
    h = T.relu(T.add(T.matmul(x, w1), b1))
    return T.softmax_cross_entropy(T.add(T.matmul(h, w2), b2), y)


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_mlp_grad(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(6, 4)))
    y = rng.integers(0, 3, size=6)
    ps = [T.Tensor(rng.normal(size=s), requires_grad=True) for s in [(4, 5), (5,), (5, 3), (3,)]]
    T.backward(_mlp_loss(x, y, *ps))
    for p in ps:
        def f():
            return _mlp_loss(x, y, *[T.Tensor(q.data) for q in ps]).item()
        assert rel_error(p.grad, central_diff(f, p.data)) < 1e-4


def test_forward_deterministic(rng):
    x = rng.normal(size=(4, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    a = T.conv2d(T.Tensor(x), T.Tensor(k), 1, 1).data
    b = T.conv2d(T.Tensor(x), T.Tensor(k), 1, 1).data
    assert a.tobytes() == b.tobytes()


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, np.nan])


def test_graph_records_in_creation_order(rng):
    x = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    a = T.relu(x)
    b = T.matmul(a, x)
    assert a._id < b._id and b._parents[0] is a


def test_no_grad_records_nothing(rng):
    x = T.Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad and y.is_leaf
