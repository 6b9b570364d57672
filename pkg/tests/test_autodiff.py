import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewshot_forecast import autodiff as ad
from fewshot_forecast.autodiff import Tensor
from fewshot_forecast.errors import EmptySupportError, PoisonedGradientError, ShapeError

from oracles import central_difference, relative_error


def grad_of(build, *leaves):
    for x in leaves:
        x.grad = None
    ad.backward(build())
    return [x.grad for x in leaves]


def numeric_grad(build, x):
    def f():
        with ad.no_grad():
            return build().item()

    return central_difference(f, x.data)


# ----------------------------------------------------------- forward values


def test_matmul_identity_and_hand_product():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_sigmoid_values():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ad.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    ad.backward(ad.tsum(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_binary_ops_reject_broadcasting_but_accept_scalars():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones(2)), Tensor(np.ones(3)))
    assert ad.add(Tensor(np.ones(3)), 2.0).data.tolist() == [3.0, 3.0, 3.0]


def test_elementwise_dispatch():
    x = Tensor([0.5, -0.5])
    assert np.array_equal(ad.elementwise("tanh", x).data, np.tanh(x.data))
    assert np.array_equal(ad.elementwise("sub", x, x).data, [0.0, 0.0])
    with pytest.raises(ValueError):
        ad.elementwise("cosh", x)


def test_concat_values_and_errors():
    a, b = Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])
    assert ad.concat([a, b], axis=1).data.tolist() == [[1.0, 3.0], [2.0, 4.0]]
    assert ad.concat([Tensor(np.zeros(32)), Tensor(np.ones(32))]).shape == (64,)
    with pytest.raises(ShapeError):
        ad.concat([])
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))], axis=1)


def test_softmax_weighted_sum_trivial_cases():
    v = Tensor([[1.5, -2.0]])
    assert np.array_equal(ad.softmax_weighted_sum(Tensor([123.0]), v).data, v.data[0])
    rows = Tensor([[1.0, 2.0], [3.0, 6.0]])
    out = ad.softmax_weighted_sum(Tensor([0.7, 0.7]), rows).data
    assert np.allclose(out, [2.0, 4.0], atol=1e-15)
    with pytest.raises(EmptySupportError):
        ad.softmax_weighted_sum(Tensor(np.zeros(0)), Tensor(np.zeros((0, 2))))


def test_softmax_matches_direct_evaluation():
    w = ad.softmax(Tensor([1.0, 2.0, 3.0])).data
    e = [math.exp(1.0), math.exp(2.0), math.exp(3.0)]
    expected = [x / sum(e) for x in e]
    assert np.max(np.abs(w - expected)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_a_distribution(scores):
    w = ad.softmax(Tensor(scores)).data
    assert np.all(w >= 0.0)
    assert abs(w.sum() - 1.0) <= 1e-12


def test_mse_values_and_errors():
    assert ad.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert ad.mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0
    with pytest.raises(ShapeError):
        ad.mse(Tensor([0.0, 0.0]), Tensor([1.0]))


# ----------------------------------------------------------- backward


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(ad.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_constant_root_is_noop():
    x = Tensor([1.0, 2.0])
    ad.backward(ad.tsum(x))
    assert x.grad is None


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, 2.0))


def test_leaves_accumulate_until_zero_grad():
    x = Tensor([1.0, -2.0], requires_grad=True)
    build = lambda: ad.tsum(ad.mul(x, x))  # noqa: E731
    ad.backward(build())
    first = x.grad.copy()
    ad.backward(build())
    assert np.array_equal(x.grad, 2 * first)
    ad.zero_grad([x])
    ad.backward(build())
    assert np.array_equal(x.grad, first)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_shared_subexpression_gradient():
    x = Tensor([0.3, -0.7], requires_grad=True)
    (g,) = grad_of(lambda: ad.tsum(ad.mul(ad.tanh(x), ad.tanh(x))), x)
    t = np.tanh(x.data)
    assert np.allclose(g, 2 * t * (1 - t * t), rtol=0, atol=1e-15)


def test_tanh_derivative_at_point_three():
    x = Tensor([0.3], requires_grad=True)
    build = lambda: ad.tsum(ad.tanh(x))  # noqa: E731
    (g,) = grad_of(build, x)
    assert relative_error(g, numeric_grad(build, x)) < 1e-6


def test_deep_chain_does_not_recurse():
    x = Tensor([0.5], requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.add(y, 0.0)
    ad.backward(ad.tsum(y))
    assert x.grad.tolist() == [1.0]


def test_index_gradients_basic_and_advanced():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tsum(x[1]))
    assert x.grad.tolist() == [[0, 0, 0], [1, 1, 1]]
    x.grad = None
    ad.backward(ad.tsum(x[np.array([0, 0]), np.array([2, 2])]))
    assert x.grad.tolist() == [[0, 0, 2], [0, 0, 0]]


def test_item_rejects_multi_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_dropout_is_identity_at_eval_and_rescales_in_training():
    x = Tensor(np.ones(10000))
    assert ad.dropout(x, 0.1, None, training=False) is x
    y = ad.dropout(x, 0.1, np.random.default_rng(0), training=True).data
    kept = y > 0
    assert np.allclose(y[kept], 1 / 0.9)
    assert abs(kept.mean() - 0.9) < 0.01


# ----------------------------------------------------------- gradient checks


def _random(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


PRIMITIVES = {
    "matmul": lambda a, b: ad.tsum(ad.matmul(a, b)),
    "add": lambda a, b: ad.tsum(ad.mul(ad.add(a, b), Tensor(_weights(a.shape)))),
    "sub": lambda a, b: ad.tsum(ad.mul(ad.sub(a, b), Tensor(_weights(a.shape)))),
    "mul": lambda a, b: ad.tsum(ad.mul(a, b)),
    "div": lambda a, b: ad.tsum(ad.div(a, ad.add(ad.mul(b, b), 1.0))),
}


@pytest.mark.parametrize("name", ["matmul", "add", "sub", "mul", "div"])
def test_binary_primitive_gradients(name):
    if name == "matmul":
        a, b = _random((3, 4), 1), _random((4, 2), 2)
    else:
        a, b = _random((3, 4), 1), _random((3, 4), 2)
    build = lambda: PRIMITIVES[name](a, b)  # noqa: E731
    ga, gb = grad_of(build, a, b)
    assert relative_error(ga, numeric_grad(build, a)) < 1e-6
    assert relative_error(gb, numeric_grad(build, b)) < 1e-6


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "relu": ad.relu,
    "softmax": ad.softmax,
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (4, 3)),
    "index": lambda x: x[1:, ::2],
    "mean": lambda x: ad.mul(ad.mean(x), 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    x = _random((3, 4), 5)
    if name == "relu":
        # keep clear of the kink
        x.data = np.where(np.abs(x.data) < 1e-3, 0.5, x.data)
    fn = UNARY[name]

    def build():
        y = fn(x)
        if y.ndim == 0:
            return y
        return ad.tsum(ad.mul(y, Tensor(_weights(y.shape))))

    (g,) = grad_of(build, x)
    assert relative_error(g, numeric_grad(build, x)) < 1e-6


def test_concat_gradient_split():
    a, b = _random((2, 3), 1), _random((2, 2), 2)
    w = Tensor(_weights((2, 5)))
    build = lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1), w))  # noqa: E731
    ga, gb = grad_of(build, a, b)
    assert relative_error(ga, numeric_grad(build, a)) < 1e-6
    assert relative_error(gb, numeric_grad(build, b)) < 1e-6


def test_add_bias_gradient():
    x, b = _random((4, 3), 1), _random((3,), 2)
    w = Tensor(_weights((4, 3)))
    build = lambda: ad.tsum(ad.mul(ad.add_bias(x, b), w))  # noqa: E731
    gx, gb = grad_of(build, x, b)
    assert relative_error(gx, numeric_grad(build, x)) < 1e-6
    assert relative_error(gb, numeric_grad(build, b)) < 1e-6


def test_softmax_weighted_sum_gradient():
    s, v = _random((5,), 1), _random((5, 3), 2)
    w = Tensor(_weights((3,)))
    build = lambda: ad.tsum(ad.mul(ad.softmax_weighted_sum(s, v), w))  # noqa: E731
    gs, gv = grad_of(build, s, v)
    assert relative_error(gs, numeric_grad(build, s)) < 1e-6
    assert relative_error(gv, numeric_grad(build, v)) < 1e-6


def test_mse_gradient():
    p, t = _random((7,), 1), Tensor(np.random.default_rng(2).normal(size=7))
    build = lambda: ad.mse(p, t)  # noqa: E731
    (g,) = grad_of(build, p)
    assert np.allclose(g, 2 * (p.data - t.data) / 7, rtol=0, atol=1e-15)
    assert relative_error(g, numeric_grad(build, p)) < 1e-6


def test_repeated_backward_is_deterministic():
    a, b = _random((3, 4), 1), _random((4, 2), 2)
    build = lambda: ad.tsum(ad.tanh(ad.matmul(a, b)))  # noqa: E731
    first = [g.copy() for g in grad_of(build, a, b)]
    second = grad_of(build, a, b)
    assert all(np.array_equal(x, y) for x, y in zip(first, second))


# ----------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_parameters():
    w = Tensor([1.0, -2.0], requires_grad=True)
    opt = ad.Adam({"w": w})
    w.grad = np.zeros(2)
    opt.step()
    assert w.data.tolist() == [1.0, -2.0]
    assert opt.t == 1


def test_adam_first_step_hand_value():
    w = Tensor(0.0, requires_grad=True)
    opt = ad.Adam({"w": w})
    opt.step({"w": np.array(1.0)})
    assert abs(w.item() - (-1e-3 / (1.0 + 1e-8))) < 1e-15


def test_adam_converges_on_quadratic():
    w = Tensor(0.0, requires_grad=True)
    opt = ad.Adam({"w": w}, lr=0.1)
    for _ in range(100):
        w.grad = None
        ad.backward(ad.mul(ad.sub(w, 3.0), ad.sub(w, 3.0)))
        opt.step()
    assert abs(w.item() - 3.0) < 0.5


def test_adam_default_hyperparameters():
    opt = ad.Adam({})
    assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (1e-3, 0.9, 0.999, 1e-8)


def test_adam_poisoned_gradient_aborts_step():
    w = Tensor([1.0], requires_grad=True)
    u = Tensor([2.0], requires_grad=True)
    opt = ad.Adam({"u": u, "w": w})
    with pytest.raises(PoisonedGradientError, match="'w'") as info:
        opt.step({"u": np.array([1.0]), "w": np.array([np.nan])})
    assert info.value.name == "w"
    assert u.data.tolist() == [2.0] and opt.t == 0


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    clipped, norm = ad.clip_gradients(grads, 1.0)
    assert norm == 5.0
    assert np.allclose(clipped["a"], 0.6) and np.allclose(clipped["b"], 0.8) and clipped["c"] is None
    same, _ = ad.clip_gradients(grads, 0.0)
    assert same["a"] is grads["a"]
