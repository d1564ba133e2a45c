import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ockd import autodiff as ad
from ockd.autodiff import Adam, AdamState, ShapeError, Tensor, adam_step


def param(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


# -- forward examples --------------------------------------------------------

def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), a).data, a)


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_gelu_matches_tanh_formula():
    x = np.linspace(-3, 3, 13)
    expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(ad.gelu(Tensor(x)).data, expected, rtol=1e-14)


def test_layer_norm_zero_mean_unit_var(rng):
    x = rng.standard_normal((4, 7)) * 3 + 1
    y = ad.layer_norm(x, np.ones(7), np.zeros(7)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, rtol=1e-4)


@pytest.mark.parametrize(
    "op, a, b",
    [
        (ad.matmul, (2, 3), (4, 2)),
        (ad.add, (2, 3), (4, 3)),
        (ad.sub, (3,), (4,)),
        (ad.mul, (2, 2), (3, 3)),
    ],
)
def test_shape_mismatch_names_op_and_shapes(op, a, b):
    with pytest.raises(ShapeError) as err:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    assert op.__name__ in str(err.value)
    assert str(a) in str(err.value) and str(b) in str(err.value)


def test_no_graph_without_requires_grad():
    out = ad.add(Tensor([1.0]), Tensor([2.0]))
    assert not out.requires_grad


def test_no_grad_block_skips_recording(rng):
    p = param(rng, 3)
    with ad.no_grad():
        out = ad.square(p)
    assert not out.requires_grad


# -- backward examples -------------------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    ad.mean(x).backward()
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_requires_scalar(rng):
    x = param(rng, 3)
    with pytest.raises(ValueError, match="scalar"):
        ad.square(x).backward()


def test_unreachable_parameter_grad_stays_none(rng):
    used, unused = param(rng, 2), param(rng, 2)
    ad.sum(used).backward()
    assert unused.grad is None


def test_gradients_accumulate(rng):
    x = param(rng, 3)
    ad.sum(x).backward()
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0] * 3)


def test_shared_subexpression():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    ad.sum(y * y).backward()  # x^4
    np.testing.assert_allclose(x.grad, [4 * 27.0])


# -- gradcheck per op --------------------------------------------------------

UNARY = {
    "relu": ad.relu,
    "gelu": ad.gelu,
    "square": ad.square,
    "softmax": ad.softmax,
    "log_softmax": ad.log_softmax,
    "exp": ad.exp,
    "transpose": ad.transpose,
    "mean_axis": lambda x: ad.mean(x, axis=1),
    "mean_keep": lambda x: ad.mean(x, axis=0, keepdims=True),
    "sum_axis": lambda x: ad.sum(x, axis=-1),
    "sum_all": ad.sum,
    "reshape": lambda x: ad.reshape(x, (4, 3)),
    "permute": lambda x: ad.permute(ad.reshape(x, (2, 2, 3)), (2, 0, 1)),
    "scale": lambda x: x * 2.5,
    "neg": lambda x: -x,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_gradcheck_unary(name, rng, gradcheck):
    x = param(rng, 3, 4)
    op = UNARY[name]

    def f():
        y = op(x)
        # weighted sum so every output element gets a distinct cotangent
        return ad.sum(y * rng_weights(y.shape))

    assert gradcheck(f, [x]) < 1e-4


def rng_weights(shape):
    return np.cos(np.arange(int(np.prod(shape)))).reshape(shape) + 1.5


def test_gradcheck_relu_away_from_kink(rng, gradcheck):
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 2, size=(3, 4)),
               requires_grad=True)
    assert gradcheck(lambda: ad.sum(ad.relu(x) * rng_weights((3, 4))), [x]) < 1e-4


def test_gradcheck_sqrt_log(rng, gradcheck):
    x = param(rng, 5, low=0.5, high=2.0)
    assert gradcheck(lambda: ad.sum(ad.sqrt(x) * rng_weights((5,))), [x]) < 1e-4
    assert gradcheck(lambda: ad.sum(ad.log(x) * rng_weights((5,))), [x]) < 1e-4


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_gradcheck_binary_broadcast(op, rng, gradcheck):
    a = param(rng, 2, 3, 4)
    b = param(rng, 3, 1, low=0.5, high=2.0)
    assert gradcheck(lambda: ad.sum(op(a, b) * rng_weights((2, 3, 4))), [a, b]) < 1e-4


def test_gradcheck_matmul_batched(rng, gradcheck):
    a = param(rng, 2, 3, 4)
    b = param(rng, 4, 5)
    assert gradcheck(lambda: ad.sum(ad.matmul(a, b) * rng_weights((2, 3, 5))), [a, b]) < 1e-4


def test_gradcheck_layer_norm(rng, gradcheck):
    x = param(rng, 3, 6)
    g = param(rng, 6)
    b = param(rng, 6)
    f = lambda: ad.sum(ad.layer_norm(x, g, b) * rng_weights((3, 6)))  # noqa: E731
    assert gradcheck(f, [x, g, b]) < 1e-4


def test_gradcheck_concat(rng, gradcheck):
    a = param(rng, 2, 3)
    b = param(rng, 2, 5)
    f = lambda: ad.sum(ad.concat([a, b], axis=1) * rng_weights((2, 8)))  # noqa: E731
    assert gradcheck(f, [a, b]) < 1e-4


# -- properties --------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**16),
)
def test_linearity_of_backward(a, b, seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 4)
    w = rng.standard_normal(4)

    def f():
        return ad.sum(ad.gelu(x) * w)

    def g():
        return ad.sum(ad.square(x))

    f().backward()
    gf = x.grad.copy()
    x.grad = None
    g().backward()
    gg = x.grad.copy()
    x.grad = None
    (f() * a + g() * b).backward()
    np.testing.assert_allclose(x.grad, a * gf + b * gg, rtol=0, atol=1e-12)


def test_determinism_bitwise(rng):
    data = rng.standard_normal((3, 4))

    def run():
        x = Tensor(data, requires_grad=True)
        w = Tensor(np.arange(8.0).reshape(4, 2) / 7, requires_grad=True)
        y = ad.softmax(ad.gelu(ad.matmul(x, w)))
        loss = ad.sum(ad.square(y))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_outputs_finite(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 4, 5, low=-50, high=50)
    g = param(rng, 5)
    y = ad.softmax(ad.layer_norm(ad.gelu(x), g, g))
    ad.sum(ad.log_softmax(y)).backward()
    assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(x.grad))


# -- Adam --------------------------------------------------------------------

def test_adam_first_step_hand_computed():
    p = Tensor([0.0], requires_grad=True)
    state = AdamState(learning_rate=0.1, weight_decay=0.0)
    adam_step([p], [np.array([1.0])], state)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert state.step_count == 1


def test_adam_zero_gradient_no_change():
    p = Tensor([1.5, -2.0], requires_grad=True)
    state = AdamState(weight_decay=0.0)
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def _scalar_adam(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (vhat**0.5 + eps)
    return p


def test_adam_two_steps_match_scalar_reference():
    p = Tensor([0.7], requires_grad=True)
    state = AdamState(learning_rate=0.05, weight_decay=1e-4)
    grads = [0.3, -1.2]
    for g in grads:
        adam_step([p], [np.array([g])], state)
    ref = _scalar_adam(0.7, grads, 0.05, 0.9, 0.98, 1e-8, 1e-4)
    assert abs(p.data[0] - ref) < 1e-12
    assert state.step_count == 2


def test_adam_defaults():
    s = AdamState()
    assert (s.beta1, s.beta2, s.epsilon, s.weight_decay) == (0.9, 0.98, 1e-8, 1e-4)


def test_adam_missing_gradient_raises(rng):
    a, b = param(rng, 2), param(rng, 2)
    opt = Adam([a, b])
    ad.sum(a).backward()
    with pytest.raises(ValueError, match="missing gradient"):
        opt.step()


def test_adam_moment_shapes(rng):
    p = param(rng, 3, 2)
    state = AdamState()
    adam_step([p], [np.ones((3, 2))], state)
    assert state.first_moment[0].shape == (3, 2)
    assert state.second_moment[0].shape == (3, 2)
