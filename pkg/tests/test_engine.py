import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsan import engine as E
from stsan.engine import Parameter, Tensor
from stsan.gradcheck import check_gradients, relative_error

RNG = np.random.default_rng(1234)


def P(shape, name="x", scale=1.0):
    return Parameter(RNG.normal(scale=scale, size=shape), name=name)


def naive_conv(x, k, b):
    """Loop oracle for single-image same-size conv with zero padding."""
    I, J, cin = x.shape
    ks, _, _, cout = k.shape
    r = ks // 2
    out = np.zeros((I, J, cout))
    for i in range(I):
        for j in range(J):
            for a in range(ks):
                for c in range(ks):
                    ii, jj = i + a - r, j + c - r
                    if 0 <= ii < I and 0 <= jj < J:
                        out[i, j] += x[ii, jj] @ k[a, c]
    return out + b


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- conv2d ----------------------------------------------------------------

def test_conv_zero_kernel_gives_zero():
    x = Tensor(RNG.normal(size=(4, 5, 3)))
    y = E.conv2d(x, Tensor(np.zeros((3, 3, 3, 2))), Tensor(np.zeros(2)))
    assert np.all(y.data == 0)


def test_conv_identity_1x1():
    x = Tensor(RNG.normal(size=(4, 5, 3)))
    y = E.conv2d(x, Tensor(np.eye(3).reshape(1, 1, 3, 3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_ones_hand_example():
    y = E.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data[..., 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_matches_loop_oracle():
    x, k, b = RNG.normal(size=(5, 4, 3)), RNG.normal(size=(3, 3, 3, 2)), RNG.normal(size=2)
    y = E.conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(y.data, naive_conv(x, k, b), atol=1e-12)


def test_grouped_conv_is_per_group_conv():
    x, k, b = RNG.normal(size=(2, 4, 3, 3, 2)), RNG.normal(size=(4, 3, 3, 2, 5)), RNG.normal(size=(4, 5))
    y = E.conv2d(Tensor(x), Tensor(k), Tensor(b))
    for n in range(2):
        for g in range(4):
            np.testing.assert_allclose(y.data[n, g], naive_conv(x[n, g], k[g], b[g]), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(E.ShapeError):
        E.conv2d(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    k = Tensor(r.normal(size=(3, 3, 2, 3)))
    x, y = r.normal(size=(4, 4, 2)), r.normal(size=(4, 4, 2))
    lhs = E.conv2d(Tensor(a * x + b * y), k).data
    rhs = a * E.conv2d(Tensor(x), k).data + b * E.conv2d(Tensor(y), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# -- dense / activations / softmax / layer norm ----------------------------

def test_dense_identity_and_hand_example():
    x = Tensor(RNG.normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(E.dense_affine(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)
    y = E.dense_affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([3.0, 3.0]))
    np.testing.assert_array_equal(y.data, [[4.0, 5.0]])


def test_dense_matches_triple_loop():
    r = np.random.default_rng(5)
    x, W, b = r.normal(size=(2, 3)), r.normal(size=(3, 4)), r.normal(size=4)
    y = E.dense_affine(Tensor(x), Tensor(W), Tensor(b))
    np.testing.assert_allclose(y.data, naive_matmul(x, W) + b, atol=1e-12)


def test_dense_mismatch():
    with pytest.raises(E.ShapeError):
        E.dense_affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


def test_activations():
    assert E.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert E.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert E.tanh(Tensor([0.0])).data[0] == 0.0
    assert E.activation(Tensor([np.log(3.0)]), "sigmoid").data[0] == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ValueError):
        E.activation(Tensor([0.0]), "gelu")


def test_sigmoid_extreme_inputs_are_finite():
    y = E.sigmoid(Tensor([-800.0, 800.0]))
    assert y.data.tolist() == [0.0, 1.0]


def test_softmax_examples():
    np.testing.assert_allclose(E.softmax(Tensor(np.full(4, 2.5))).data, 0.25)
    np.testing.assert_allclose(E.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    with pytest.raises(ValueError):
        E.softmax(Tensor(np.ones(3)), axes=())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), c=st.floats(-50, 50),
       axes=st.sampled_from([(-1,), (0,), (1, 2), (0, 2), (0, 1, 2)]))
def test_softmax_properties(seed, c, axes):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, 4, 5))
    y = E.softmax(Tensor(x), axes).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=axes), 1.0, atol=1e-9)
    np.testing.assert_allclose(E.softmax(Tensor(x + c), axes).data, y, atol=1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(E.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero, 1e-6).data, 0.0)
    np.testing.assert_allclose(E.layer_norm(Tensor([1.0, 2.0, 3.0]), one, zero, 0.0).data,
                               [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], atol=1e-14)
    y = E.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12).data
    np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-9)


# -- gradients -------------------------------------------------------------

def test_gradient_of_sum_is_ones():
    p = P((3, 4), "p")
    g = E.gradient_of(E.sum_(p), [p])
    np.testing.assert_array_equal(g["p"], np.ones((3, 4)))


def test_gradient_of_unrelated_param_is_zero():
    p, q = P((3,), "p"), P((2,), "q")
    g = E.gradient_of(E.sum_(E.square(q)), [p, q])
    np.testing.assert_array_equal(g["p"], np.zeros(3))


def test_gradient_of_non_scalar_raises():
    p = P((3,), "p")
    with pytest.raises(E.ShapeError):
        E.gradient_of(p * 2.0, [p])


def test_shared_node_visited_once():
    p = P((3,), "p")
    y = E.square(p)
    loss = E.sum_(y + y)  # y feeds two edges
    E.backward(loss)
    np.testing.assert_allclose(p.grad, 4 * p.data)


def test_non_finite_detection():
    with pytest.raises(E.NonFiniteError):
        E.mul(Tensor([np.inf]), Tensor([0.0]))


def test_no_grad_records_nothing():
    p = P((2,), "p")
    with E.no_grad():
        y = p * 3.0
    assert not y.requires_grad and y.node_id is None


def test_forward_rerun_is_bit_identical():
    x, k, b = P((2, 4, 4, 3)), P((3, 3, 3, 4)), P((4,))
    f = lambda: E.softmax(E.layer_norm(E.relu(E.conv2d(x, k, b)), Tensor(np.ones(4)), Tensor(np.zeros(4))), (1, 2))
    assert np.array_equal(f().data, f().data)


def _weights(shape):
    return Tensor(RNG.normal(size=shape))


PRIMITIVE_CASES = {
    "add_broadcast": lambda: ([P((2, 3, 4)), P((3, 1), "b")], lambda a, b: E.add(a, b)),
    "sub": lambda: ([P((2, 3)), P((2, 3), "b")], lambda a, b: E.sub(a, b)),
    "mul_broadcast": lambda: ([P((2, 3, 4)), P((4,), "b")], lambda a, b: E.mul(a, b)),
    "square": lambda: ([P((3, 2))], E.square),
    "reshape": lambda: ([P((2, 6))], lambda a: E.reshape(a, (3, 4))),
    "transpose": lambda: ([P((2, 3, 4))], lambda a: E.transpose(a, (2, 0, 1))),
    "getitem": lambda: ([P((3, 4, 5))], lambda a: a[:, 1:3, -1:]),
    "concat": lambda: ([P((2, 3)), P((2, 2), "b")], lambda a, b: E.concat([a, b], axis=1)),
    "broadcast_to": lambda: ([P((1, 3))], lambda a: E.broadcast_to(a, (4, 3))),
    "sum_axes": lambda: ([P((2, 3, 4))], lambda a: E.sum_(a, (0, 2))),
    "mean": lambda: ([P((2, 3, 4))], lambda a: E.mean(a, -1, keepdims=True)),
    "matmul_batched": lambda: ([P((2, 1, 3, 4)), P((5, 4, 2), "b")], E.matmul),
    "dense_affine": lambda: ([P((2, 3, 4)), P((4, 5), "W"), P((5,), "b")], E.dense_affine),
    "conv2d": lambda: ([P((2, 4, 5, 3)), P((3, 3, 3, 2), "k"), P((2,), "b")], E.conv2d),
    "conv2d_grouped": lambda: ([P((2, 3, 4, 4, 2)), P((3, 3, 3, 2, 2), "k"), P((3, 2), "b")], E.conv2d),
    "relu": lambda: ([P((4, 5))], E.relu),
    "tanh": lambda: ([P((4, 5))], E.tanh),
    "sigmoid": lambda: ([P((4, 5))], E.sigmoid),
    "softmax_last": lambda: ([P((3, 5))], lambda a: E.softmax(a, -1)),
    "softmax_joint": lambda: ([P((2, 3, 2, 4))], lambda a: E.softmax(a, (1, 2, 3))),
    "layer_norm": lambda: ([P((3, 4, 6)), P((6,), "g"), P((6,), "b")],
                           lambda x, g, b: E.layer_norm(x, g, b, 1e-6)),
    "mse_loss": lambda: ([P((5, 2))], lambda a: E.mse_loss(a, np.zeros((5, 2)))),
}


@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(case):
    params, fn = PRIMITIVE_CASES[case]()
    # weight each output element so the scalar loss exercises every entry
    probe = {}

    def loss():
        out = fn(*params)
        if out.data.size == 1:
            return E.sum_(out)
        if "w" not in probe:
            probe["w"] = _weights(out.shape)
        return E.sum_(E.mul(out, probe["w"]))

    errors = check_gradients(loss, params)
    assert max(errors.values()) < 1e-4, errors


def test_dropout_gradient_with_fixed_mask():
    x = P((4, 6))
    state = np.random.default_rng(3).bit_generator.state

    def loss():
        rng = np.random.default_rng(3)
        rng.bit_generator.state = state
        return E.sum_(E.square(E.dropout(x, 0.3, rng, training=True)))

    assert max(check_gradients(loss, [x]).values()) < 1e-4


def test_dropout_identity_in_eval():
    x = Tensor(RNG.normal(size=(3, 3)))
    assert E.dropout(x, 0.5, None, training=False) is x


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5
