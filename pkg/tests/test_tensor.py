import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edvae import tensor as T
from edvae.tensor import DomainError, ShapeError, Tensor

from oracles import conv2d_direct, gradcheck

TRIALS = 20


def rand(gen, *shape, away_from_zero=False):
    x = gen.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
    return x


# matmul ------------------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_small():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient():
    gen = np.random.default_rng(0)
    for _ in range(TRIALS):
        assert gradcheck(T.matmul, [rand(gen, 4, 5), rand(gen, 5, 3)], rand(gen, 4, 3)) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# conv2d ------------------------------------------------------------------------------

def test_conv_pointwise_scaling():
    x = np.random.default_rng(1).standard_normal((2, 1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)), 1, 0)
    assert np.array_equal(out.data, 2 * x)


def test_conv_strided_extent():
    out = T.conv2d(Tensor(np.zeros((1, 3, 32, 32))), Tensor(np.zeros((4, 3, 4, 4))), 2, 1)
    assert out.shape == (1, 4, 16, 16)


@pytest.mark.parametrize("k,stride,pad,extent", [(3, 1, 1, 8), (7, 1, 3, 8), (1, 1, 0, 5), (4, 2, 1, 10),
                                                 (3, 2, 1, 9), (3, 1, 0, 6)])
def test_conv_matches_direct_loop(k, stride, pad, extent):
    gen = np.random.default_rng(k * 10 + stride)
    x, w = rand(gen, 2, 3, extent, extent), rand(gen, 4, 3, k, k)
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data, conv2d_direct(x, w, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_gradient():
    gen = np.random.default_rng(2)
    for _ in range(TRIALS):
        x, w = rand(gen, 2, 3, 8, 8), rand(gen, 4, 3, 3, 3)
        err = gradcheck(lambda a, b: T.conv2d(a, b, 1, 1), [x, w], rand(gen, 2, 4, 8, 8))
        assert err < 1e-5


@pytest.mark.parametrize("k,stride,pad", [(4, 2, 1), (1, 1, 0), (7, 1, 3), (3, 1, 0)])
def test_conv_gradient_other_geometries(k, stride, pad):
    gen = np.random.default_rng(3)
    x, w = rand(gen, 1, 2, 8, 8), rand(gen, 3, 2, k, k)
    ho = (8 + 2 * pad - k) // stride + 1
    err = gradcheck(lambda a, b: T.conv2d(a, b, stride, pad), [x, w], rand(gen, 1, 3, ho, ho))
    assert err < 1e-5


def test_conv_non_integral_extent():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), 2, 1)


# pooling and upsampling ----------------------------------------------------------------

def test_maxpool_single_window():
    assert T.maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0


def test_maxpool_constant_tie_break_first_cell():
    x = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
    with T.Tape() as tape:
        y = T.maxpool2(x)
        loss = T.sum(y)
    tape.backward(loss)
    assert np.all(y.data == 3.0)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(x.grad[0, 0], expected)


def test_maxpool_gradient():
    gen = np.random.default_rng(4)
    for _ in range(TRIALS):
        assert gradcheck(T.maxpool2, [rand(gen, 1, 1, 6, 6)], rand(gen, 1, 1, 3, 3)) < 1e-4


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor(np.zeros((1, 1, 5, 4))))


def test_upsample_single_cell():
    assert T.upsample_nearest2(Tensor([[[[5.0]]]])).data[0, 0].tolist() == [[5.0, 5.0], [5.0, 5.0]]


def test_upsample_after_maxpool_constant_identity():
    x = np.full((2, 3, 4, 4), -1.5)
    assert np.array_equal(T.upsample_nearest2(T.maxpool2(Tensor(x))).data, x)


def test_upsample_gradient():
    gen = np.random.default_rng(5)
    for _ in range(TRIALS):
        assert gradcheck(T.upsample_nearest2, [rand(gen, 1, 2, 3, 3)], rand(gen, 1, 2, 6, 6)) < 1e-4


# elementwise and reductions ---------------------------------------------------------------

def test_clamp_max_above_threshold():
    x = Tensor([25.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.clamp_max(x, 20.0)
    tape.backward(T.sum(y) if y.size > 1 else y, np.ones(1))
    assert y.data.tolist() == [20.0]
    assert x.grad.tolist() == [0.0]


def test_clamp_max_gradient_at_threshold_is_zero():
    x = Tensor([20.0, 19.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(T.clamp_max(x, 20.0))
    tape.backward(y)
    assert x.grad.tolist() == [0.0, 1.0]


def test_exp_zero():
    assert T.exp(Tensor(0.0)).data.item() == 1.0


def test_evidence_composite_gradient():
    err = gradcheck(lambda x: T.add(T.exp(T.clamp_max(x, 20.0)), 1.0), [np.array([3.0])])
    assert err < 1e-4


def test_relu_gradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(T.relu(x))
    tape.backward(y)
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-2.0]))


UNARY = {
    "exp": T.exp,
    "log": lambda a: T.log(a),
    "relu": T.relu,
    "neg": T.neg,
    "clamp_max": lambda a: T.clamp_max(a, 0.3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    gen = np.random.default_rng(6)
    for _ in range(TRIALS):
        x = rand(gen, 3, 4, away_from_zero=True)
        if name == "log":
            x = np.abs(x) + 0.1
        if name == "clamp_max":
            x = np.where(np.abs(x - 0.3) < 1e-2, 0.0, x)
        assert gradcheck(UNARY[name], [x], rand(gen, 3, 4)) < 1e-4


BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shape_b", [(3, 4), (4,), (3, 1)])
def test_binary_gradients_with_broadcast(name, shape_b):
    gen = np.random.default_rng(7)
    for _ in range(TRIALS):
        a, b = rand(gen, 3, 4), rand(gen, *shape_b)
        if name == "div":
            b = np.abs(b) + 0.5
        assert gradcheck(BINARY[name], [a, b], rand(gen, 3, 4)) < 1e-4


def test_sum_of_ones():
    assert T.sum(Tensor(np.ones((3, 4)))).data.item() == 12.0


def test_mean_over_axis():
    assert T.mean(Tensor([[2.0, 4.0]]), axis=1).data.tolist() == [3.0]


def test_mean_gradient_uniform():
    x = Tensor(np.zeros((2, 5)), requires_grad=True)
    with T.Tape() as tape:
        y = T.mean(x)
    tape.backward(y)
    assert np.all(x.grad == 0.1)


def test_reduction_axis_out_of_range():
    with pytest.raises((ValueError, IndexError)):
        T.sum(Tensor(np.zeros((2, 3))), axis=2)


@pytest.mark.parametrize("axis", [None, 0, 1, -1])
@pytest.mark.parametrize("op", ["sum", "mean"])
def test_reduction_gradients(axis, op):
    gen = np.random.default_rng(8)
    f = getattr(T, op)
    for _ in range(TRIALS):
        x = rand(gen, 3, 4)
        w = None if axis is None else rand(gen, *np.sum(x, axis=axis).shape)
        assert gradcheck(lambda a: f(a, axis=axis), [x], w) < 1e-4


def test_shape_op_gradients():
    gen = np.random.default_rng(9)
    for _ in range(TRIALS):
        x = rand(gen, 2, 3, 4)
        assert gradcheck(lambda a: T.reshape(a, (6, 4)), [x], rand(gen, 6, 4)) < 1e-4
        assert gradcheck(lambda a: T.permute(a, (2, 0, 1)), [x], rand(gen, 4, 2, 3)) < 1e-4


# softmax -----------------------------------------------------------------------------------

def test_softmax_symmetric():
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_no_overflow():
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(ValueError):
        T.softmax(Tensor([1.0, 2.0]), temperature=tau)


def test_softmax_gradient():
    gen = np.random.default_rng(10)
    for _ in range(TRIALS):
        tau = float(gen.uniform(0.2, 2.0))
        x = rand(gen, 3, 5)
        assert gradcheck(lambda a: T.softmax(a, axis=-1, temperature=tau), [x], rand(gen, 3, 5)) < 1e-4
        assert gradcheck(lambda a: T.log_softmax(a, axis=0), [x], rand(gen, 3, 5)) < 1e-4


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-2, 10.0))
def test_softmax_is_probability_vector(x, tau):
    y = T.softmax(Tensor(x), axis=-1, temperature=tau).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


# gather / straight-through ------------------------------------------------------------------

def test_take_rows_gradient_scatter_adds():
    gen = np.random.default_rng(11)
    m = rand(gen, 5, 3)
    idx = np.array([[0, 2], [2, 4]])
    assert gradcheck(lambda a: T.take_rows(a, idx), [m], rand(gen, 2, 2, 3)) < 1e-4


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        T.take_rows(Tensor(np.zeros((3, 2))), np.array([3]))


def test_straight_through_forward_value_and_identity_gradient():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    v = np.array([1.0, 0.0])
    g = np.array([0.7, -0.25])
    with T.Tape() as tape:
        y = T.straight_through(x, v)
    tape.backward(y, g)
    assert np.array_equal(y.data, v)
    assert np.array_equal(x.grad, g)


# tape --------------------------------------------------------------------------------------

def test_backward_populates_every_ancestor():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    with T.Tape() as tape:
        c = T.mul(a, b)
        d = T.sum(T.exp(c))
    tape.backward(d)
    assert a.grad is not None and b.grad is not None
    assert a.grad.shape == a.shape


def test_replaying_tape_is_bit_identical():
    gen = np.random.default_rng(12)
    x = Tensor(rand(gen, 2, 3, 8, 8), requires_grad=True)
    w = Tensor(rand(gen, 4, 3, 3, 3), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(T.relu(T.conv2d(x, w, 1, 1)))
    tape.backward(y)
    g1 = (x.grad.copy(), w.grad.copy())
    tape.backward(y)
    assert np.array_equal(g1[0], x.grad) and np.array_equal(g1[1], w.grad)


def test_clear_releases_nodes():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        T.exp(T.exp(x))
    assert len(tape) == 2
    tape.clear()
    assert len(tape) == 0


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_tape():
            T.exp(x)
    assert len(tape) == 0


# serialization -------------------------------------------------------------------------------

def test_edvt_round_trip_and_layout():
    x = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    blob = T.tensor_to_bytes(Tensor(x))
    assert blob[:4] == b"EDVT"
    assert int.from_bytes(blob[4:8], "little") == 2
    assert int.from_bytes(blob[8:12], "little") == 2 and int.from_bytes(blob[12:16], "little") == 3
    assert len(blob) == 16 + 6 * 8
    assert np.array_equal(T.tensor_from_bytes(blob).data, x)


def test_edvt_truncated_and_bad_magic():
    blob = T.tensor_to_bytes(Tensor(np.ones(4)))
    with pytest.raises(ValueError, match="truncated"):
        T.tensor_from_bytes(blob[:-1])
    with pytest.raises(ValueError, match="magic"):
        T.tensor_from_bytes(b"XXXX" + blob[4:])
