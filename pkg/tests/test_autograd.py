import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metaprompt.autograd import (NonFiniteError, Tape, Tensor, concat, finite_diff_grad, gather_rows,
                                 grad, record, softmax_cross_entropy)
from oracles import central_diff, rel_err


def scalar_fn(build):
    """Wrap ``build(Tensor) -> Tensor`` as a numpy -> float function for the oracle."""
    return lambda x: float(build(Tensor(x)).data)


def tape_grad(build, x, create_graph=False):
    tape = Tape()
    t = tape.watch(x)
    return grad(build(t), [t], create_graph=create_graph)[0].data


# --- record: forward values -------------------------------------------------

def test_matmul_forward_hand_value():
    out = record("matmul", [np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]])])
    assert out.data.tolist() == [[3.0]]


def test_add_zero_is_identity():
    x = np.array([0.25, -1.5, 3.0])
    assert np.array_equal(record("add", [x, np.zeros(3)]).data, x)


def test_uniform_cross_entropy_is_log_v():
    loss = softmax_cross_entropy(np.zeros((1, 8)), np.array([5]), np.ones(1))
    assert loss.item() == pytest.approx(math.log(8), abs=1e-15)


def test_unknown_op_and_shape_mismatch_raise():
    with pytest.raises(ValueError, match="unknown op"):
        record("conv", [np.ones(2)])
    with pytest.raises(ValueError, match="shape mismatch"):
        record("matmul", [np.ones((2, 3)), np.ones((2, 3))])
    with pytest.raises(ValueError, match="shape mismatch"):
        record("add", [np.ones(2), np.ones(3)])


# --- grad: spec examples ----------------------------------------------------

def test_square_derivative_at_three():
    assert tape_grad(lambda x: x * x, 3.0) == 6.0


def test_second_derivative_of_cube_at_two():
    tape = Tape()
    x = tape.watch(2.0)
    (g,) = grad(x * x * x, [x], create_graph=True)
    (h,) = grad(g, [x])
    assert h.item() == pytest.approx(12.0, abs=1e-12)


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (5, 4))
    w2 = rng.uniform(-1, 1, (6, 3))
    labels = rng.integers(0, 3, 5)

    def loss(w1):
        h = (Tensor(x) @ w1).tanh() @ Tensor(w2)
        return softmax_cross_entropy(h, labels, np.ones(5))

    w1 = rng.uniform(-1, 1, (4, 6))
    assert rel_err(tape_grad(loss, w1), central_diff(scalar_fn(loss), w1)) < 1e-6


def test_grad_errors():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        grad(x * 2.0, [x])
    other = Tape().watch(1.0)
    with pytest.raises(ValueError, match="detached"):
        grad((x * x).sum(), [other])
    with pytest.raises(ValueError, match="not on a tape"):
        grad(Tensor(1.0), [x])


def test_non_finite_values_abort():
    with pytest.raises(NonFiniteError):
        Tape().watch(np.array([1.0, np.inf]))
    tape = Tape()
    x = tape.watch(0.0)
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        grad(x.log(), [x])


def test_unused_input_gets_zero_gradient():
    tape = Tape()
    x, y = tape.watch(np.ones(2)), tape.watch(np.ones(3))
    gx, gy = grad((x * x).sum(), [x, y])
    assert np.array_equal(gy.data, np.zeros(3)) and np.array_equal(gx.data, 2 * np.ones(2))


# --- finite_diff_grad ---------------------------------------------------------

def test_finite_diff_of_square():
    assert finite_diff_grad(lambda x: x * x, 3.0, 1e-5).item() == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_of_constant_is_zero():
    g = finite_diff_grad(lambda x: Tensor(4.0), np.ones(3), 1e-5)
    assert np.array_equal(g.data, np.zeros(3))


def test_finite_diff_matches_hand_derivative_of_composite():
    # f(x) = tanh(x)^2 * exp(x/2); f' written out by hand
    x0 = 0.7
    f = lambda x: (x.tanh() * x.tanh()) * (x * 0.5).exp()  # noqa: E731
    t, e = math.tanh(x0), math.exp(x0 / 2)
    exact = 2 * t * (1 - t * t) * e + 0.5 * t * t * e
    assert finite_diff_grad(f, x0).item() == pytest.approx(exact, rel=1e-9)


def test_finite_diff_rejects_bad_epsilon_and_non_finite():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: x, 1.0, 0.0)
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        finite_diff_grad(lambda x: x.log(), 0.0, 1e-3)


# --- per-primitive gradient checks (property) -------------------------------

unit = st.floats(-1, 1, allow_nan=False, width=64)
mat34 = arrays(np.float64, (3, 4), elements=unit)
mat43 = arrays(np.float64, (4, 3), elements=unit)
ROWS = np.array([[0, 2], [2, 1]])
SHIFT = np.array([2.0, 0.0, 0.0, 0.0])  # keeps every row's RMS above 0.5

UNARY = {
    "tanh": lambda x: x.tanh().sum(),
    "exp": lambda x: x.exp().sum(),
    "log": lambda x: (x * x + 1.0).log().sum(),
    "relu": lambda x: (x + 0.05).relu().sum() * 1.0,
    "softmax": lambda x: (x.softmax(axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "rms_norm": lambda x: ((x + SHIFT).rms_norm() * Tensor(np.linspace(-1, 1, 12).reshape(3, 4))).sum(),
    "sum_axis": lambda x: (x.sum(axis=0) * Tensor(np.arange(4.0))).sum(),
    "mean_axis": lambda x: (x.mean(axis=1, keepdims=True) * x).sum(),
    "reshape": lambda x: (x.reshape(4, 3) * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
    "transpose": lambda x: (x.T @ x).sum(),
    "permute": lambda x: (x.reshape(3, 2, 2).permute(2, 0, 1) * Tensor(np.arange(12.0).reshape(2, 3, 2))).sum(),
    "slice": lambda x: (x[1:, ::2] * x[1:, ::2]).sum(),
    "concat": lambda x: (concat([x, x * x], axis=0) * 1.5).sum(),
    "gather_rows": lambda x: (gather_rows(x, ROWS) * gather_rows(x, ROWS)).sum(),
    "cross_entropy": lambda x: softmax_cross_entropy(x, np.array([0, 3, 1]), np.array([1.0, 0.5, 2.0])),
    "div": lambda x: (x / (x * x + 2.0)).sum(),
    "neg_sub": lambda x: (-(x - 0.3) * x).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=mat34)
def test_primitive_gradients_match_finite_differences(name, x):
    build = UNARY[name]
    if name == "relu":
        x = np.where(np.abs(x + 0.05) < 1e-3, 0.5, x)  # keep off the kink
    analytic = tape_grad(build, x)
    numeric = central_diff(scalar_fn(build), x)
    assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


@given(a=mat34, b=mat43)
def test_matmul_and_broadcast_gradients(a, b):
    bias = np.linspace(-1, 1, 3)

    def build_a(t):
        return ((t @ Tensor(b)) + Tensor(bias)).tanh().sum()

    def build_b(t):
        return ((Tensor(a) @ t) * Tensor(bias)).sum()

    def build_bias(t):
        return ((Tensor(a) @ Tensor(b)) + t).exp().sum()

    for build, x in ((build_a, a), (build_b, b), (build_bias, bias)):
        assert np.allclose(tape_grad(build, x), central_diff(scalar_fn(build), x), rtol=1e-5, atol=1e-7)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (2, 3, 4))
    b = rng.uniform(-1, 1, (2, 4, 5))
    w = rng.uniform(-1, 1, (4, 2))
    for build, x in (
        (lambda t: (t @ Tensor(b)).tanh().sum(), a),
        (lambda t: (Tensor(a) @ t).tanh().sum(), b),
        (lambda t: (Tensor(a) @ t).tanh().sum(), w),
    ):
        assert rel_err(tape_grad(build, x), central_diff(scalar_fn(build), x)) < 1e-6


# --- second order ------------------------------------------------------------

SECOND_ORDER = {
    "tanh_matmul": lambda x: (x @ Tensor(np.linspace(-1, 1, 12).reshape(4, 3))).tanh().sum(),
    "softmax_ce": lambda x: softmax_cross_entropy(x * x, np.array([1, 0, 2]), np.ones(3)),
    "rms_norm": lambda x: ((x + SHIFT).rms_norm() * x * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "exp_log": lambda x: ((x * x + 1.0).log() * x.exp()).sum(),
    "attention": lambda x: ((x @ x.T).softmax(axis=-1) @ x).tanh().sum(),
}


@pytest.mark.parametrize("name", sorted(SECOND_ORDER))
@given(x=mat34, v=mat34)
def test_grad_of_grad_matches_finite_differences_of_gradient(name, x, v):
    build = SECOND_ORDER[name]
    tape = Tape()
    t = tape.watch(x)
    (g,) = grad(build(t), [t], create_graph=True)
    (hvp,) = grad((g * Tensor(v)).sum(), [t])
    numeric = central_diff(lambda z: float(np.sum(tape_grad(build, z) * v)), x)
    assert np.allclose(hvp.data, numeric, rtol=1e-4, atol=1e-6)


def test_retain_flag_sets_create_graph_default():
    tape = Tape(retain_for_higher_order=True)
    x = tape.watch(2.0)
    (g,) = grad(x * x * x, [x])
    assert g.tape is tape
    assert grad(g, [x])[0].item() == pytest.approx(12.0)


# --- algebraic invariants ------------------------------------------------------

@given(x=mat34)
def test_gradient_is_linear_in_the_loss(x):
    f1 = UNARY["tanh"]
    f2 = UNARY["softmax"]
    tape = Tape()
    t = tape.watch(x)
    (joint,) = grad(f1(t) + f2(t), [t])
    separate = tape_grad(f1, x) + tape_grad(f2, x)
    assert np.allclose(joint.data, separate, rtol=0, atol=1e-12)


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        tape = Tape()
        x = tape.watch(rng.standard_normal((4, 4)))
        y = ((x @ x.T).softmax() @ x).rms_norm().tanh()
        return y.data, grad(y.sum(), [x])[0].data

    (a1, g1), (a2, g2) = run(), run()
    assert np.array_equal(a1, a2) and np.array_equal(g1, g2)


def test_tape_is_topologically_ordered():
    tape = Tape()
    x = tape.watch(np.ones(3))
    (x * 2.0 + x).exp().sum()
    position = {id(n.out): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for parent in node.inputs:
            assert position.get(id(parent), -1) < i
