import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepgp import autodiff as ad
from deepgp.gradcheck import check_gradients
from oracles import central_difference, random_spd


def value_of(fn, *args):
    with ad.no_grad():
        return float(fn(*[ad.constant(a) for a in args]).value)


def test_forward_examples():
    root, _ = ad.forward(lambda p: p["x"] * p["x"], {"x": 3.0})
    assert float(root) == 9.0
    root, _ = ad.forward(lambda p: ad.trace(p["A"]), {"A": np.eye(3)})
    assert float(root) == 3.0
    root, _ = ad.forward(lambda p: ad.sum(ad.cholesky(p["A"])), {"A": [[4.0, 2.0], [2.0, 3.0]]})
    L = np.array([[2.0, 0.0], [1.0, math.sqrt(2.0)]])
    np.testing.assert_allclose(L @ L.T, [[4, 2], [2, 3]])
    assert float(root) == pytest.approx(3.0 + math.sqrt(2.0), abs=1e-12)


def test_backward_examples():
    _, g = ad.grad(lambda p: p["x"] * p["x"], {"x": 3.0})
    assert g["x"] == pytest.approx(6.0)
    _, g = ad.grad(lambda p: ad.log(p["x"]), {"x": 2.0})
    assert g["x"] == pytest.approx(0.5)


def test_logdet_gradient_matches_inverse_transpose_and_symmetric_differences():
    rng = np.random.default_rng(0)
    A = random_spd(rng, 4)

    def logdet(p):
        return 2.0 * ad.sum(ad.log(ad.diag_part(ad.cholesky(p["A"]))))

    _, g = ad.grad(logdet, {"A": A})
    np.testing.assert_allclose(g["A"], np.linalg.inv(A).T, rtol=1e-9)

    # Symmetric perturbation oracle: d/dt f(A + t(E_ij + E_ji)) = G_ij + G_ji.
    h = 1e-6
    for i in range(4):
        for j in range(i + 1):
            E = np.zeros((4, 4))
            E[i, j] = E[j, i] = 1.0
            fd = (value_of(lambda a: logdet({"A": a}), A + h * E) - value_of(lambda a: logdet({"A": a}), A - h * E)) / (2 * h)
            expected = g["A"][i, j] * (1 if i == j else 2)
            assert fd == pytest.approx(expected, rel=1e-6)


def _fd_check(fn, inputs, rtol=1e-6, atol=1e-9):
    """Reverse-mode vs central differences for each input of ``fn``."""
    names = [f"x{i}" for i in range(len(inputs))]

    def wrapped(p):
        return fn(*[p[n] for n in names])

    _, grads = ad.grad(wrapped, dict(zip(names, inputs)))
    for k, name in enumerate(names):
        def scalar(x, k=k):
            args = list(inputs)
            args[k] = x
            return value_of(fn, *args)

        np.testing.assert_allclose(grads[name], central_difference(scalar, inputs[k]), rtol=rtol, atol=atol)


RNG = np.random.default_rng(42)
M = RNG.uniform(0.5, 2.0, (3, 4))
M2 = RNG.uniform(0.5, 2.0, (3, 4))
V = RNG.uniform(0.5, 2.0, 4)
SQ = RNG.uniform(0.5, 2.0, (4, 4))
W = RNG.standard_normal((3, 4))
WSQ = RNG.standard_normal((4, 4))

PRIMITIVES = {
    "add": (lambda a, b: ad.sum(W * (a + b)), [M, M2]),
    "add_vector": (lambda a, b: ad.sum(W * (a + b)), [M, V]),
    "add_scalar": (lambda a, b: ad.sum(W * (a + b)), [M, np.asarray(1.3)]),
    "sub": (lambda a, b: ad.sum(W * (a - b)), [M, M2]),
    "sub_vector": (lambda a, b: ad.sum(W * (b - a)), [V, M]),
    "mul": (lambda a, b: ad.sum(W * (a * b)), [M, M2]),
    "mul_vector": (lambda a, b: ad.sum(W * (a * b)), [M, V]),
    "div": (lambda a, b: ad.sum(W * (a / b)), [M, M2]),
    "div_scalar": (lambda a, b: ad.sum(W * (a / b)), [M, np.asarray(1.7)]),
    "neg": (lambda a: ad.sum(W * -a), [M]),
    "exp": (lambda a: ad.sum(W * ad.exp(a)), [M]),
    "log": (lambda a: ad.sum(W * ad.log(a)), [M]),
    "square": (lambda a: ad.sum(W * ad.square(a)), [M]),
    "sqrt": (lambda a: ad.sum(W * ad.sqrt(a)), [M]),
    "tanh": (lambda a: ad.sum(W * ad.tanh(a)), [M]),
    "clamp_min": (lambda a: ad.sum(W * ad.clamp_min(a, 1.0)), [M]),
    "matmul": (lambda a, b: ad.sum(W * (a @ b)), [M, SQ]),
    "transpose": (lambda a: ad.sum(W.T * ad.transpose(a)), [M]),
    "sum_all": (lambda a: ad.square(ad.sum(a)), [M]),
    "sum_axis0": (lambda a: ad.sum(V * ad.sum(a, axis=0)), [M]),
    "sum_axis1": (lambda a: ad.sum(ad.square(ad.sum(a, axis=1))), [M]),
    "mean": (lambda a: ad.square(ad.mean(a)) + ad.sum(V * ad.mean(a, axis=0)), [M]),
    "reshape": (lambda a: ad.sum(W * ad.reshape(a, (3, 4))), [SQ[:3].reshape(12)]),
    "slice": (lambda a: ad.sum(W[:, 1:3] * ad.slice_axis(a, 1, 3, axis=1)), [M]),
    "concat": (lambda a, b: ad.sum(ad.concat([a, b], axis=0) * np.vstack([W, W])), [M, M2]),
    "diag_part": (lambda a: ad.sum(V * ad.diag_part(a)), [SQ]),
    "trace": (lambda a: ad.square(ad.trace(a)), [SQ]),
    "solve_lower": (lambda a, b: ad.sum(W.T * ad.solve_triangular(a, b, lower=True)), [np.tril(SQ) + 2 * np.eye(4), M.T]),
    "solve_upper": (lambda a, b: ad.sum(W.T * ad.solve_triangular(a, b, lower=False)), [np.triu(SQ) + 2 * np.eye(4), M.T]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, inputs = PRIMITIVES[name]
    _fd_check(fn, inputs)


def test_cholesky_gradient_matches_symmetric_finite_differences():
    A = random_spd(np.random.default_rng(3), 4)

    def f(a):
        return ad.sum(WSQ * ad.cholesky(a))

    _, g = ad.grad(lambda p: f(p["A"]), {"A": A})
    np.testing.assert_allclose(g["A"], g["A"].T, atol=1e-14)
    h = 1e-6
    for i in range(4):
        for j in range(i + 1):
            E = np.zeros((4, 4))
            E[i, j] = E[j, i] = 1.0
            fd = (value_of(f, A + h * E) - value_of(f, A - h * E)) / (2 * h)
            expected = g["A"][i, j] * (1 if i == j else 2)
            assert fd == pytest.approx(expected, rel=1e-6, abs=1e-9)


def test_triangular_solve_ignores_and_does_not_differentiate_the_other_triangle():
    A = np.tril(SQ) + 2 * np.eye(4)
    _, g = ad.grad(lambda p: ad.sum(ad.solve_triangular(p["A"], M.T)), {"A": A + np.triu(np.ones((4, 4)), 1)})
    assert np.all(np.triu(g["A"], 1) == 0)


def test_backward_is_linear():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.5, 2.0, (3, 3))

    def f(p):
        return ad.sum(ad.exp(p["x"]) * W[:, :3])

    def g(p):
        return ad.trace(ad.cholesky(p["x"] @ ad.transpose(p["x"]) + np.eye(3)))

    _, gf = ad.grad(f, {"x": x})
    _, gg = ad.grad(g, {"x": x})
    _, gs = ad.grad(lambda p: f(p) + g(p), {"x": x})
    np.testing.assert_allclose(gs["x"], gf["x"] + gg["x"], rtol=0, atol=1e-12)


def test_forward_is_bit_reproducible():
    A = random_spd(np.random.default_rng(1), 5)

    def f(p):
        L = ad.cholesky(p["A"])
        return ad.sum(ad.solve_triangular(L, p["A"]) @ ad.transpose(L))

    first = ad.grad(f, {"A": A})
    second = ad.grad(f, {"A": A})
    assert first[0] == second[0]
    assert np.array_equal(first[1]["A"], second[1]["A"])


def test_gradient_accumulates_over_shared_subexpressions():
    _, g = ad.grad(lambda p: p["x"] * p["x"] * p["x"] + p["x"], {"x": 2.0})
    assert g["x"] == pytest.approx(13.0)


def test_unused_leaf_gets_zero_gradient():
    _, g = ad.grad(lambda p: p["x"] * 2.0, {"x": 1.0, "y": np.ones(3)})
    assert np.array_equal(g["y"], np.zeros(3))


def test_errors():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.NonFiniteError) as info:
        ad.log(np.array([-1.0]))
    assert info.value.op == "log" and isinstance(info.value.node_id, int)
    with pytest.raises(ad.NonFiniteError):
        ad.div(1.0, 0.0)
    with pytest.raises(ad.NotPositiveDefiniteError):
        ad.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    root, leaves = ad.forward(lambda p: p["x"] * 2.0, {"x": np.ones(3)})
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(root, leaves)


def test_no_grad_records_nothing():
    x = ad.variable(np.ones(3), "x")
    with ad.no_grad():
        y = ad.exp(x)
    assert y.parents == ()


def test_check_gradients_examples():
    report = check_gradients(lambda p: ad.sum(ad.square(p["x"])), {"x": np.array([1.0])}, step=1e-6)
    assert report.passed and report.params[0].max_abs_err / 2.0 < 1e-6

    report = check_gradients(lambda p: ad.sum(p["x"] * 0.0) + 4.2, {"x": np.arange(3.0)})
    assert report.passed and report.max_abs_err < 1e-9


def test_check_gradients_reports_a_wrong_gradient():
    def broken(p):
        # Detaching the input keeps the value but drops the gradient.
        return ad.sum(ad.square(ad.constant(p["x"].value)))

    report = check_gradients(broken, {"x": np.array([1.0, 2.0])})
    assert not report.passed
    assert report.params[0].failures == 2
    assert "FAILED" in report.summary()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(0.5, 2.0)))
def test_exp_log_roundtrip_gradient_is_identity(x):
    _, g = ad.grad(lambda p: ad.sum(ad.log(ad.exp(p["x"]))), {"x": x})
    np.testing.assert_allclose(g["x"], np.ones_like(x), rtol=1e-12)
