import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riemannformer import tensor as T
from riemannformer.tensor import Parameter, ShapeError, Tensor


def check(f, *params, tol=1e-6):
    rep = T.grad_check(f, list(params), tol=tol)
    assert rep.passed, str(rep)
    return rep


def rand(shape, seed=0, lo=-1.0, hi=1.0, name="p"):
    rng = np.random.default_rng(seed)
    return Parameter(rng.uniform(lo, hi, shape), name)


def test_frozen_softmax_values():
    out = T.softmax_lastdim(Tensor([0.0, math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)


def test_frozen_power_value():
    assert T.power(Tensor(0.81), -1).item() == pytest.approx(1 / 0.81, abs=1e-15)
    p = Parameter(0.81, "x")
    T.backward(T.power(p, -1))
    assert p.grad == pytest.approx(-1 / 0.81 ** 2, rel=1e-14)


def test_power_domain_error():
    with pytest.raises(ValueError, match="negative base"):
        T.power(Tensor([-1.0, 2.0]), 0.5)


def test_log_domain_error():
    with pytest.raises(ValueError):
        T.log(Tensor([0.0]))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_backward_needs_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(rand((3,)) * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_caught_at_the_op():
    with pytest.raises(FloatingPointError, match="exp"):
        T.exp(Tensor([1000.0]))


UNARY = {
    "exp": T.exp, "sin": T.sin, "cos": T.cos, "tanh": T.tanh, "softplus": T.softplus,
    "gelu": T.gelu, "neg": T.neg, "square": lambda x: x * x,
    "log": lambda x: T.log(x * x + 0.5), "sqrt": lambda x: T.sqrt(x * x + 0.5),
    "pow": lambda x: T.power(x * x + 0.5, -1.5), "div": lambda x: 1.0 / (x * x + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    p = rand((3, 4), seed=1)
    check(lambda: (UNARY[name](p) * np.arange(12.0).reshape(3, 4)).sum(), p)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_broadcast_gradients(b, n, m, seed):
    a = rand((b, n, 3), seed, name="a")
    w = rand((3, m), seed + 1, name="w")
    check(lambda: T.tanh(a @ w).sum(), a, w)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one_and_gradients(n, m, seed):
    p = rand((n, m), seed, -5, 5)
    out = T.softmax_lastdim(p).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-14)
    weights = np.random.default_rng(seed).normal(size=(n, m))
    check(lambda: (T.softmax_lastdim(p) * weights).sum(), p)


def test_layer_norm_matches_formula_and_gradients():
    x = rand((2, 3, 5), 3, name="x")
    g = rand((5,), 4, 0.5, 1.5, name="g")
    b = rand((5,), 5, name="b")
    out = T.layer_norm(x, g, b).data
    xd = x.data
    ref = (xd - xd.mean(-1, keepdims=True)) / np.sqrt(xd.var(-1, keepdims=True) + 1e-5) * g.data + b.data
    np.testing.assert_allclose(out, ref, atol=1e-13)
    weights = np.random.default_rng(0).normal(size=out.shape)
    check(lambda: (T.layer_norm(x, g, b) * weights).sum(), x, g, b)


def test_cross_entropy_value_and_gradient():
    logits = rand((4, 3), 6, name="z")
    labels = np.array([0, 2, 1, 2])
    z = logits.data
    ref = -np.mean([z[i, labels[i]] - np.log(np.exp(z[i]).sum()) for i in range(4)])
    assert T.cross_entropy(logits, labels).item() == pytest.approx(ref, abs=1e-14)
    check(lambda: T.cross_entropy(logits, labels), logits)


def test_structural_ops_gradients():
    p = rand((2, 3, 4), 7)
    weights = np.random.default_rng(1).normal(size=(4, 3))
    check(lambda: (T.transpose(p, (2, 1, 0))[:, :, 0] * weights).sum(), p)
    check(lambda: T.reshape(p, (6, 4)).mean(axis=0).sum() * 3.0, p)
    check(lambda: (T.concatenate([p, p * 2.0], axis=1) ** 2).sum(), p)
    check(lambda: (T.stack([p, T.sin(p)], axis=-1) ** 2).sum(), p)
    check(lambda: (p[..., [0, 0, 3]] ** 2).sum(), p)
    check(lambda: (p[:, 1:, ::2] * 1.5).sum(axis=(0, 2), keepdims=True).sum(), p)


def test_shared_subexpressions_accumulate():
    p = Parameter(1.7, "x")
    y = T.sin(p)
    T.backward(y * y + y)
    assert p.grad == pytest.approx(2 * math.sin(1.7) * math.cos(1.7) + math.cos(1.7), rel=1e-14)


def test_gradients_accumulate_across_backward_calls():
    p = Parameter([1.0, 2.0], "x")
    T.backward((p * p).sum())
    T.backward((p * p).sum())
    np.testing.assert_allclose(p.grad, [4.0, 8.0])
    p.zero_grad()
    assert not p.grad.any()


def test_corrupted_backward_is_detected(monkeypatch):
    def bad_exp(a):
        a = T.as_tensor(a)
        out = np.exp(a.data)
        return T._make(out, (a,), "exp", lambda g: (1.01 * g * out,))

    monkeypatch.setattr(T, "exp", bad_exp)
    p = rand((3,), 8)
    rep = T.grad_check(lambda: T.exp(p).sum(), [p])
    assert not rep.passed
    assert rep.max_rel_error > 1e-3
    assert "p[" in str(rep)


def test_assign_checks_shape():
    p = Parameter(np.zeros(3), "x")
    with pytest.raises(ShapeError, match="x"):
        p.assign(np.zeros(4))
