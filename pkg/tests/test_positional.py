import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import rope_score_matrix
from riemannformer import geometry as G
from riemannformer import positional as P
from riemannformer import tensor as T
from riemannformer.tensor import Parameter

seeds = st.integers(0, 2**32 - 1)


def test_sinusoidal_frozen_values():
    table = P.sinusoidal_encoding(3, 4)
    np.testing.assert_allclose(table[0], [0, 1, 0, 1])
    np.testing.assert_allclose(table[1], [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)], atol=1e-15)
    with pytest.raises(ValueError):
        P.sinusoidal_encoding(3, 5)


def test_axial_positions_are_row_major():
    xs, ys = P.axial_positions_2d(2, 3)
    np.testing.assert_array_equal(xs, [0, 1, 2, 0, 1, 2])
    np.testing.assert_array_equal(ys, [0, 0, 0, 1, 1, 1])
    layout = P.Layout.image(2, 3)
    pp = layout.pair_positions(4)
    np.testing.assert_array_equal(pp[:, :2], np.repeat(xs[:, None], 2, 1))
    np.testing.assert_array_equal(pp[:, 2:], np.repeat(ys[:, None], 2, 1))
    with pytest.raises(ValueError, match="divisible by 4"):
        layout.pair_positions(3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 24), st.integers(1, 16), seeds)
def test_rope_rotate_matches_loop_oracle(length, half, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(2, length, 2 * half))
    freqs = rng.uniform(-1, 1, half)
    pos = np.arange(length)
    pp = np.repeat(pos[:, None], half, 1)
    got = P.rope_rotate(q, pp, freqs).data @ P.rope_rotate(k, pp, freqs).data.T
    np.testing.assert_allclose(got, rope_score_matrix(q, k, pos, freqs), atol=1e-12)


def _transform(kind, d, rng):
    metric = G.Metric("scalar", d, w=rng.uniform(-0.5, 0.5), mode="free")
    if kind == "general2d":
        metric = G.Metric("general2d", d, w=rng.uniform(-0.1, 0.1, (d // 2, 2)), mode="free",
                          theta=rng.uniform(-1, 1, d // 2))
        return G.TangentTransform(kind, metric)
    if kind == "dense":
        return G.TangentTransform(kind, metric, x_upper=rng.normal(size=d * (d - 1) // 2) * 0.3)
    return G.TangentTransform(kind, metric, theta=rng.uniform(-1, 1, d // 2))


@pytest.mark.parametrize("kind", ["rotation", "reflection", "mixed", "dense", "general2d"])
@settings(max_examples=15, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), seeds)
def test_alignment_equals_explicit_inverse_matrices(kind, length, quarter, seed):
    rng = np.random.default_rng(seed)
    t = _transform(kind, 4 * quarter, rng)
    x = rng.normal(size=(length, t.dim))
    pos = np.arange(length)
    got = P.apply_tangent_alignment(x, pos, t).data
    ref = np.stack([G.inverse_transform_matrix(t, m) @ x[m] for m in pos])
    np.testing.assert_allclose(got, ref, atol=1e-11)


def test_axial_alignment_splits_channels():
    rng = np.random.default_rng(3)
    tx, ty = _transform("rotation", 4, rng), _transform("rotation", 4, rng)
    x = rng.normal(size=(6, 8))
    out = P.apply_axial_2d(x, (2, 3), tx, ty).data
    xs, ys = P.axial_positions_2d(2, 3)
    for i in range(6):
        np.testing.assert_allclose(out[i, :4], G.inverse_transform_matrix(tx, xs[i]) @ x[i, :4], atol=1e-13)
        np.testing.assert_allclose(out[i, 4:], G.inverse_transform_matrix(ty, ys[i]) @ x[i, 4:], atol=1e-13)


def test_alignment_rejects_mismatched_inputs():
    t = _transform("rotation", 4, np.random.default_rng(0))
    with pytest.raises(ValueError, match="channels"):
        P.apply_tangent_alignment(np.zeros((3, 6)), np.arange(3), t)
    with pytest.raises(ValueError, match="position"):
        P.apply_tangent_alignment(np.zeros((3, 4)), np.arange(2), t)
    with pytest.raises(ValueError, match="side"):
        P.apply_tangent_alignment(np.zeros((3, 4)), np.arange(3), t, side="value")


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 6), seeds)
def test_matrix_exp_value_and_gradient(d, seed):
    rng = np.random.default_rng(seed)
    a = Parameter(rng.normal(size=(2, d, d)) * 0.7, "a")
    np.testing.assert_allclose(P.matrix_exp(a).data[1], scipy.linalg.expm(a.data[1]), rtol=1e-12, atol=1e-13)
    weights = rng.normal(size=(2, d, d))
    rep = T.grad_check(lambda: (P.matrix_exp(a) * weights).sum(), [a], tol=1e-7)
    assert rep.passed, str(rep)


def test_align_pairs_gradients_through_angles_and_scale():
    rng = np.random.default_rng(4)
    x = Parameter(rng.normal(size=(2, 5, 8)), "x")
    theta = Parameter(rng.uniform(-1, 1, (2, 4)), "theta")
    ls = Parameter(rng.uniform(-0.2, 0.0, 2), "w")
    pp = np.repeat(np.arange(5.0)[:, None], 4, 1)
    reflect = np.array([False, True, False, True])
    weights = rng.normal(size=(2, 5, 8))
    rep = T.grad_check(lambda: (P.align_pairs(x, pp, theta, reflect, ls, pp) * weights).sum(),
                       [x, theta, ls], tol=1e-7)
    assert rep.passed, str(rep)


def test_mechanism_names_round_trip():
    for name in ("nopos", "sinusoidal", "rope", "riemann", "riemann-reflection", "riemann-mixed",
                 "riemann-dense"):
        assert P.MechanismConfig.from_name(name).name == name
    assert P.MechanismConfig.from_name("riemann-rotation").name == "riemann"
    with pytest.raises(ValueError, match="unknown mechanism"):
        P.MechanismConfig.from_name("alibi")
    with pytest.raises(ValueError, match="unknown transform"):
        P.MechanismConfig.from_name("riemann-shear")


def test_head_positional_shape_checks():
    layout = P.Layout.image(2, 2)
    with pytest.raises(ValueError, match="divisible by 4"):
        P.HeadPositional(P.MechanismConfig(), 1, 6, layout)
    with pytest.raises(ValueError, match="even"):
        P.HeadPositional(P.MechanismConfig(kind="rope"), 1, 5, P.Layout.sequence(3))
