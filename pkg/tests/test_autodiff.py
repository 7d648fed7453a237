import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grayvfm import autodiff as ad
from grayvfm.autodiff import DomainError, StructuralError, Tape

finite = st.floats(-50.0, 50.0, allow_nan=False)
positive = st.floats(0.01, 100.0)


def grad1(fn, x0):
    t = Tape()
    x = t.param(np.float64(x0), "x")
    out = fn(x)
    return float(out.value), float(ad.backward(out)[x])


def test_forward_examples():
    t = Tape()
    assert ad.add(t.const(2.0), t.const(3.0)).item() == 5.0
    assert ad.relu(t.const(-3.0)).item() == 0.0
    assert ad.relu(t.const(3.0)).item() == 3.0
    v, g = grad1(ad.sqrt, 4.0)
    assert (v, g) == (2.0, 0.25)


def test_product_rule_and_fanout():
    t = Tape()
    x, y = t.param(2.0, "x"), t.param(3.0, "y")
    g = ad.backward(x * y)
    assert (float(g[x]), float(g[y])) == (3.0, 2.0)
    t = Tape()
    x = t.param(1.0, "x")
    assert float(ad.backward(ad.square(x + x))[x]) == 8.0


def test_backward_rejects_vector_output():
    t = Tape()
    x = t.param(np.ones(3))
    with pytest.raises(StructuralError):
        ad.backward(x * 2.0)


def test_shape_mismatch_is_structural():
    t = Tape()
    with pytest.raises(StructuralError):
        ad.add(t.param(np.ones(3)), t.param(np.ones(4)))


def test_domain_errors_carry_op_and_operands():
    t = Tape()
    with pytest.raises(DomainError) as e:
        ad.sqrt(t.const(-1.0))
    assert e.value.op_tag == "sqrt" and e.value.operands
    with pytest.raises(DomainError) as e:
        ad.div(t.const(1.0), t.const(0.0))
    assert e.value.op_tag == "div"


def test_sqrt_derivative_at_zero_is_zero():
    assert grad1(ad.sqrt, 0.0) == (0.0, 0.0)


def test_min_tie_goes_to_first_argument():
    t = Tape()
    a, b = t.param(2.0, "a"), t.param(2.0, "b")
    g = ad.backward(ad.minimum(a, b))
    assert (float(g[a]), float(g[b])) == (1.0, 0.0)
    assert t.ties == 1


def test_mean_distributes_one_over_n():
    t = Tape()
    x = t.param(np.arange(5.0))
    np.testing.assert_array_equal(ad.backward(ad.mean(x))[x], np.full(5, 0.2))


def test_adjoint_shape_matches_value():
    t = Tape()
    W, b = t.param(np.ones((4, 3))), t.param(np.zeros(4))
    x = np.arange(6.0).reshape(2, 3)
    out = ad.total(ad.relu(ad.affine(W, x, b)))
    g = ad.backward(out)
    assert g[W].shape == (4, 3) and g[b].shape == (4,)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# (op, analytic derivative, positive-only domain)
ELEMENTARY = [
    (ad.square, lambda x: 2 * x, False),
    (ad.sqrt, lambda x: 0.5 / np.sqrt(x), True),
    (ad.softplus, _sigmoid, False),
    (ad.neg, lambda x: -1.0, False),
    (lambda n: 3.0 / n, lambda x: -3.0 / x**2, True),
    (lambda n: n * n * n - n, lambda x: 3 * x**2 - 1, False),
]


@pytest.mark.parametrize("op, deriv, pos_only", ELEMENTARY)
def test_elementary_derivatives_vs_analytic(op, deriv, pos_only):
    rng = np.random.default_rng(0)
    xs = rng.uniform(0.05, 20.0, 1000)
    if not pos_only:
        xs *= rng.choice([-1, 1], 1000)
    t = Tape()
    x = t.param(xs)
    g = ad.backward(ad.total(op(x)))[x]
    want = np.broadcast_to(deriv(xs), xs.shape)
    np.testing.assert_allclose(g, want, rtol=1e-10, atol=0)


def test_relu_derivative_away_from_kink():
    rng = np.random.default_rng(1)
    xs = rng.uniform(0.01, 5, 1000) * rng.choice([-1, 1], 1000)
    t = Tape()
    x = t.param(xs)
    np.testing.assert_array_equal(ad.backward(ad.total(ad.relu(x)))[x], (xs > 0).astype(float))


def test_interp_slope_and_clamp():
    kx, ky = np.array([0.0, 0.5, 1.0]), np.array([0.0, 40.0, 100.0])
    t = Tape()
    x = t.param(np.array([0.25, 0.75, 1.5, -0.2]))
    out = ad.interp(x, kx, ky)
    np.testing.assert_allclose(out.value, [20.0, 70.0, 100.0, 0.0])
    np.testing.assert_allclose(ad.backward(ad.total(out))[x], [80.0, 120.0, 0.0, 0.0])


def test_grad_check_quadratic():
    res = ad.grad_check(lambda t, p: ad.square(p["x"]), {"x": 3.0})
    assert res.max_rel_error < 1e-9 and res.n_checked == 1


def test_grad_check_flags_min_tie():
    res = ad.grad_check(lambda t, p: ad.minimum(p["x"], p["y"]), {"x": 1.0, "y": 1.0})
    assert res.nondifferentiable


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    t = Tape(seed=3)
    W, b = t.param(rng.normal(size=(5, 2))), t.param(rng.normal(size=5))
    out = ad.total(ad.softplus(ad.relu(ad.affine(W, rng.normal(size=(7, 2)), b))))
    before = [n.value.copy() for n in t.nodes]
    for old, new in zip(before, t.replay()):
        assert np.array_equal(old, new)
    g1 = ad.backward(out)[W].copy()
    assert np.array_equal(g1, ad.backward(out)[W])


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(positive, min_size=3, max_size=3))
def test_composite_graph_matches_finite_differences(xs, ys):
    """Without ties in min/max, backward agrees with central differences."""
    theta = {"x": np.array(xs), "y": np.array(ys)}

    def f(t, p):
        u = ad.softplus(p["x"]) * ad.sqrt(p["y"]) + ad.maximum(p["x"], p["y"] * 0.5)
        return ad.total(ad.square(u) / (p["y"] + 1.0))

    res = ad.grad_check(f, theta)
    assert res.max_rel_error < 1e-5
