import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grayvfm import autodiff as ad
from grayvfm import nn
from grayvfm.autodiff import StructuralError


def test_parameter_count_and_shapes():
    net = nn.init([3, 20, 20, 1], seed=5)
    assert net.n_params == 4 * 20 + 21 * 20 + 21 * 1 == 521
    assert sum(v.size for v in net.values().values()) == 521
    dd = nn.init([7, 70, 70, 1], seed=5)
    assert [W.shape for W in dd.weights] == [(70, 7), (70, 70), (1, 70)]


def test_init_is_seeded():
    a, b = nn.init([3, 5, 1], seed=11), nn.init([3, 5, 1], seed=11)
    for k in a.values():
        assert np.array_equal(a.values()[k], b.values()[k])
    assert not np.array_equal(a.weights[0], nn.init([3, 5, 1], seed=12).weights[0])


def test_zero_weights_give_bias():
    net = nn.init([2, 4, 3], seed=0)
    net.assign({"W0": np.zeros((4, 2)), "b0": np.ones(4), "W1": np.zeros((3, 4)), "b1": np.array([1.0, -2.0, 3.0])})
    np.testing.assert_array_equal(nn.forward(net, np.array([5.0, -7.0])).value, [1.0, -2.0, 3.0])


def test_single_layer_identity():
    net = nn.MLP([1, 1], [np.array([[1.0]])], [np.array([0.0])])
    assert nn.forward(net, np.array([4.5])).value[0] == 4.5


def test_hand_built_two_layer():
    net = nn.MLP([1, 2, 1], [np.array([[1.0], [-1.0]]), np.array([[1.0, 1.0]])], [np.zeros(2), np.zeros(1)])
    assert nn.forward(net, np.array([2.0])).value[0] == 2.0


def test_dimension_mismatch():
    net = nn.init([3, 4, 1], seed=0)
    with pytest.raises(StructuralError):
        nn.forward(net, np.ones(2))
    with pytest.raises(StructuralError):
        nn.MLP([3, 4, 1], [np.ones((4, 3))], [np.ones(4)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_piecewise_linear_within_region(seed, lam):
    rng = np.random.default_rng(seed)
    net = nn.init([3, 8, 8, 1], seed=seed)
    x = rng.normal(size=3)
    x2 = x + 1e-7 * rng.normal(size=3)
    t1 = ad.Tape()
    nn.forward(net, x, tape=t1)
    t2 = ad.Tape()
    nn.forward(net, x2, tape=t2)
    if t1.branch_signature() != t2.branch_signature():
        return  # straddles a kink; the property only holds inside one region
    mix = lam * x + (1 - lam) * x2
    f = lambda v: nn.forward(net, v).value[0]
    assert f(mix) == pytest.approx(lam * f(x) + (1 - lam) * f(x2), rel=1e-9, abs=1e-12)


@given(st.lists(st.floats(-50.0, 50.0), min_size=3, max_size=3))
def test_softplus_output_positive(x):
    # inputs are standardized, so |x| <= 50 is far outside any real use
    net = nn.init([3, 6, 1], seed=1, output="softplus")
    assert nn.forward(net, np.array(x)).value[0] > 0.0


def test_weight_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    net = nn.init([3, 6, 5, 1], seed=2)
    for b in net.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    X = rng.normal(size=(12, 3))
    y = rng.normal(size=12)

    def f(tape, p):
        return ad.mean(ad.square(ad.reshape(nn.forward(net, X, p), (12,)) - y))

    res = ad.grad_check(f, net.values())
    assert res.n_checked > 0.9 * net.n_params
    assert res.max_rel_error < 1e-5


def test_scaler_uses_fit_statistics_only():
    X = np.array([[1.0, 10.0], [3.0, 10.0]])
    s = nn.InputScaler.fit(X)
    np.testing.assert_array_equal(s.transform(X), [[-1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(s.transform(np.array([[5.0, 12.0]])), [[3.0, 2.0]])
    back = nn.InputScaler.from_dict(s.to_dict())
    assert np.array_equal(back.shift, s.shift) and np.array_equal(back.scale, s.scale)


def test_round_trip_dict():
    net = nn.init([3, 4, 1], seed=9, output="softplus", out_scale=100.0)
    back = nn.MLP.from_dict(net.to_dict())
    x = np.array([0.3, -0.2, 1.1])
    assert nn.forward(back, x).value[0] == nn.forward(net, x).value[0]
