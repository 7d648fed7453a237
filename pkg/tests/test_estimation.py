import math

import numpy as np
import pytest

from grayvfm import autodiff as ad
from grayvfm import estimation as E
from grayvfm.autodiff import StructuralError, Tape
from grayvfm.data import SampleTable
from grayvfm.models import ParameterSet, Prior, build_model
from grayvfm.physics import CvCurve

CURVE = CvCurve([0.0, 0.2, 0.4, 0.6, 0.8, 1.0], [0.0, 14.0, 33.0, 55.0, 78.0, 100.0])


class LinearToy:
    """y = theta * x with a Gaussian prior on theta."""

    kind = "toy"

    def __init__(self, mu, sigma):
        self.params = ParameterSet({"theta": mu}, {"theta": Prior(mu, sigma)})

    def inputs(self, table):
        return {"x": np.asarray(table["x"])}

    def forward(self, nodes, inputs):
        return nodes["theta"] * inputs["x"]


def toy_data(n, theta, noise, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 2.0, n)
    return SampleTable({"x": x, "q_o": theta * x + noise * rng.standard_normal(n)})


def posterior_mode(table, lam, mu):
    x, y = table["x"], table["q_o"]
    return (np.dot(x, y) + lam * mu) / (np.dot(x, x) + lam)


def test_compute_lambda_examples():
    assert E.compute_lambda(3.0, 3.0) == 1.0
    assert E.compute_lambda(25.0, 50.0) == 0.25
    assert E.compute_lambda(10.0, math.sqrt(10.0)) == pytest.approx(10.0, rel=1e-15)
    with pytest.raises(ValueError):
        E.compute_lambda(0.0, 1.0)


def _scalar_obj(pred, y, theta, lam, mu):
    t = Tape()
    p = t.param(np.float64(theta), "t")
    return E.objective(t.const(np.asarray(pred, dtype=float)), y, {"t": p}, {"t": lam}, {"t": mu})


def test_objective_examples():
    assert _scalar_obj([1.0, 2.0], [1.0, 2.0], 5.0, 3.0, 5.0).item() == 0.0
    assert _scalar_obj([1.0], [0.0], 2.0, 0.5, 0.0).item() == 3.0
    assert _scalar_obj([1.0, 3.0], [0.0, 0.0], 7.0, 0.0, 0.0).item() == 5.0
    with pytest.raises(StructuralError):
        _scalar_obj([], [], 0.0, 0.0, 0.0)


def test_sgd_examples():
    assert E.sgd_step(1.0, 2.0, 0.1) == pytest.approx(0.8)
    assert E.sgd_step(1.0, 0.0, 0.1) == 1.0
    theta = 1.0
    trace = []
    for _ in range(2):
        theta = E.sgd_step(theta, 2 * theta, 0.1)
        trace.append(float(theta))
    assert trace == pytest.approx([0.8, 0.64], abs=1e-15)


def _adam_reference(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for k in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
        out.append(theta)
    return out


def test_adam_matches_reference_trace():
    state, theta = E.OptimizerState(), {"t": np.array(1.0)}
    got = []
    for _ in range(3):
        state, theta = E.adam_step(state, theta, {"t": 2.0 * theta["t"]}, 0.1)
        got.append(float(theta["t"]))
    np.testing.assert_allclose(got, _adam_reference(1.0, 3, 0.1), rtol=0, atol=1e-12)


def test_adam_first_step_and_zero_gradient():
    for g in (3.7, -0.002):
        _, th = E.adam_step(E.OptimizerState(), {"t": np.array(1.0)}, {"t": np.array(g)}, 0.1)
        assert float(th["t"]) == pytest.approx(1.0 - 0.1 * np.sign(g), abs=1e-6)
    state, th = E.OptimizerState(), {"t": np.array(1.0)}
    for _ in range(5):
        state, th = E.adam_step(state, th, {"t": np.array(0.0)}, 0.1)
    assert float(th["t"]) == 1.0


def test_table2_defaults():
    m, h, dd = (E.TrainConfig.for_kind(k) for k in ("m", "h", "dd"))
    assert (m.epochs, m.batch_size, m.lr, m.sigma_eps) == (5000, 150, 0.01, 25.0)
    assert (h.epochs, h.batch_size, h.sigma_eps, h.lambda_nn, h.width, h.depth) == (2000, 32, 10.0, 0.01, 20, 2)
    assert (dd.epochs, dd.batch_size, dd.lambda_nn, dd.width, dd.depth) == (2000, 150, 0.001, 70, 2)
    with pytest.raises(ValueError):
        E.TrainConfig(batch_size=0)


def test_map_toy_converges_to_closed_form():
    fit, val = toy_data(40, 2.0, 0.3, 0), toy_data(10, 2.0, 0.3, 1)
    toy = LinearToy(1.5, 0.2)
    cfg = E.TrainConfig(epochs=3000, batch_size=40, lr=0.01, sigma_eps=0.3)
    toy, _ = E.train(toy, fit, val, cfg)
    lam = E.compute_lambda(0.3, 0.2)
    assert abs(toy.params.physical["theta"] - posterior_mode(fit, lam, 1.5)) < 1e-4


def test_huge_lambda_pins_parameter_to_prior_mean():
    fit, val = toy_data(30, 2.0, 0.1, 2), toy_data(5, 2.0, 0.1, 3)
    toy = LinearToy(1.0, 1.0)
    # sigma_eps / sigma = sqrt(1e9)
    cfg = E.TrainConfig(epochs=300, batch_size=30, lr=0.01, sigma_eps=math.sqrt(1e9))
    toy, _ = E.train(toy, fit, val, cfg)
    assert abs(toy.params.physical["theta"] - 1.0) < 1e-3


def test_full_batch_sgd_loss_non_increasing():
    fit, val = toy_data(25, -1.0, 0.2, 4), toy_data(5, -1.0, 0.2, 5)
    toy = LinearToy(0.5, 1.0)
    _, hist = E.train(toy, fit, val, E.TrainConfig(epochs=60, batch_size=25, lr=0.05, sigma_eps=0.2, optimizer="sgd"))
    # each epoch's loss is measured before its step, so it must fall monotonically
    assert all(b <= a + 1e-15 for a, b in zip(hist.train_loss, hist.train_loss[1:]))


def test_zero_epochs_leaves_parameters(small_well):
    _, ds, _ = small_well
    fit, val = ds.table("fit"), ds.table("val")
    for kind in ("m", "h", "dd"):
        mdl = build_model(kind, fit, cv_curve=CURVE, seed=4, width=6)
        before = {k: np.array(v) for k, v in mdl.params.values().items()}
        E.train(mdl, fit, val, E.TrainConfig.for_kind(kind, epochs=0))
        for k, v in mdl.params.values().items():
            assert np.array_equal(v, before[k])


def test_seeded_training_is_reproducible(small_well):
    _, ds, _ = small_well
    fit, val = ds.table("fit"), ds.table("val")
    runs = []
    for _ in range(2):
        mdl = build_model("h", fit, cv_curve=CURVE, seed=1, width=5)
        _, hist = E.train(mdl, fit, val, E.TrainConfig.for_kind("h", epochs=3, seed=9))
        runs.append(hist.to_csv())
    assert runs[0] == runs[1]


def test_last_partial_batch_is_used(small_well):
    _, ds, _ = small_well
    fit, val = ds.table("fit"), ds.table("val")
    n = fit.n_rows
    cfg = E.TrainConfig.for_kind("m", epochs=1, batch_size=n - 1, optimizer="sgd", lr=1e-12)
    calls = []
    mdl = build_model("m", cv_curve=CURVE)
    orig = mdl.forward

    def spy(nodes, inputs):
        calls.append(len(inputs["z"]))
        return orig(nodes, inputs)

    mdl.forward = spy
    E.train(mdl, fit, val, cfg)
    assert calls[:2] == [n - 1, 1]


def test_divergence_reports_epoch_and_batch():
    fit = SampleTable({"x": np.array([1.0, 2.0]), "q_o": np.array([np.inf, 1.0])})
    with pytest.raises(E.TrainingDiverged) as e:
        E.train(LinearToy(0.0, 1.0), fit, fit, E.TrainConfig(epochs=2, batch_size=2, sigma_eps=1.0))
    assert (e.value.epoch, e.value.batch) == (0, 0)


def test_bound_violations_reported_not_projected():
    fit, val = toy_data(30, 5.0, 0.01, 6), toy_data(5, 5.0, 0.01, 7)
    toy = LinearToy(1.0, 1.0)
    toy.params.priors["theta"] = Prior(1.0, 1.0, 0.0, 2.0)
    _, hist = E.train(toy, fit, val, E.TrainConfig(epochs=800, batch_size=30, lr=0.05, sigma_eps=0.01))
    assert toy.params.physical["theta"] > 2.0
    assert "theta" in hist.bound_violations


def test_overfit_flag():
    h = E.TrainHistory(epoch=list(range(1, 21)), train_loss=list(np.linspace(5, 1, 20)),
                       val_rmse=[3.0] * 18 + [3.1, 3.2], val_mae=[0.0] * 20)
    assert E.overfit_flag(h)
    h.val_rmse = list(np.linspace(4, 2, 20))
    assert not E.overfit_flag(h)
