import json

import numpy as np
import pytest

from grayvfm import models, nn
from grayvfm.autodiff import StructuralError, Tape
from grayvfm.data import as_table
from grayvfm.models import ModelAssembly, Prior, build_model, hybridity_report, model_inputs, predict_values
from grayvfm.physics import CvCurve, FluidState, PhysicalConstants, choke_oil_rate

CURVE = CvCurve([0.0, 0.2, 0.4, 0.6, 0.8, 1.0], [0.0, 14.0, 33.0, 55.0, 78.0, 100.0])


def test_parameter_counts(small_well):
    _, ds, _ = small_well
    fit = ds.table("fit")
    m = build_model("m", cv_curve=CURVE)
    h = build_model("h", fit, cv_curve=CURVE, width=20, depth=2)
    dd = build_model("dd", fit, width=70, depth=2)
    assert hybridity_report(m)["n_physical"] == 3 and hybridity_report(m)["n_network"] == 0
    assert hybridity_report(h)["physical"] == ["rho_o", "rho_w"] and hybridity_report(h)["n_network"] == 521
    assert hybridity_report(dd)["n_physical"] == 0


def test_zero_cv_gives_zero_rate():
    m = build_model("m", cv_curve=CURVE)
    q = predict_values(m, {"p1": 100.0, "p2": 60.0, "T1": 350.0, "z": 0.0, "w_g": 0.1, "w_o": 0.6})
    assert q[0] == 0.0


def test_worked_state_oil_rate():
    # effective Cv 50 at z=0.5 with a=1; densities chosen so rho_m = 327.87 at rho_g(100 bar, T1)
    c = PhysicalConstants()
    curve = CvCurve([0.0, 1.0], [0.0, 100.0])
    state = {"p1": 100.0, "p2": 60.0, "T1": 350.0, "z": 0.5, "w_g": 0.1, "w_o": 0.8}
    m = build_model("m", cv_curve=curve, priors={"rho_o": Prior(800.0, 10.0), "rho_w": Prior(1000.0, 10.0), "a": Prior(1.0, 0.1)})
    ref = choke_oil_rate(FluidState(**state), 50.0, c, 800.0, 1000.0)
    assert predict_values(m, state)[0] == pytest.approx(ref, rel=1e-13)
    assert 0.8 * 27.3 * 50 * np.sqrt(327.87 * 21.511) / 850 == pytest.approx(107.9, abs=0.05)


def test_h_equals_m_with_frozen_constant_cv(small_well, rng):
    _, ds, _ = small_well
    fit = ds.table("fit")
    h = build_model("h", fit, cv_curve=CURVE, width=4, depth=2)
    net = h.params.network
    c = 42.0
    vals = {k: np.zeros_like(v) for k, v in net.values().items()}
    # softplus(b) * scale = c
    vals["b2"] = np.array([np.log(np.expm1(c / net.out_scale))])
    net.assign(vals)
    m = build_model("m", cv_curve=CvCurve([0.0, 1.0], [c, c]), priors=models.DEFAULT_PRIORS)
    m.params.physical.update(rho_o=h.params.physical["rho_o"], rho_w=h.params.physical["rho_w"], a=1.0)
    table = ds.table("fit", "val", "test").take(np.arange(100))
    np.testing.assert_allclose(predict_values(h, table), predict_values(m, table), rtol=1e-12)


def test_table1_input_conformance():
    seven = {"p1": 100.0, "p2": 60.0, "T1": 350.0, "T2": 340.0, "z": 0.5, "w_g": 0.1, "w_o": 0.6}
    six = {k: v for k, v in seven.items() if k != "T2"}
    with pytest.raises(StructuralError):
        model_inputs("dd", six)
    with pytest.raises(StructuralError):
        model_inputs("m", seven)
    with pytest.raises(StructuralError):
        model_inputs("h", seven)
    assert set(model_inputs("dd", seven)) == set(seven)


def test_predict_is_deterministic(small_well):
    _, ds, _ = small_well
    fit = ds.table("fit")
    for kind in models.KINDS:
        mdl = build_model(kind, fit, cv_curve=CURVE, seed=3)
        assert np.array_equal(predict_values(mdl, fit), predict_values(mdl, fit))


def test_fused_and_composed_models_agree(small_well):
    _, ds, _ = small_well
    fit = ds.table("fit")
    for kind in ("m", "h"):
        a = build_model(kind, fit, cv_curve=CURVE, seed=1, fused=True)
        b = build_model(kind, fit, cv_curve=CURVE, seed=1, fused=False)
        np.testing.assert_allclose(predict_values(a, fit), predict_values(b, fit), rtol=1e-12)


def test_artifact_round_trip(small_well, tmp_path):
    _, ds, _ = small_well
    fit = ds.table("fit")
    for kind in models.KINDS:
        mdl = build_model(kind, fit, cv_curve=CURVE, seed=2)
        path = tmp_path / f"{kind}.json"
        mdl.save(path)
        back = ModelAssembly.load(path)
        assert np.array_equal(predict_values(back, fit), predict_values(mdl, fit))
        d = json.loads(path.read_text())
        assert d["format"] == "grayvfm-model" and d["kind"] == kind
    bad = json.loads(path.read_text())
    bad["version"] = 99
    with pytest.raises(StructuralError):
        ModelAssembly.from_dict(bad)


def test_domain_error_names_samples(small_well):
    _, ds, _ = small_well
    fit = ds.table("fit")
    broken = fit.take(np.arange(5))
    broken["p2"] = broken["p2"].copy()
    broken["p2"][2] = broken["p1"][2] + 10.0
    mdl = build_model("m", cv_curve=CURVE)
    with pytest.raises(models.SampleDomainError) as e:
        predict_values(mdl, broken)
    assert e.value.sample_ids == [float(broken["t_start"][2])]


def test_prior_from_bounds():
    p = Prior.from_bounds(820.0, 700.0, 950.0)
    assert p.sigma == 62.5 and p.contains(700.0) and not p.contains(951.0)
    with pytest.raises(ValueError):
        Prior.from_bounds(1.0, 2.0, 1.0)


def test_every_physical_parameter_has_one_prior():
    with pytest.raises(StructuralError):
        models.ParameterSet({"rho_o": 800.0}, {"rho_w": Prior(1.0, 1.0)})
