"""Mechanistic (m), hybrid (h) and data-driven (dd) choke models.

All three map a batch of steady samples to an estimated oil rate through a
graph built on a :class:`~grayvfm.autodiff.Tape`:

* ``m``  - Cv from the shifted, interpolated test-point curve, then the choke equations.
* ``h``  - Cv from a ReLU network of ``[z, w_g, w_o]``, then the choke equations.
* ``dd`` - a ReLU network of all seven inputs predicts the oil rate directly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DomainError, Node, StructuralError, Tape
from .data import SampleTable, SteadySample, as_table
from .physics import CvCurve, FluidState, PhysicalConstants, choke_oil_rate, cv_interp, fused_oil_rate

KINDS = ("m", "h", "dd")
INPUTS = {
    "m": ("p1", "p2", "T1", "z", "w_g", "w_o"),
    "h": ("p1", "p2", "T1", "z", "w_g", "w_o"),
    "dd": ("p1", "p2", "T1", "T2", "z", "w_g", "w_o"),
}
CV_NET_INPUTS = ("z", "w_g", "w_o")
PHYSICAL = {"m": ("rho_o", "rho_w", "a"), "h": ("rho_o", "rho_w"), "dd": ()}
ARTIFACT_FORMAT = "grayvfm-model"
ARTIFACT_VERSION = 1


class SampleDomainError(DomainError):
    """A physics domain error tagged with the offending sample identifiers."""

    def __init__(self, cause: DomainError, sample_ids):
        self.sample_ids = list(sample_ids)
        super().__init__(cause.op_tag, f"{cause} (samples {self.sample_ids[:10]})", cause.operands)


@dataclass(frozen=True)
class Prior:
    """Gaussian prior ``N(mu, sigma^2)`` with the bounds it was derived from."""

    mu: float
    sigma: float
    lower: float | None = None
    upper: float | None = None

    @classmethod
    def from_bounds(cls, mu: float, lower: float, upper: float) -> "Prior":
        if not lower < upper:
            raise ValueError("lower bound must be below upper bound")
        return cls(mu, (upper - lower) / 4.0, lower, upper)

    def contains(self, value: float) -> bool:
        lo = -np.inf if self.lower is None else self.lower
        hi = np.inf if self.upper is None else self.upper
        return lo <= value <= hi


DEFAULT_PRIORS = {
    "rho_o": Prior.from_bounds(808.0, 700.0, 950.0),
    "rho_w": Prior.from_bounds(1015.0, 980.0, 1080.0),
    "a": Prior.from_bounds(1.0, 0.5, 1.5),
}


@dataclass
class ParameterSet:
    """Learnable parameters: named physical scalars with priors plus an optional network."""

    physical: dict[str, float]
    priors: dict[str, Prior]
    network: nn.MLP | None = None

    def __post_init__(self):
        if set(self.physical) != set(self.priors):
            raise StructuralError("every physical parameter needs exactly one prior")

    def values(self) -> dict[str, np.ndarray]:
        out = {k: np.array(v, dtype=np.float64) for k, v in self.physical.items()}
        if self.network is not None:
            out.update({f"nn.{k}": v for k, v in self.network.values().items()})
        return out

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        for k in self.physical:
            self.physical[k] = float(values[k])
        if self.network is not None:
            self.network.assign({k[3:]: v for k, v in values.items() if k.startswith("nn.")})


@dataclass
class ModelAssembly:
    """A model of one kind with its parameters and fixed configuration.

    ``fractions`` selects which mass fractions feed the model: the
    periodically refreshed (``"scheduled"``) or per-sample (``"continuous"``) ones.
    ``fused`` evaluates the choke equations as one kernel-backed node.
    """

    kind: str
    params: ParameterSet
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    cv_curve: CvCurve | None = None
    scaler: nn.InputScaler | None = None
    fractions: str = "scheduled"
    fused: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if set(self.params.physical) != set(PHYSICAL[self.kind]):
            raise StructuralError(f"{self.kind}-model physical parameters must be {PHYSICAL[self.kind]}")
        if self.kind == "m" and self.cv_curve is None:
            raise StructuralError("m-model needs a Cv curve")
        if self.kind in ("h", "dd") and (self.params.network is None or self.scaler is None):
            raise StructuralError(f"{self.kind}-model needs a network and an input scaler")
        if self.fractions not in ("scheduled", "continuous"):
            raise ValueError("fractions must be 'scheduled' or 'continuous'")

    @property
    def input_names(self) -> tuple:
        return INPUTS[self.kind]

    def inputs(self, data) -> dict[str, np.ndarray]:
        return model_inputs(self.kind, data, self.fractions)

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.param(v, k) for k, v in self.params.values().items()}

    def forward(self, nodes: Mapping[str, Node], inputs: Mapping[str, np.ndarray]) -> Node:
        """Oil-rate node for a batch of Table-1 inputs (arrays of shape ``(n,)``)."""
        n = np.shape(inputs["z"])[0]
        net = self.params.network
        net_nodes = {k[3:]: v for k, v in nodes.items() if k.startswith("nn.")}
        if self.kind == "dd":
            X = self.scaler.transform(np.column_stack([inputs[k] for k in INPUTS["dd"]]))
            return ad.reshape(nn.forward(net, X, net_nodes), (n,))
        if self.kind == "m":
            cv = cv_interp(inputs["z"], self.cv_curve, a=nodes["a"])
        else:
            X = self.scaler.transform(np.column_stack([inputs[k] for k in CV_NET_INPUTS]))
            cv = ad.reshape(nn.forward(net, X, net_nodes), (n,))
        state = FluidState(inputs["p1"], inputs["p2"], inputs["T1"], inputs["z"], inputs["w_g"], inputs["w_o"])
        rate = fused_oil_rate if self.fused else choke_oil_rate
        return rate(state, cv, self.constants, nodes["rho_o"], nodes["rho_w"])

    def to_dict(self) -> dict:
        return {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "kind": self.kind,
            "inputs": list(self.input_names),
            "fractions": self.fractions,
            "fused": self.fused,
            "constants": asdict(self.constants),
            "priors": {k: asdict(p) for k, p in self.params.priors.items()},
            "physical": dict(self.params.physical),
            "cv_curve": None if self.cv_curve is None else {
                "z": self.cv_curve.z_points.tolist(), "cv": self.cv_curve.cv_points.tolist()},
            "network": None if self.params.network is None else self.params.network.to_dict(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelAssembly":
        if d.get("format") != ARTIFACT_FORMAT or d.get("version") != ARTIFACT_VERSION:
            raise StructuralError("not a model artifact of a supported version")
        priors = {k: Prior(**p) for k, p in d["priors"].items()}
        net = None if d["network"] is None else nn.MLP.from_dict(d["network"])
        curve = None if d["cv_curve"] is None else CvCurve(d["cv_curve"]["z"], d["cv_curve"]["cv"], 1.0)
        scaler = None if d["scaler"] is None else nn.InputScaler.from_dict(d["scaler"])
        return cls(d["kind"], ParameterSet(dict(d["physical"]), priors, net), PhysicalConstants(**d["constants"]),
                   curve, scaler, d["fractions"], bool(d.get("fused", True)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelAssembly":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_model(
    kind: str,
    fit: SampleTable | None = None,
    *,
    constants: PhysicalConstants | None = None,
    priors: Mapping[str, Prior] | None = None,
    cv_curve: CvCurve | None = None,
    width: int = 20,
    depth: int = 2,
    seed: int = 0,
    cv_scale: float | None = None,
    fractions: str = "scheduled",
    fused: bool = True,
) -> ModelAssembly:
    """Initialize a model of ``kind``.

    Physical parameters start at their prior means.  Networks get He-normal
    weights; their input scaler is fitted on ``fit`` (the training rows only).
    The hybrid Cv head is ``cv_scale * softplus(.)`` with ``cv_scale``
    defaulting to the largest test-point Cv; the data-driven output is
    shifted and scaled by the mean and std of the fitted oil rates.
    """
    constants = constants or PhysicalConstants()
    priors = dict(DEFAULT_PRIORS if priors is None else priors)
    phys_names = PHYSICAL[kind] if kind in KINDS else ()
    missing = [k for k in phys_names if k not in priors]
    if missing:
        raise StructuralError(f"missing priors for {missing}")
    physical = {k: priors[k].mu for k in phys_names}
    used_priors = {k: priors[k] for k in phys_names}
    net, scaler = None, None
    if kind in ("h", "dd"):
        if fit is None or fit.n_rows == 0:
            raise StructuralError(f"{kind}-model needs training rows to fit its input scaler")
        X = model_inputs(kind, fit, fractions)
        names = CV_NET_INPUTS if kind == "h" else INPUTS["dd"]
        scaler = nn.InputScaler.fit(np.column_stack([X[k] for k in names]))
        widths = [len(names)] + [width] * depth + [1]
        if kind == "h":
            if cv_scale is None:
                if cv_curve is None:
                    raise StructuralError("h-model needs cv_scale or a Cv curve to set it")
                cv_scale = cv_curve.max_cv
            net = nn.init(widths, seed, output="softplus", out_scale=float(cv_scale))
        else:
            y = np.asarray(fit["q_o"], dtype=np.float64)
            std = float(y.std()) if y.std() > 0 else 1.0
            net = nn.init(widths, seed, output="identity", out_scale=std, out_shift=float(y.mean()))
    return ModelAssembly(kind, ParameterSet(physical, used_priors, net), constants,
                         cv_curve if kind == "m" else None, scaler, fractions, fused)


def model_inputs(kind: str, data, fractions: str = "scheduled") -> dict[str, np.ndarray]:
    """Extract the Table-1 input columns for ``kind``.

    ``data`` may be a :class:`SteadySample`, a list of them or a
    :class:`SampleTable`; fractions come from the scheduled or the
    instantaneous columns.  A plain mapping is taken as an explicit input
    vector and must carry exactly the inputs of ``kind``.
    """
    if isinstance(data, SteadySample):
        data = as_table([data])
    elif isinstance(data, (list, tuple)):
        data = as_table(list(data))
    if isinstance(data, SampleTable):
        g, o = ("w_g_sched", "w_o_sched") if fractions == "scheduled" else ("w_g", "w_o")
        cols = {"w_g": data[g], "w_o": data[o]}
        out = {k: np.asarray(cols[k] if k in cols else data[k], dtype=np.float64) for k in INPUTS[kind]}
        if np.any(np.isnan(out["w_g"])) or np.any(np.isnan(out["w_o"])):
            raise StructuralError(f"{fractions} mass fractions missing; run the fraction steps first")
        return out
    if isinstance(data, Mapping):
        if set(data) != set(INPUTS[kind]):
            extra = sorted(set(data) - set(INPUTS[kind]))
            missing = sorted(set(INPUTS[kind]) - set(data))
            raise StructuralError(f"{kind}-model inputs mismatch: missing {missing}, unexpected {extra}")
        return {k: np.atleast_1d(np.asarray(data[k], dtype=np.float64)) for k in INPUTS[kind]}
    raise StructuralError(f"cannot read model inputs from {type(data).__name__}")


def predict(model: ModelAssembly, data, tape: Tape | None = None, nodes=None) -> Node:
    """Estimated oil rate [Sm3/h] as a graph node, one entry per sample."""
    tape = Tape() if tape is None else tape
    nodes = model.bind(tape) if nodes is None else nodes
    inputs = model_inputs(model.kind, data, model.fractions)
    try:
        return model.forward(nodes, inputs)
    except DomainError as exc:
        ids = _sample_ids(data, inputs)
        raise SampleDomainError(exc, ids) from exc


def predict_values(model: ModelAssembly, data) -> np.ndarray:
    return np.array(predict(model, data).value, dtype=np.float64)


def _sample_ids(data, inputs) -> list:
    if isinstance(data, SampleTable):
        t = data["t_start"]
    elif isinstance(data, SteadySample):
        t = np.array([data.t_start])
    else:
        t = None
    p1, p2 = inputs["p1"], inputs["p2"]
    bad = np.flatnonzero((p2 > p1) | (p1 <= 0) | ~np.isfinite(p1) | ~np.isfinite(p2))
    if bad.size == 0:
        bad = np.arange(np.shape(p1)[0])
    return [float(t[i]) for i in bad] if t is not None else bad.tolist()


def hybridity_report(model: ModelAssembly) -> dict:
    """Counts and names of learnable physical versus network parameters."""
    net = model.params.network
    return {
        "kind": model.kind,
        "physical": list(model.params.physical),
        "n_physical": len(model.params.physical),
        "n_network": 0 if net is None else net.n_params,
        "network_widths": None if net is None else list(net.widths),
    }
