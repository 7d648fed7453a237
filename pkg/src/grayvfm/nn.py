"""Fully connected ReLU networks on the autodiff tape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, StructuralError, Tape

OUTPUTS = ("identity", "softplus")


@dataclass
class InputScaler:
    """Per-feature standardization ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "InputScaler":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise StructuralError("scaler needs a non-empty 2-d feature matrix")
        scale = X.std(axis=0)
        # constant features would divide by zero
        scale = np.where(scale > 0.0, scale, 1.0)
        return cls(X.mean(axis=0), scale)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.shift.shape[0]:
            raise StructuralError(f"scaler fitted on {self.shift.shape[0]} features, got {X.shape[-1]}")
        return (X - self.shift) / self.scale

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputScaler":
        return cls(np.asarray(d["shift"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


@dataclass
class MLP:
    """Feed-forward network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers are affine + ReLU.  The output is
    ``out_shift + out_scale * act(affine(h))`` with ``act`` identity or
    softplus; ``out_shift``/``out_scale`` are fixed, not learned.
    """

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"
    out_scale: float = 1.0
    out_shift: float = 0.0
    names: list[str] = field(init=False)

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ValueError(f"output activation must be one of {OUTPUTS}")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise StructuralError("one weight matrix and bias per layer transition required")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.widths[l + 1], self.widths[l]) or b.shape != (self.widths[l + 1],):
                raise StructuralError(f"layer {l}: W{W.shape}, b{b.shape} do not match widths {self.widths}")
        self.names = [f"{p}{l}" for l in range(len(self.weights)) for p in ("W", "b")]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def values(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{l}"] = W
            out[f"b{l}"] = b
        return out

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for l in range(len(self.weights)):
            self.weights[l] = np.array(values[f"W{l}"], dtype=np.float64)
            self.biases[l] = np.array(values[f"b{l}"], dtype=np.float64)

    def bind(self, tape: Tape, prefix: str = "") -> dict[str, Node]:
        return {prefix + k: tape.param(v, prefix + k) for k, v in self.values().items()}

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "output": self.output,
            "out_scale": self.out_scale,
            "out_shift": self.out_shift,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        return cls(
            list(d["widths"]),
            [np.asarray(W, dtype=np.float64).reshape(o, i) for W, i, o in zip(d["weights"], d["widths"][:-1], d["widths"][1:])],
            [np.asarray(b, dtype=np.float64) for b in d["biases"]],
            d["output"],
            float(d["out_scale"]),
            float(d["out_shift"]),
        )


def init(widths, seed, output: str = "identity", out_scale: float = 1.0, out_shift: float = 0.0) -> MLP:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise StructuralError(f"invalid layer widths {widths}")
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)) for fan_in, fan_out in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(fan_out) for fan_out in widths[1:]]
    return MLP(widths, weights, biases, output, out_scale, out_shift)


def forward(mlp: MLP, x, nodes: dict[str, Node] | None = None, tape: Tape | None = None, prefix: str = "") -> Node:
    """Network output for a feature vector ``(in,)`` or batch ``(n, in)``.

    ``nodes`` are the bound parameters (see :meth:`MLP.bind`); when omitted
    they are bound onto ``tape`` (a fresh tape if that is omitted too).
    Returns shape ``(out,)`` or ``(n, out)``.
    """
    if nodes is None:
        tape = Tape() if tape is None else tape
        nodes = mlp.bind(tape, prefix)
    if isinstance(x, Node):
        h = x
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != mlp.widths[0]:
            raise StructuralError(f"network expects {mlp.widths[0]} inputs, got {x.shape[-1]}")
        h = nodes[prefix + "W0"].tape.const(x)
    last = len(mlp.weights) - 1
    for l in range(last + 1):
        h = ad.affine(nodes[f"{prefix}W{l}"], h, nodes[f"{prefix}b{l}"])
        if l < last:
            h = ad.relu(h)
    if mlp.output == "softplus":
        h = ad.softplus(h)
    if mlp.out_scale != 1.0:
        h = h * mlp.out_scale
    if mlp.out_shift != 0.0:
        h = h + mlp.out_shift
    return h
