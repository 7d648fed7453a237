"""Choke valve hydraulics for multiphase flow under frozen-flow assumptions.

Every function accepts plain floats/arrays or graph :class:`~grayvfm.autodiff.Node`
objects.  With plain inputs it evaluates directly; when any input is a node
it builds the corresponding subgraph, so the same code serves evaluation,
training and gradient checks.

Units: pressures in bar (absolute), temperatures in K, densities in kg/m3,
mass rate in kg/h, volumetric oil rate in Sm3/h.  The gas law is evaluated in
SI, so pressures are converted to Pa inside :func:`gas_density`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Node, StructuralError
from .kernels import choke_partials

PA_PER_BAR = 1e5
R_UNIVERSAL = 8.314


def _is_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _sqrt(x):
    if isinstance(x, Node):
        return ad.sqrt(x)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise DomainError("sqrt", "negative argument", (x,))
    return np.sqrt(x)


def _minimum(a, b):
    if _is_node(a, b):
        return ad.minimum(a, b)
    # first argument wins ties, same rule as the graph op
    return np.where(np.less_equal(a, b), a, b)


@dataclass(frozen=True)
class PhysicalConstants:
    """Per-well constants of the choke model (none are learned)."""

    N: float = 27.3
    R: float = R_UNIVERSAL
    M_w: float = 0.020
    z_g: float = 0.9
    x_tp: float = 0.5
    rho_o_st: float = 850.0
    rho_w_st: float = 1025.0
    rho_g_st: float = 0.85

    def __post_init__(self):
        for name in ("N", "R", "M_w", "z_g", "x_tp", "rho_o_st", "rho_w_st", "rho_g_st"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.x_tp < 1.0:
            raise ValueError("x_tp must lie in (0, 1)")
        if not self.z_g <= 2.0:
            raise ValueError("z_g must lie in (0, 2]")


@dataclass(frozen=True)
class FluidState:
    """Inputs at one or many operating points (fields may be arrays)."""

    p1: object
    p2: object
    T1: object
    z: object
    w_g: object
    w_o: object

    def validate(self) -> None:
        p1, p2, T1 = _val(self.p1), _val(self.p2), _val(self.T1)
        z, w_g, w_o = _val(self.z), _val(self.w_g), _val(self.w_o)
        if np.any(p1 <= 0) or np.any(p2 <= 0):
            raise DomainError("state", "pressures must be positive", (p1, p2))
        if np.any(p2 > p1):
            raise DomainError("state", "p2 exceeds p1", (p1, p2))
        if np.any(T1 <= 0):
            raise DomainError("state", "temperature must be positive", (T1,))
        if np.any((z < 0) | (z > 1)):
            raise DomainError("state", "choke opening outside [0, 1]", (z,))
        if np.any(w_g < 0) or np.any(w_o < 0) or np.any(w_g + w_o > 1.0 + 1e-12):
            raise DomainError("state", "invalid mass fractions", (w_g, w_o))


@dataclass
class CvCurve:
    """Valve flow-coefficient test points and the multiplicative shift ``a``."""

    z_points: np.ndarray
    cv_points: np.ndarray
    a: float = 1.0

    def __post_init__(self):
        self.z_points = np.asarray(self.z_points, dtype=np.float64)
        self.cv_points = np.asarray(self.cv_points, dtype=np.float64)
        if self.z_points.ndim != 1 or self.z_points.size < 2:
            raise StructuralError("Cv curve needs at least two test points")
        if self.cv_points.shape != self.z_points.shape:
            raise StructuralError("Cv curve: z and Cv point counts differ")
        if np.any(np.diff(self.z_points) <= 0):
            raise StructuralError("Cv curve: z points must be strictly increasing")
        if np.any(self.cv_points < 0):
            raise DomainError("cv_curve", "negative Cv test point", (self.cv_points,))

    @property
    def max_cv(self) -> float:
        return float(self.cv_points.max())


def gas_density(p1, T1, constants: PhysicalConstants):
    """Ideal-gas density with compressibility factor, kg/m3."""
    if np.any(_val(T1) <= 0):
        raise DomainError("gas_density", "nonpositive temperature", (_val(T1),))
    c = constants
    return c.M_w * (p1 * PA_PER_BAR) / (c.z_g * c.R * T1)


def mixture_density(w_g, w_o, rho_g, rho_o, rho_w):
    """Homogeneous mixture density from mass fractions (harmonic mean).

    Written as ``rho_w / (1 + w_g (rho_w/rho_g - 1) + w_o (rho_w/rho_o - 1))``,
    which equals the usual ``1 / sum(w_i / rho_i)`` and returns ``rho`` exactly
    when all three densities are equal.
    """
    for tag, rho in (("rho_g", rho_g), ("rho_o", rho_o), ("rho_w", rho_w)):
        if np.any(_val(rho) <= 0):
            raise DomainError("mixture_density", f"{tag} must be positive", (_val(rho),))
    return rho_w / (1.0 + w_g * (rho_w / rho_g - 1.0) + w_o * (rho_w / rho_o - 1.0))


def effective_dp_term(p1, p2, x_tp: float):
    """Expansion-corrected pressure drop ``Y^2 (p1 - p2)`` in bar.

    Uses ``(1 - x_lim / (3 x_tp))^2 * x_lim * p1`` with
    ``x_lim = min((p1 - p2)/p1, x_tp)``; finite (zero) at ``p1 == p2`` and
    independent of ``p2`` once the flow is choked.
    """
    if np.any(_val(p2) > _val(p1)):
        raise DomainError("effective_dp_term", "p2 exceeds p1", (_val(p1), _val(p2)))
    x_p = (p1 - p2) / p1
    x_lim = _minimum(x_p, x_tp)
    u = 1.0 - x_lim / (3.0 * x_tp)
    return u * u * x_lim * p1


def mass_flow(state: FluidState, cv, constants: PhysicalConstants, rho_o, rho_w):
    """Total mass rate through the choke, kg/h."""
    if np.any(_val(cv) < 0):
        raise DomainError("mass_flow", "negative Cv", (_val(cv),))
    rho_g = gas_density(state.p1, state.T1, constants)
    rho_m = mixture_density(state.w_g, state.w_o, rho_g, rho_o, rho_w)
    dp = effective_dp_term(state.p1, state.p2, constants.x_tp)
    return constants.N * cv * _sqrt(dp * rho_m)


def oil_rate(m_dot, w_o, rho_o_st: float):
    """Oil volume rate at standard conditions, Sm3/h."""
    if rho_o_st <= 0:
        raise DomainError("oil_rate", "rho_o_st must be positive", (rho_o_st,))
    return w_o * m_dot / rho_o_st


def cv_interp(z, curve: CvCurve, a=None):
    """Piecewise-linear Cv(z) through the test points, scaled by ``a``.

    ``a`` defaults to ``curve.a``; pass a node to learn it.  Openings outside
    the tabulated range take the nearest endpoint value.
    """
    a = curve.a if a is None else a
    if isinstance(z, Node):
        base = ad.interp(z, curve.z_points, curve.cv_points)
    elif isinstance(a, Node):
        base = a.tape.const(np.interp(np.asarray(z, dtype=np.float64), curve.z_points, curve.cv_points))
    else:
        base = np.interp(np.asarray(z, dtype=np.float64), curve.z_points, curve.cv_points)
    return a * base


def choke_oil_rate(state: FluidState, cv, constants: PhysicalConstants, rho_o, rho_w):
    """Oil rate built from the elementary graph ops (reference composition)."""
    return oil_rate(mass_flow(state, cv, constants, rho_o, rho_w), state.w_o, constants.rho_o_st)


def fused_oil_rate(state: FluidState, cv, constants: PhysicalConstants, rho_o, rho_w):
    """Same quantity as :func:`choke_oil_rate`, recorded as a single graph node.

    The forward value and local partials come from the compiled kernel (or
    its numpy fallback).  ``cv``, ``rho_o``, ``rho_w``, ``state.p1`` and
    ``state.p2`` may be nodes; the remaining state fields must be data.
    """
    if np.any(_val(state.p2) > _val(state.p1)):
        raise DomainError("fused_oil_rate", "p2 exceeds p1", (_val(state.p1), _val(state.p2)))
    if np.any(_val(cv) < 0):
        raise DomainError("fused_oil_rate", "negative Cv", (_val(cv),))
    if np.any(_val(rho_o) <= 0) or np.any(_val(rho_w) <= 0):
        raise DomainError("fused_oil_rate", "densities must be positive", (_val(rho_o), _val(rho_w)))
    for name in ("T1", "z", "w_g", "w_o"):
        if isinstance(getattr(state, name), Node):
            raise StructuralError(f"fused_oil_rate: {name} must be data, not a node")
    c = constants
    if np.ndim(_val(rho_o)) or np.ndim(_val(rho_w)):
        raise StructuralError("fused_oil_rate: rho_o and rho_w must be scalars")
    q, d_cv, d_ro, d_rw, d_p1, d_p2 = choke_partials(
        _val(state.p1), _val(state.p2), _val(state.T1), _val(state.w_g), _val(state.w_o), _val(cv),
        float(_val(rho_o)), float(_val(rho_w)), c.N, c.M_w, c.z_g, c.R, c.x_tp, c.rho_o_st,
    )
    q = np.asarray(q, dtype=np.float64)
    if not _is_node(cv, rho_o, rho_w, state.p1, state.p2):
        return q
    T1, w_g, w_o = _val(state.T1), _val(state.w_g), _val(state.w_o)

    def fwd(cv_v, ro_v, rw_v, p1_v, p2_v):
        return choke_partials(p1_v, p2_v, T1, w_g, w_o, cv_v, float(ro_v), float(rw_v),
                              c.N, c.M_w, c.z_g, c.R, c.x_tp, c.rho_o_st)[0]

    parents = (cv, rho_o, rho_w, state.p1, state.p2)
    return ad.custom("choke", parents, q, (d_cv, d_ro, d_rw, d_p1, d_p2), fwd)
