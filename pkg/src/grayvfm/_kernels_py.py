"""Numpy implementations of the hot kernels.

Reference versions of the routines in ``_ckernels.pyx``; selected by
:mod:`grayvfm.kernels` when the compiled module is unavailable.
"""
import numpy as np

PA_PER_BAR = 1e5


def choke_partials(p1, p2, T1, w_g, w_o, cv, rho_o, rho_w, N, M_w, z_g, R, x_tp, rho_o_st):
    """Oil rate through the choke and its partials, elementwise over a batch.

    Returns ``(q, dq_dcv, dq_drho_o, dq_drho_w, dq_dp1, dq_dp2)``.  ``rho_o``
    and ``rho_w`` are scalars; every other argument is a 1-d array of equal
    length (or a scalar constant).  Pressures in bar, rates in Sm3/h.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    rho_g = M_w * (p1 * PA_PER_BAR) / (z_g * R * T1)
    den = 1.0 + w_g * (rho_w / rho_g - 1.0) + w_o * (rho_w / rho_o - 1.0)
    rho_m = rho_w / den
    w_w = 1.0 - w_g - w_o

    x_p = (p1 - p2) / p1
    choked = x_p > x_tp
    x_lim = np.where(choked, x_tp, x_p)
    u = 1.0 - x_lim / (3.0 * x_tp)
    D = u * u * x_lim * p1
    dD_dxlim = (-2.0 / (3.0 * x_tp)) * u * x_lim * p1 + u * u * p1
    dD_dp1 = np.where(choked, u * u * x_tp, dD_dxlim * p2 / (p1 * p1) + u * u * x_lim)
    dD_dp2 = np.where(choked, 0.0, -dD_dxlim / p1)

    S = D * rho_m
    s = np.sqrt(S)
    K = N * w_o / rho_o_st
    q = K * cv * s
    dq_dS = np.where(s > 0.0, 0.5 * K * cv / np.where(s > 0.0, s, 1.0), 0.0)

    rho_m2 = rho_m * rho_m
    dq_dcv = K * s
    dq_drho_o = dq_dS * D * rho_m2 * w_o / (rho_o * rho_o)
    dq_drho_w = dq_dS * D * rho_m2 * w_w / (rho_w * rho_w)
    dq_dp1 = dq_dS * (dD_dp1 * rho_m + D * rho_m2 * w_g / (rho_g * p1))
    dq_dp2 = dq_dS * dD_dp2 * rho_m
    return q, dq_dcv, dq_drho_o, dq_drho_w, dq_dp1, dq_dp2


def steady_flags(channels, window, tol):
    """Flag trailing windows whose per-channel population std is below ``tol``.

    ``channels`` has shape ``(n_channels, n)``.  Entry ``i`` of the result
    refers to records ``i - window + 1 .. i``; the first ``window - 1``
    entries are always False.
    """
    channels = np.ascontiguousarray(channels, dtype=np.float64)
    n = channels.shape[1]
    flags = np.zeros(n, dtype=bool)
    if n < window:
        return flags
    views = np.lib.stride_tricks.sliding_window_view(channels, window, axis=1)
    mu = views.mean(axis=-1, keepdims=True)
    std = np.sqrt(((views - mu) ** 2).mean(axis=-1))
    flags[window - 1 :] = np.all(std < np.asarray(tol, dtype=np.float64)[:, None], axis=0)
    return flags
