# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the routines in ``_kernels_py``.

Same signatures and results; loops are fused so the per-batch choke
evaluation touches each sample once.
"""
import numpy as np
from libc.math cimport sqrt

cdef double PA_PER_BAR = 1e5


def choke_partials(p1_in, p2_in, T1_in, w_g_in, w_o_in, cv_in,
                   double rho_o, double rho_w, double N, double M_w, double z_g,
                   double R, double x_tp, double rho_o_st):
    arrays = np.broadcast_arrays(
        np.asarray(p1_in, dtype=np.float64), np.asarray(p2_in, dtype=np.float64),
        np.asarray(T1_in, dtype=np.float64), np.asarray(w_g_in, dtype=np.float64),
        np.asarray(w_o_in, dtype=np.float64), np.asarray(cv_in, dtype=np.float64),
    )
    shape = arrays[0].shape
    cdef double[::1] p1 = np.ascontiguousarray(arrays[0]).ravel()
    cdef double[::1] p2 = np.ascontiguousarray(arrays[1]).ravel()
    cdef double[::1] T1 = np.ascontiguousarray(arrays[2]).ravel()
    cdef double[::1] w_g = np.ascontiguousarray(arrays[3]).ravel()
    cdef double[::1] w_o = np.ascontiguousarray(arrays[4]).ravel()
    cdef double[::1] cv = np.ascontiguousarray(arrays[5]).ravel()
    cdef Py_ssize_t n = p1.shape[0]
    out = np.empty((6, n), dtype=np.float64)
    cdef double[:, ::1] o = out

    cdef Py_ssize_t i
    cdef double rho_g, den, rho_m, rho_m2, w_w, x_p, x_lim, u, D, dD_dxlim
    cdef double dD_dp1, dD_dp2, S, s, K, dq_dS
    cdef double third = 1.0 / (3.0 * x_tp)
    for i in range(n):
        rho_g = M_w * (p1[i] * PA_PER_BAR) / (z_g * R * T1[i])
        den = 1.0 + w_g[i] * (rho_w / rho_g - 1.0) + w_o[i] * (rho_w / rho_o - 1.0)
        rho_m = rho_w / den
        rho_m2 = rho_m * rho_m
        w_w = 1.0 - w_g[i] - w_o[i]

        x_p = (p1[i] - p2[i]) / p1[i]
        if x_p > x_tp:
            x_lim = x_tp
        else:
            x_lim = x_p
        u = 1.0 - x_lim / (3.0 * x_tp)
        D = u * u * x_lim * p1[i]
        if x_p > x_tp:
            dD_dp1 = u * u * x_tp
            dD_dp2 = 0.0
        else:
            dD_dxlim = (-2.0 * third) * u * x_lim * p1[i] + u * u * p1[i]
            dD_dp1 = dD_dxlim * p2[i] / (p1[i] * p1[i]) + u * u * x_lim
            dD_dp2 = -dD_dxlim / p1[i]

        S = D * rho_m
        s = sqrt(S)
        K = N * w_o[i] / rho_o_st
        if s > 0.0:
            dq_dS = 0.5 * K * cv[i] / s
        else:
            dq_dS = 0.0
        o[0, i] = K * cv[i] * s
        o[1, i] = K * s
        o[2, i] = dq_dS * D * rho_m2 * w_o[i] / (rho_o * rho_o)
        o[3, i] = dq_dS * D * rho_m2 * w_w / (rho_w * rho_w)
        o[4, i] = dq_dS * (dD_dp1 * rho_m + D * rho_m2 * w_g[i] / (rho_g * p1[i]))
        o[5, i] = dq_dS * dD_dp2 * rho_m
    return tuple(out[k].reshape(shape) for k in range(6))


def steady_flags(channels_in, Py_ssize_t window, tol_in):
    cdef double[:, ::1] ch = np.ascontiguousarray(channels_in, dtype=np.float64)
    cdef double[::1] tol = np.ascontiguousarray(tol_in, dtype=np.float64)
    cdef Py_ssize_t n_ch = ch.shape[0]
    cdef Py_ssize_t n = ch.shape[1]
    flags = np.zeros(n, dtype=bool)
    if n < window:
        return flags
    cdef unsigned char[::1] f = flags.view(np.uint8)
    cdef Py_ssize_t i, j, c
    cdef double mu, acc, d
    cdef bint ok
    for i in range(window - 1, n):
        ok = True
        for c in range(n_ch):
            mu = 0.0
            for j in range(i - window + 1, i + 1):
                mu += ch[c, j]
            mu /= window
            acc = 0.0
            for j in range(i - window + 1, i + 1):
                d = ch[c, j] - mu
                acc += d * d
            if not (sqrt(acc / window) < tol[c]):
                ok = False
                break
        f[i] = ok
    return flags
