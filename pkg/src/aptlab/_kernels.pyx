# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled attack hot path: fused encoder forward/backward and PGD step."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def image_loss_grad(const double[:, ::1] x, const double[:, ::1] w1,
                    const double[::1] b1, const double[:, ::1] w2,
                    const double[::1] b2, const double[:, ::1] text_features,
                    double inv_tau, const cnp.intp_t[::1] labels):
    # matrix products go through BLAS; everything between them is fused here
    cdef Py_ssize_t n = x.shape[0], hd = w1.shape[1]
    cdef Py_ssize_t d = w2.shape[1], c = text_features.shape[0]
    cdef Py_ssize_t i, j, k, y
    cdef double acc, mx, se, dot

    w1a = np.asarray(w1)
    w2a = np.asarray(w2)
    tfa = np.asarray(text_features)

    tn_arr = np.empty(c, dtype=np.float64)
    th_arr = np.empty((c, d), dtype=np.float64)
    cdef double[::1] tn = tn_arr
    cdef double[:, ::1] th = th_arr
    for j in range(c):
        acc = 0.0
        for k in range(d):
            acc += text_features[j, k] * text_features[j, k]
        tn[j] = sqrt(acc)
        for k in range(d):
            th[j, k] = text_features[j, k] / tn[j]

    h_arr = np.asarray(x) @ w1a
    h_arr += np.asarray(b1)
    np.tanh(h_arr, out=h_arr)  # vectorized; far faster than scalar libm tanh
    cdef double[:, ::1] h = h_arr

    z_arr = h_arr @ w2a
    cdef double[:, ::1] z = z_arr
    zn_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] zn = zn_arr
    for i in range(n):
        acc = 0.0
        for k in range(d):
            z[i, k] += b2[k]
            acc += z[i, k] * z[i, k]
        zn[i] = sqrt(acc)
        for k in range(d):
            z[i, k] /= zn[i]

    # z now holds the unit image features; lg becomes d loss / d logits
    lg_arr = z_arr @ th_arr.T
    cdef double[:, ::1] lg = lg_arr
    loss_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] loss = loss_arr
    for i in range(n):
        mx = -1e300
        for j in range(c):
            lg[i, j] *= inv_tau
            if lg[i, j] > mx:
                mx = lg[i, j]
        se = 0.0
        for j in range(c):
            se += exp(lg[i, j] - mx)
        y = labels[i]
        loss[i] = (log(se) + mx) - lg[i, y]
        for j in range(c):
            lg[i, j] = exp(lg[i, j] - mx) / se
        lg[i, y] -= 1.0
        for j in range(c):
            lg[i, j] *= inv_tau

    dz_arr = lg_arr @ th_arr
    cdef double[:, ::1] dz = dz_arr
    for i in range(n):
        dot = 0.0
        for k in range(d):
            dot += dz[i, k] * z[i, k]
        for k in range(d):
            dz[i, k] = (dz[i, k] - dot * z[i, k]) / zn[i]

    da_arr = dz_arr @ w2a.T
    cdef double[:, ::1] da = da_arr
    for i in range(n):
        for k in range(hd):
            da[i, k] *= 1.0 - h[i, k] * h[i, k]
    gx_arr = da_arr @ w1a.T

    gt_arr = lg_arr.T @ z_arr
    cdef double[:, ::1] gt = gt_arr
    for j in range(c):
        dot = 0.0
        for k in range(d):
            gt[j, k] /= n
            dot += gt[j, k] * th[j, k]
        for k in range(d):
            gt[j, k] = (gt[j, k] - dot * th[j, k]) / tn[j]
    return loss_arr, gx_arr, gt_arr


def pgd_step(const double[:, ::1] x, double[:, ::1] delta,
             const double[:, ::1] grad, double alpha, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double raw, g, v
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            raw = x[i, j] + delta[i, j]
            g = grad[i, j] if (raw >= 0.0 and raw <= 1.0) else 0.0
            v = delta[i, j]
            if g > 0.0:
                v = v + alpha
            elif g < 0.0:
                v = v - alpha
            if v > eps:
                v = eps
            elif v < -eps:
                v = -eps
            delta[i, j] = v
            raw = x[i, j] + v
            if raw < 0.0:
                raw = 0.0
            elif raw > 1.0:
                raw = 1.0
            out[i, j] = raw
    return out_arr
