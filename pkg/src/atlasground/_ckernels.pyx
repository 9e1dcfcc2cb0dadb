# cython: language_level=3
"""Compiled Soft Organ Distance kernel (batched loss and prediction gradient)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def sod_batch(double[:, ::1] pred, double[:, :, :, ::1] points, long[::1] n_organs,
              double gamma_p, double gamma_o):
    cdef Py_ssize_t B = points.shape[0], M = points.shape[1], N = points.shape[2]
    loss_arr = np.zeros(B, dtype=np.float64)
    grad_arr = np.zeros((B, 3), dtype=np.float64)
    organ_arr = np.zeros((B, M), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[:, ::1] organ_loss = organ_arr
    cdef double[::1] dist = np.empty(N, dtype=np.float64)
    cdef double[::1] wgt = np.empty(N, dtype=np.float64)
    cdef double[:, ::1] gorg = np.empty((M, 3), dtype=np.float64)
    cdef double[::1] vw = np.empty(M, dtype=np.float64)
    cdef Py_ssize_t b, j, k, a, m
    cdef double dx, dy, dz, dmin, s, lo, coef, lmin, lt, px, py, pz
    for b in range(B):
        m = n_organs[b]
        px = pred[b, 0]; py = pred[b, 1]; pz = pred[b, 2]
        for j in range(m):
            dmin = 1e300
            for k in range(N):
                dx = px - points[b, j, k, 0]
                dy = py - points[b, j, k, 1]
                dz = pz - points[b, j, k, 2]
                dist[k] = sqrt(dx * dx + dy * dy + dz * dz)
                if dist[k] < dmin:
                    dmin = dist[k]
            s = 0.0
            for k in range(N):
                wgt[k] = exp(-(dist[k] - dmin) / gamma_p)
                s += wgt[k]
            lo = 0.0
            for k in range(N):
                wgt[k] /= s
                lo += dist[k] * wgt[k]
            organ_loss[b, j] = lo
            gorg[j, 0] = 0.0; gorg[j, 1] = 0.0; gorg[j, 2] = 0.0
            for k in range(N):
                if dist[k] > 0.0:
                    coef = wgt[k] * (1.0 - (dist[k] - lo) / gamma_p) / dist[k]
                    gorg[j, 0] += coef * (px - points[b, j, k, 0])
                    gorg[j, 1] += coef * (py - points[b, j, k, 1])
                    gorg[j, 2] += coef * (pz - points[b, j, k, 2])
        lmin = 1e300
        for j in range(m):
            if organ_loss[b, j] < lmin:
                lmin = organ_loss[b, j]
        s = 0.0
        for j in range(m):
            vw[j] = exp(-(organ_loss[b, j] - lmin) / gamma_o)
            s += vw[j]
        lt = 0.0
        for j in range(m):
            vw[j] /= s
            lt += organ_loss[b, j] * vw[j]
        loss[b] = lt
        for j in range(m):
            coef = vw[j] * (1.0 - (organ_loss[b, j] - lt) / gamma_o)
            for a in range(3):
                grad[b, a] += coef * gorg[j, a]
    return loss_arr, grad_arr, organ_arr
