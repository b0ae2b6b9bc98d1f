# cython: language_level=3
"""Compiled hot loops: per-video collision-graph weights and threshold crossings."""
import numpy as np

from libc.math cimport exp, sqrt


def video_edge_weights(const double[:, :, ::1] points, const unsigned char[:, ::1] mask,
                       double alpha_d, double alpha_m, double eps,
                       const double[::1] scale, bint squared):
    cdef Py_ssize_t T = points.shape[0], N = points.shape[1]
    out = np.zeros((T, N, N), dtype=np.float64)
    vel_arr = np.zeros((N, 3), dtype=np.float64)
    q_arr = np.zeros((N, N), dtype=np.float64)
    cdef double[:, :, ::1] W = out
    cdef double[:, ::1] unit = vel_arr
    cdef double[:, ::1] q = q_arr
    cdef Py_ssize_t t, i, j, k, present
    cdef double norm, diff, d, m, qmax, total, v

    for t in range(T):
        present = 0
        for i in range(N):
            if mask[t, i]:
                present += 1
            for k in range(3):
                unit[i, k] = 0.0
            if t > 0 and mask[t, i] and mask[t - 1, i]:
                norm = 0.0
                for k in range(3):
                    v = points[t, i, k] - points[t - 1, i, k]
                    unit[i, k] = v
                    norm += v * v
                norm = sqrt(norm) + eps
                for k in range(3):
                    unit[i, k] = unit[i, k] / norm
        if present < 2:
            continue

        qmax = -1e308
        for i in range(N):
            if not mask[t, i]:
                continue
            for j in range(N):
                if j == i or not mask[t, j]:
                    continue
                d = 0.0
                m = 0.0
                for k in range(3):
                    diff = (points[t, i, k] - points[t, j, k]) * scale[k]
                    d += diff * diff
                    diff = unit[i, k] - unit[j, k]
                    m += diff * diff
                if not squared:
                    d = sqrt(d)
                q[i, j] = alpha_d * d + alpha_m * sqrt(m)
                if q[i, j] > qmax:
                    qmax = q[i, j]

        total = 0.0
        for i in range(N):
            if not mask[t, i]:
                continue
            for j in range(N):
                if j == i or not mask[t, j]:
                    continue
                v = exp(q[i, j] - qmax)
                W[t, i, j] = v
                total += v
        for i in range(N):
            for j in range(N):
                W[t, i, j] = W[t, i, j] / total
    return out


def first_crossings(const double[:, ::1] scores, const double[::1] thresholds):
    cdef Py_ssize_t V = scores.shape[0], T = scores.shape[1], K = thresholds.shape[0]
    out = np.zeros((V, K), dtype=np.int64)
    cdef long long[:, ::1] res = out
    cdef Py_ssize_t v, k, t
    cdef double th
    for v in range(V):
        for k in range(K):
            th = thresholds[k]
            for t in range(T):
                if scores[v, t] >= th:
                    res[v, k] = t + 1
                    break
    return out
