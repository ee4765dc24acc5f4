# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled seen/unseen sweep kernels; see ``gfsl._kernels_py`` for the contract."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, nextafter

cnp.import_array()

BACKEND = "cython"


def joint_correct_counts(gap, seen_ok, unseen_ok, gammas):
    cdef cnp.ndarray[cnp.float64_t] g = np.ascontiguousarray(gap, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t] so = np.ascontiguousarray(seen_ok, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t] uo = np.ascontiguousarray(unseen_ok, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t] gm = np.ascontiguousarray(gammas, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t] order = np.argsort(g, kind="stable").astype(np.int64)
    cdef cnp.ndarray[cnp.int64_t] gorder = np.argsort(gm, kind="stable").astype(np.int64)
    cdef Py_ssize_t n = g.shape[0], m = gm.shape[0], i = 0, j, k
    cdef long long total_s = 0, below_s = 0, below_u = 0
    cdef cnp.ndarray[cnp.int64_t] seen = np.zeros(m, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t] unseen = np.zeros(m, dtype=np.int64)
    cdef double gamma
    for k in range(n):
        total_s += so[k]
    for j in range(m):
        gamma = gm[gorder[j]]
        while i < n and g[order[i]] < gamma:
            below_s += so[order[i]]
            below_u += uo[order[i]]
            i += 1
        seen[gorder[j]] = total_s - below_s
        unseen[gorder[j]] = below_u
    return seen, unseen


def su_curve(gap, seen_ok, unseen_ok, n_seen, n_unseen):
    cdef cnp.ndarray[cnp.float64_t] g = np.ascontiguousarray(gap, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t] so = np.ascontiguousarray(seen_ok, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t] uo = np.ascontiguousarray(unseen_ok, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t] order = np.argsort(g, kind="stable").astype(np.int64)
    cdef Py_ssize_t n = g.shape[0], i, p = 1
    cdef double inv_s = 1.0 / n_seen if n_seen else 0.0
    cdef double inv_u = 1.0 / n_unseen if n_unseen else 0.0
    cdef long long cs = 0, cu = 0, total_s = 0
    cdef cnp.ndarray[cnp.float64_t] gam = np.empty(n + 1)
    cdef cnp.ndarray[cnp.float64_t] acc_s = np.empty(n + 1)
    cdef cnp.ndarray[cnp.float64_t] acc_u = np.empty(n + 1)
    for i in range(n):
        total_s += so[i]
    gam[0] = -INFINITY
    acc_s[0] = total_s * inv_s
    acc_u[0] = 0.0
    for i in range(n):
        cs += so[order[i]]
        cu += uo[order[i]]
        if i == n - 1 or g[order[i + 1]] != g[order[i]]:
            gam[p] = nextafter(g[order[i]], INFINITY)
            acc_s[p] = (total_s - cs) * inv_s
            acc_u[p] = cu * inv_u
            p += 1
    return gam[:p].copy(), acc_s[:p].copy(), acc_u[:p].copy()


def ausuc_area(gap, seen_ok, unseen_ok, n_seen, n_unseen):
    cdef cnp.ndarray[cnp.float64_t] acc_s
    cdef cnp.ndarray[cnp.float64_t] acc_u
    _, acc_s, acc_u = su_curve(gap, seen_ok, unseen_ok, n_seen, n_unseen)
    cdef Py_ssize_t i
    cdef double area = 0.0
    for i in range(1, acc_s.shape[0]):
        area += (acc_u[i] - acc_u[i - 1]) * (acc_s[i] + acc_s[i - 1]) * 0.5
    return area
