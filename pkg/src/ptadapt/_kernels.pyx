# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled inner loops for assignment and first-neighbour clustering.

Each function here has a numpy twin in ``_fallback.py``; the two must agree
exactly on every input (integer outputs) and to rounding on the duals.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve_square(double[:, ::1] cost):
    """Shortest-augmenting-path Hungarian solver on a square cost matrix.

    Returns ``(col_of_row, u, v)`` where ``u[i] + v[j] <= cost[i, j]`` for all
    pairs, with equality on the selected assignment.
    """
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef Py_ssize_t[::1] p = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(n + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    col_of_row = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] out = col_of_row
    for j in range(1, n + 1):
        out[p[j] - 1] = j - 1
    return col_of_row, np.asarray(u[1:]).copy(), np.asarray(v[1:]).copy()


def nearest_indices(double[:, ::1] dist):
    """Row-wise argmin excluding the diagonal; ties go to the smallest index."""
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double best_d, d
    result = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] out = result
    for i in range(n):
        best = -1
        best_d = INFINITY
        for j in range(n):
            if j == i:
                continue
            d = dist[i, j]
            if best < 0 or d < best_d:
                best = j
                best_d = d
        out[i] = best
    return result


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x):
    cdef Py_ssize_t root = x
    while parent[root] != root:
        root = parent[root]
    cdef Py_ssize_t nxt
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def link_components(Py_ssize_t[::1] nn):
    """Connected components of the graph with edges ``i -- nn[i]``.

    Labels are assigned in order of each component's smallest member.
    """
    cdef Py_ssize_t n = nn.shape[0]
    cdef Py_ssize_t i, a, b
    parent_arr = np.arange(n, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    for i in range(n):
        a = _find(parent, i)
        b = _find(parent, nn[i])
        if a != b:
            if a < b:
                parent[b] = a
            else:
                parent[a] = b
    labels_arr = np.full(n, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] labels = labels_arr
    cdef Py_ssize_t[::1] root_label = np.full(n, -1, dtype=np.intp)
    cdef Py_ssize_t k = 0
    for i in range(n):
        a = _find(parent, i)
        if root_label[a] < 0:
            root_label[a] = k
            k += 1
        labels[i] = root_label[a]
    return labels_arr
