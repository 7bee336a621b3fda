"""Numpy implementations of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


def solve_square(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    # column 0 is the virtual source; pad the cost with a zero column/row
    padded = np.empty((n + 1, n + 1))
    padded[0] = 0.0
    padded[:, 0] = 0.0
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            # argmin over free columns, first index wins like the scalar loop
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
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
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:].copy(), v[1:].copy()


def nearest_indices(dist):
    d = np.array(dist, dtype=np.float64)
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1).astype(np.intp)


def link_components(nn):
    nn = np.asarray(nn, dtype=np.intp)
    n = nn.shape[0]
    graph = coo_matrix((np.ones(n), (np.arange(n), nn)), shape=(n, n))
    _, raw = connected_components(graph, directed=True, connection="weak")
    # relabel by first appearance so both backends agree
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return remap[raw].astype(np.intp)
