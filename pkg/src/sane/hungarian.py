"""Linear sum assignment by the Hungarian method (shortest augmenting paths).

For square problems with several optimal assignments the lexicographically
smallest column vector is returned, so results do not depend on
floating-point accidents of the search order.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def _solve(cost: np.ndarray):
    """Return (row->col assignment, row potentials, col potentials) for n <= m."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols, u[1:], v[1:]


def _has_perfect_matching(adj, rows, cols_free):
    """Kuhn's augmenting-path test that ``rows`` can be matched into ``cols_free``."""
    match = {}

    def try_row(r, seen):
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or try_row(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(try_row(r, set()) for r in rows)


def _lexicographic(cost, cols, u, v):
    n = cost.shape[0]
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = reduced <= tol
    adj = [list(np.flatnonzero(tight[i])) for i in range(n)]
    if all(len(a) == 1 for a in adj):
        return cols
    out = np.empty(n, dtype=np.int64)
    free = set(range(cost.shape[1]))
    for i in range(n):
        for j in adj[i]:
            if j not in free:
                continue
            free.discard(j)
            if _has_perfect_matching(adj, range(i + 1, n), free):
                out[i] = j
                break
            free.add(j)
        else:  # numerical corner case: keep the solver's answer
            return cols
    return out


def linear_sum_assignment(cost, maximize: bool = False) -> np.ndarray:
    """Optimal column for each row of a rows <= cols cost matrix.

    Returns an int array ``cols`` with ``cols[i]`` the column assigned to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError("cost matrix must be 2-D")
    n, m = cost.shape
    if n > m:
        raise DimensionError("need rows <= cols")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    c = -cost if maximize else cost
    cols, u, v = _solve(c)
    if n != m:
        return cols
    return _lexicographic(c, cols, u, v)
