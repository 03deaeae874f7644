"""Cosine cost matrices, Kuhn-Munkres assignment and frame-to-frame alignment."""
from __future__ import annotations

import numpy as np


def cosine_cost(prev, curr):
    """Cost ``1 - cos(prev_i, curr_j)``; rows with zero norm get cos = 0."""
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    np_ = np.linalg.norm(prev, axis=-1, keepdims=True)
    nc = np.linalg.norm(curr, axis=-1, keepdims=True)
    a = np.divide(prev, np_, out=np.zeros_like(prev), where=np_ > 0)
    b = np.divide(curr, nc, out=np.zeros_like(curr), where=nc > 0)
    return 1.0 - a @ b.T


def hungarian_min(cost):
    """Minimum-cost perfect matching on a square matrix.

    Returns ``perm`` with row ``i`` assigned to column ``perm[i]``. Shortest
    augmenting paths with row/column potentials, O(n^3). Columns are scanned
    in index order and only strict improvements replace a candidate, so ties
    resolve the same way on every run.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains NaN or infinite entries")
    n = cost.shape[0]
    # 1-based arrays; column 0 is the virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm


def assignment_cost(cost, perm):
    cost = np.asarray(cost)
    return float(cost[np.arange(len(perm)), perm].sum())


def align_sequence(tokens):
    """Reorder each frame's tokens to follow the previous aligned frame.

    ``tokens`` is [T, N, C]. Frame 0 is kept as is; frame t is reordered by
    the assignment between aligned frame t-1 and raw frame t. Returns the
    aligned cube and the permutations, with ``aligned[t] = tokens[t][perms[t]]``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    t_len, n = tokens.shape[:2]
    perms = np.empty((t_len, n), dtype=np.int64)
    perms[0] = np.arange(n)
    aligned = np.empty_like(tokens)
    aligned[0] = tokens[0]
    for t in range(1, t_len):
        perms[t] = hungarian_min(cosine_cost(aligned[t - 1], tokens[t]))
        aligned[t] = tokens[t][perms[t]]
    return aligned, perms
