"""Compiled inner loops for exact greedy split search and tree traversal.

All reductions run in a fixed order (presorted feature order for split
statistics, row order for node totals) so results do not depend on
scheduling.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def node_totals(pos, g, h, n_nodes):
    G = np.zeros(n_nodes)
    H = np.zeros(n_nodes)
    for r in range(pos.shape[0]):
        p = pos[r]
        if p >= 0:
            G[p] += g[r]
            H[p] += h[r]
    return G, H


@njit(cache=True)
def find_splits(sorted_vals, order, pos, gh, G_tot, H_tot, features, lam, gamma, min_child_weight):
    """Best split per active node.

    ``order[j]`` lists row indices sorted by feature ``j`` (stable) and
    ``sorted_vals[j]`` the matching feature values; ``gh`` interleaves
    gradient and hessian per row.  Candidate
    thresholds are midpoints between consecutive distinct values inside a
    node.  A candidate replaces the incumbent only on strictly larger gain, so
    ties resolve to the lowest feature index, then the lowest threshold.
    Nodes without a positive-gain candidate keep ``best_feat == -1``.
    """
    n_nodes = G_tot.shape[0]
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    GL = np.zeros(n_nodes)
    HL = np.zeros(n_nodes)
    last = np.zeros(n_nodes)
    seen = np.zeros(n_nodes, dtype=np.bool_)
    parent = np.empty(n_nodes)
    for p in range(n_nodes):
        parent[p] = G_tot[p] * G_tot[p] / (H_tot[p] + lam) if H_tot[p] + lam > 0 else 0.0
    n = order.shape[1]
    for jj in range(features.shape[0]):
        j = features[jj]
        GL[:] = 0.0
        HL[:] = 0.0
        seen[:] = False
        for t in range(n):
            r = order[j, t]
            p = pos[r]
            if p < 0:
                continue
            v = sorted_vals[j, t]
            if seen[p] and v > last[p]:
                hl = HL[p]
                hr = H_tot[p] - hl
                if hl >= min_child_weight and hr >= min_child_weight and hl + lam > 0 and hr + lam > 0:
                    gl = GL[p]
                    gr = G_tot[p] - gl
                    dl = hl + lam
                    dr = hr + lam
                    # division-free screen with slack; the exact gain below decides
                    target = 2.0 * (best_gain[p] + gamma) + parent[p]
                    if gl * gl * dr + gr * gr * dl < target * dl * dr * (1.0 - 1e-9):
                        GL[p] += gh[r, 0]
                        HL[p] += gh[r, 1]
                        last[p] = v
                        continue
                    gain = 0.5 * (gl * gl / dl + gr * gr / dr - parent[p]) - gamma
                    if gain > best_gain[p]:
                        best_gain[p] = gain
                        best_feat[p] = j
                        thr = last[p] + (v - last[p]) * 0.5
                        if thr <= last[p]:
                            thr = v
                        best_thr[p] = thr
            GL[p] += gh[r, 0]
            HL[p] += gh[r, 1]
            last[p] = v
            seen[p] = True
    return best_gain, best_feat, best_thr


@njit(cache=True)
def route_rows(X, pos, split_feat, split_thr, left_pos, right_pos):
    """Move each row to its child position at the next level (-1 once its node is final)."""
    out = np.empty_like(pos)
    for r in range(pos.shape[0]):
        p = pos[r]
        if p < 0:
            out[r] = -1
        elif split_feat[p] < 0:
            out[r] = -1
        elif X[r, split_feat[p]] < split_thr[p]:
            out[r] = left_pos[p]
        else:
            out[r] = right_pos[p]
    return out


@njit(cache=True)
def predict_forest(X, roots, feature, threshold, left, right, value, scale):
    """Sum of ``scale * leaf`` over all trees; nodes of all trees share flat arrays."""
    n = X.shape[0]
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for t in range(roots.shape[0]):
            k = roots[t]
            while feature[k] >= 0:
                if X[r, feature[k]] < threshold[k]:
                    k = left[k]
                else:
                    k = right[k]
            acc += scale * value[k]
        out[r] = acc
    return out


@njit(cache=True)
def leaf_index(X, root, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        k = root
        while feature[k] >= 0:
            if X[r, feature[k]] < threshold[k]:
                k = left[k]
            else:
                k = right[k]
        out[r] = k
    return out
