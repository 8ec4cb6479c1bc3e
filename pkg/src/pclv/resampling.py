"""Class-imbalance treatment: ADASYN oversampling and NearMiss-1 undersampling.

Both operate on plain Euclidean distance over the matrix they receive; the
caller is expected to pass features standardized on the training split.
The minority class is whichever label is rarer (ties: ``True``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class ResampleConfig:
    adasyn_beta: float = 1.0
    adasyn_k: int = 5
    nearmiss_k: int = 3
    nearmiss_target_ratio: float = 1.0
    steps: tuple[str, ...] = ("adasyn", "nearmiss")
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.adasyn_beta <= 1:
            raise ValueError(f"adasyn_beta must be in (0, 1], got {self.adasyn_beta}")
        if self.adasyn_k < 1 or self.nearmiss_k < 1:
            raise ValueError("neighbor counts must be >= 1")
        if self.nearmiss_target_ratio < 1.0:
            raise ValueError("nearmiss_target_ratio must be >= 1")
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if any(s not in ("adasyn", "nearmiss") for s in steps):
            raise ValueError(f"unknown resampling step in {steps}")

    @classmethod
    def from_dict(cls, d: dict) -> "ResampleConfig":
        d = dict(d)
        if "steps" in d:
            d["steps"] = tuple(d["steps"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steps"] = list(self.steps)
        return d


@njit(cache=True)
def _knn(query, ref, k, self_index):
    """k nearest rows of ``ref`` per query row by exact Euclidean distance.

    Ties go to the lower reference index.  ``self_index[q] >= 0`` excludes
    that reference row (the query itself).
    """
    nq = query.shape[0]
    nr = ref.shape[0]
    d = query.shape[1]
    out_idx = np.full((nq, k), -1, dtype=np.int64)
    out_dist = np.full((nq, k), np.inf)
    for q in range(nq):
        bi = out_idx[q]
        bd = out_dist[q]
        for r in range(nr):
            if r == self_index[q]:
                continue
            s = 0.0
            for j in range(d):
                diff = query[q, j] - ref[r, j]
                s += diff * diff
            if s < bd[k - 1]:
                pos = k - 1
                while pos > 0 and bd[pos - 1] > s:
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                    pos -= 1
                bd[pos] = s
                bi[pos] = r
    return out_idx, np.sqrt(out_dist)


def knn(query, ref, k, self_index=None):
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if self_index is None:
        self_index = np.full(len(query), -1, dtype=np.int64)
    return _knn(query, ref, int(k), np.asarray(self_index, dtype=np.int64))


def mean_nearest_distance(query, ref, k, chunk=1024):
    """Mean Euclidean distance from each query row to its k nearest reference rows.

    Only distance values are needed (not neighbor identities), so blocks of
    squared distances come from one matrix product each.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    rn = np.einsum("ij,ij->i", ref, ref)
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + rn[None, :] - 2.0 * (q @ ref.T)
        out[s:s + chunk] = _row_topk_mean(d2, k)
    return out


@njit(cache=True)
def _row_topk_mean(d2, k):
    n, m = d2.shape
    out = np.empty(n)
    best = np.empty(k)
    for i in range(n):
        best[:] = np.inf
        for j in range(m):
            v = d2[i, j]
            if v < best[k - 1]:
                pos = k - 1
                while pos > 0 and best[pos - 1] > v:
                    best[pos] = best[pos - 1]
                    pos -= 1
                best[pos] = v
        acc = 0.0
        for t in range(k):
            acc += np.sqrt(max(best[t], 0.0))
        out[i] = acc / k
    return out


def _split_classes(labels, minority=None):
    labels = np.asarray(labels, dtype=bool)
    n_true = int(labels.sum())
    n_false = len(labels) - n_true
    if n_true == 0 or n_false == 0:
        raise ValueError("resampling needs both classes present")
    if minority is None:
        minority = n_true <= n_false
    return labels, bool(minority)


def _check(features, labels):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(labels):
        raise ValueError("features must be a matrix with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or Inf")
    return X


@dataclass
class AdasynTrace:
    """Provenance of synthetic rows: seed row and the minority neighbor used."""

    seeds: np.ndarray
    partners: np.ndarray
    lam: np.ndarray
    weights: np.ndarray
    minority_neighbors: np.ndarray


def adasyn(features, labels, config: ResampleConfig | None = None, return_trace: bool = False):
    """Append synthetic minority rows, more of them where majority neighbors dominate.

    With G = (m_maj - m_min) * beta, each minority row i gets
    g_i = round(r_i / sum(r) * G) synthetic rows, r_i the majority fraction
    among its k nearest neighbors.  When no minority row has a majority
    neighbor the weights fall back to uniform.
    """
    config = config or ResampleConfig()
    labels, minority = _split_classes(labels)
    X = _check(features, labels)
    k = config.adasyn_k
    if k >= len(X):
        raise ValueError(f"adasyn_k={k} must be smaller than the number of samples ({len(X)})")
    rng = np.random.default_rng(config.seed)
    min_idx = np.flatnonzero(labels == minority)
    m_min = len(min_idx)
    m_maj = len(X) - m_min
    G = (m_maj - m_min) * config.adasyn_beta
    empty = np.zeros(0, dtype=np.int64)
    if G <= 0:
        trace = AdasynTrace(empty, empty, np.zeros(0), np.zeros(m_min), np.zeros((m_min, 0), dtype=np.int64))
        return (X.copy(), labels.copy(), trace) if return_trace else (X.copy(), labels.copy())

    nbr, _ = knn(X[min_idx], X, k, self_index=min_idx)
    delta = (labels[nbr] != minority).sum(axis=1)
    r = delta / k
    total = r.sum()
    weights = r / total if total > 0 else np.full(m_min, 1.0 / m_min)
    g = np.floor(weights * G + 0.5).astype(np.int64)

    k_min = min(k, m_min - 1)
    if k_min > 0:
        Xm = X[min_idx]
        min_nbr, _ = knn(Xm, Xm, k_min, self_index=np.arange(m_min))
    else:
        min_nbr = np.zeros((m_min, 0), dtype=np.int64)

    seeds = np.repeat(np.arange(m_min), g)
    if k_min > 0:
        pick = rng.integers(0, k_min, size=len(seeds))
        partners = min_nbr[seeds, pick]
    else:
        partners = seeds.copy()
    lam = rng.random(len(seeds))
    xs = X[min_idx[seeds]]
    xz = X[min_idx[partners]]
    synth = xs + lam[:, None] * (xz - xs)

    X_out = np.vstack([X, synth])
    y_out = np.concatenate([labels, np.full(len(synth), minority)])
    if return_trace:
        trace = AdasynTrace(min_idx[seeds], min_idx[partners], lam, weights, min_idx[min_nbr])
        return X_out, y_out, trace
    return X_out, y_out


def nearmiss(features, labels, config: ResampleConfig | None = None, return_index: bool = False,
             minority: bool | None = None):
    """NearMiss-1: keep the majority rows closest on average to their nearest minority rows.

    The majority class is trimmed to ceil(target_ratio * m_min); rows keep
    their original order and ties in mean distance go to the lower row index.
    ``minority`` pins the protected label (default: the rarer one).
    """
    config = config or ResampleConfig()
    labels, minority = _split_classes(labels, minority)
    X = _check(features, labels)
    min_idx = np.flatnonzero(labels == minority)
    maj_idx = np.flatnonzero(labels != minority)
    target = math.ceil(config.nearmiss_target_ratio * len(min_idx))
    if len(maj_idx) <= target:
        keep = np.arange(len(X))
    else:
        k = min(config.nearmiss_k, len(min_idx))
        score = mean_nearest_distance(X[maj_idx], X[min_idx], k)
        chosen = maj_idx[np.argsort(score, kind="stable")[:target]]
        keep = np.sort(np.concatenate([min_idx, chosen]))
    if return_index:
        return X[keep], labels[keep], keep
    return X[keep], labels[keep]


def balance(features, labels, config: ResampleConfig | None = None):
    """Run the configured steps in order (ADASYN then NearMiss by default)."""
    config = config or ResampleConfig()
    X = _check(features, labels)
    y = np.asarray(labels, dtype=bool)
    _, minority = _split_classes(y)
    for step in config.steps:
        if step == "adasyn":
            X, y = adasyn(X, y, config)
        else:
            X, y = nearmiss(X, y, config, minority=minority)
    return X, y
