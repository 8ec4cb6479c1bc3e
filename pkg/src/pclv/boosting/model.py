"""Second-order gradient-boosted trees with exact greedy split finding."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
OBJECTIVES = ("reg:squarederror", "binary:logistic")


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GbtParams:
    eta: float = 0.1
    max_depth: int = 6
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    subsample: float = 1.0
    colsample: float = 1.0
    n_rounds: int = 200
    base_score: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if not 0 < self.subsample <= 1:
            raise ValueError(f"subsample must be in (0, 1], got {self.subsample}")
        if not 0 < self.colsample <= 1:
            raise ValueError(f"colsample must be in (0, 1], got {self.colsample}")
        if self.reg_lambda < 0:
            raise ValueError("lambda must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.max_depth < 0 or self.n_rounds < 0:
            raise ValueError("max_depth and n_rounds must be >= 0")
        if self.min_child_weight < 0:
            raise ValueError("min_child_weight must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GbtParams":
        d = dict(d)
        if "lambda" in d:
            d["reg_lambda"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GbtParams fields: {sorted(unknown)}")
        if "max_depth" in d:
            d["max_depth"] = int(d["max_depth"])
        if "n_rounds" in d:
            d["n_rounds"] = int(d["n_rounds"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("reg_lambda")
        return d

    def with_(self, **kw) -> "GbtParams":
        return replace(self, **kw)


@dataclass
class Tree:
    """Flat node arrays; ``feature[k] == -1`` marks a leaf with weight ``value[k]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray = field(default=None)  # split gain per internal node (nan at leaves)
    depth: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.feature)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max()) if self.depth is not None and len(self.depth) else 0

    def leaves(self, X: np.ndarray) -> np.ndarray:
        return _kernels.leaf_index(np.ascontiguousarray(X, dtype=np.float64), 0, self.feature,
                                   self.threshold, self.left, self.right)

    def output(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaves(X)]

    def to_json(self) -> dict:
        nodes = []
        for k in range(len(self)):
            if self.feature[k] < 0:
                nodes.append({"id": k, "leaf": float(self.value[k])})
            else:
                nodes.append({
                    "id": k,
                    "feature": int(self.feature[k]),
                    "threshold": float(self.threshold[k]),
                    "missing_left": True,
                    "left": int(self.left[k]),
                    "right": int(self.right[k]),
                    "gain": float(self.gain[k]) if self.gain is not None else None,
                })
        return {"nodes": nodes}

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        nodes = d["nodes"]
        n = len(nodes)
        if n == 0:
            raise ModelFormatError("tree without nodes")
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        gain = np.full(n, np.nan)
        for k, node in enumerate(nodes):
            if node.get("id", k) != k:
                raise ModelFormatError("node ids must be consecutive from 0")
            if "leaf" in node:
                value[k] = float(node["leaf"])
            else:
                feature[k] = int(node["feature"])
                threshold[k] = float(node["threshold"])
                if not math.isfinite(threshold[k]):
                    raise ModelFormatError("non-finite threshold")
                left[k] = int(node["left"])
                right[k] = int(node["right"])
                if not (k < left[k] < n and k < right[k] < n):
                    raise ModelFormatError("child index out of range")
                if node.get("gain") is not None:
                    gain[k] = float(node["gain"])
        depth = np.zeros(n, dtype=np.int64)
        for k in range(n):
            if feature[k] >= 0:
                depth[left[k]] = depth[k] + 1
                depth[right[k]] = depth[k] + 1
        return cls(feature, threshold, left, right, value, gain, depth)


@dataclass
class GbtModel:
    objective: str
    base_score: float
    eta: float
    trees: list[Tree]
    n_features: int
    params: GbtParams | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        self._flat = None

    def _flatten(self):
        if self._flat is None:
            offsets, feats, thrs, lefts, rights, vals = [], [], [], [], [], []
            off = 0
            for t in self.trees:
                offsets.append(off)
                feats.append(t.feature)
                thrs.append(t.threshold)
                lefts.append(np.where(t.left >= 0, t.left + off, -1))
                rights.append(np.where(t.right >= 0, t.right + off, -1))
                vals.append(t.value)
                off += len(t)
            if self.trees:
                self._flat = (np.asarray(offsets, dtype=np.int64), np.concatenate(feats),
                              np.concatenate(thrs), np.concatenate(lefts), np.concatenate(rights),
                              np.concatenate(vals))
            else:
                z = np.zeros(1)
                zi = np.zeros(1, dtype=np.int64)
                self._flat = (np.zeros(0, dtype=np.int64), zi - 1, z, zi, zi, z)
        return self._flat

    def predict_margin(self, X) -> np.ndarray:
        X = _check_matrix(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"feature arity {X.shape[1]} does not match model ({self.n_features})")
        roots, feat, thr, left, right, val = self._flatten()
        return self.base_score + _kernels.predict_forest(X, roots, feat, thr, left, right, val, self.eta)

    def predict(self, X) -> np.ndarray:
        """Margins for regression, probabilities for the logistic objective."""
        m = self.predict_margin(X)
        if self.objective == "binary:logistic":
            return _sigmoid(m)
        return m

    def to_json(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "objective": self.objective,
            "base_score": float(self.base_score),
            "eta": float(self.eta),
            "n_features": int(self.n_features),
            "params": self.params.to_dict() if self.params is not None else None,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, d: dict) -> "GbtModel":
        if not isinstance(d, dict) or "version" not in d:
            raise ModelFormatError("missing version field")
        if str(d["version"]) != str(FORMAT_VERSION):
            raise ModelFormatError(
                f"model format version {d['version']!r} not supported by reader version {FORMAT_VERSION}")
        try:
            params = GbtParams.from_dict(d["params"]) if d.get("params") else None
            trees = [Tree.from_json(t) for t in d["trees"]]
            model = cls(d["objective"], float(d["base_score"]), float(d["eta"]), trees,
                        int(d["n_features"]), params)
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from None
        for t in trees:
            if np.any(t.feature >= model.n_features):
                raise ModelFormatError("split feature index exceeds n_features")
        return model


def _sigmoid(m):
    m = np.asarray(m, dtype=float)
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(m):
    return _sigmoid(m)


def _check_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-d matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or Inf")
    return X


def _gradients(objective, y, margin):
    if objective == "reg:squarederror":
        return margin - y, np.ones_like(y)
    p = _sigmoid(margin)
    return p - y, p * (1.0 - p)


def default_base_score(objective: str, y: np.ndarray) -> float:
    if objective == "reg:squarederror":
        return float(np.mean(y))
    prev = float(np.mean(y))
    prev = min(max(prev, 1e-6), 1 - 1e-6)
    return math.log(prev / (1 - prev))


def build_tree(X, order, sorted_vals, g, h, rows_mask, features, params: GbtParams) -> Tree:
    """Grow one tree level by level on the rows selected by ``rows_mask``."""
    n = X.shape[0]
    pos = np.where(rows_mask, 0, -1).astype(np.int32)
    feature, threshold, left, right, value, gain, depth = [], [], [], [], [], [], []

    def new_node(d):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        gain.append(np.nan)
        depth.append(d)
        return len(feature) - 1

    gh = np.ascontiguousarray(np.column_stack([g, h]))
    level_ids = [new_node(0)]
    d = 0
    lam = params.reg_lambda
    while level_ids:
        n_nodes = len(level_ids)
        G, H = _kernels.node_totals(pos, g, h, n_nodes)
        for p, k in enumerate(level_ids):
            value[k] = -G[p] / (H[p] + lam) if H[p] + lam > 0 else 0.0
        if d >= params.max_depth:
            break
        bgain, bfeat, bthr = _kernels.find_splits(
            sorted_vals, order, pos, gh, G, H, features, lam, params.gamma, params.min_child_weight)
        left_pos = np.full(n_nodes, -1, dtype=np.int32)
        right_pos = np.full(n_nodes, -1, dtype=np.int32)
        next_ids = []
        for p, k in enumerate(level_ids):
            if bfeat[p] < 0:
                continue
            feature[k] = int(bfeat[p])
            threshold[k] = float(bthr[p])
            gain[k] = float(bgain[p])
            value[k] = 0.0
            lk, rk = new_node(d + 1), new_node(d + 1)
            left[k], right[k] = lk, rk
            left_pos[p] = len(next_ids)
            next_ids.append(lk)
            right_pos[p] = len(next_ids)
            next_ids.append(rk)
        if not next_ids:
            break
        pos = _kernels.route_rows(X, pos, bfeat, bthr, left_pos, right_pos)
        level_ids = next_ids
        d += 1
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=float),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value, dtype=float), np.asarray(gain, dtype=float),
                np.asarray(depth, dtype=np.int64))


def train(X, y, params: GbtParams | None = None, objective: str = "reg:squarederror",
          callback=None) -> GbtModel:
    """Fit a boosted ensemble.

    ``callback(round, margins)`` is invoked after every round with the
    training-set margins; it exists for diagnostics such as loss traces.
    """
    params = params or GbtParams()
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    X = _check_matrix(X)
    n, n_feat = X.shape
    if n == 0:
        raise ValueError("cannot train on zero rows")
    if n < 2:
        raise ValueError("need at least 2 rows")
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError("targets must be a vector matching the feature rows")
    if objective == "binary:logistic":
        if y.dtype != bool and not np.all((y == 0) | (y == 1)):
            raise ValueError("logistic objective requires boolean targets")
    y = y.astype(np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain NaN or Inf")

    base = params.base_score if params.base_score is not None else default_base_score(objective, y)
    rng = np.random.default_rng(params.seed)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int32))
    sorted_vals = np.ascontiguousarray(np.take_along_axis(X, order.T.astype(np.int64), axis=0).T)
    margin = np.full(n, base, dtype=np.float64)
    all_features = np.arange(n_feat, dtype=np.int64)
    n_sub = max(1, int(round(params.subsample * n)))
    n_col = max(1, int(round(params.colsample * n_feat)))
    trees = []
    for it in range(params.n_rounds):
        g, h = _gradients(objective, y, margin)
        if n_sub < n:
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=n_sub, replace=False)] = True
        else:
            mask = np.ones(n, dtype=bool)
        feats = np.sort(rng.choice(n_feat, size=n_col, replace=False)) if n_col < n_feat else all_features
        tree = build_tree(X, order, sorted_vals, g, h, mask, feats, params)
        trees.append(tree)
        margin = margin + params.eta * tree.output(X)
        if callback is not None:
            callback(it, margin)
    logger.debug("trained %d trees (%s) on %d x %d", len(trees), objective, n, n_feat)
    return GbtModel(objective, float(base), float(params.eta), trees, n_feat, params)


def predict(model: GbtModel, X) -> np.ndarray:
    return model.predict(X)


def save_model(model: GbtModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(model.to_json(), separators=(",", ":")), encoding="utf-8")
    tmp.replace(path)
    return path


def load_model(path) -> GbtModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"cannot parse model file {path}: {exc}") from None
    return GbtModel.from_json(data)
