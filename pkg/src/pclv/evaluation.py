"""Customer-level k-fold cross-validation and the reported metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import boosting
from .boosting import GbtParams
from .resampling import ResampleConfig, balance

logger = logging.getLogger(__name__)

CLASSIFICATION_METRICS = ("pr_auc", "accuracy", "sensitivity", "specificity", "precision")
REGRESSION_METRICS = ("rmse", "mae", "r2")


@dataclass(frozen=True)
class FoldPlan:
    k: int
    customers: np.ndarray
    assignments: np.ndarray
    seed: int

    def fold(self, i: int) -> np.ndarray:
        return self.customers[self.assignments == i]

    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def kfold(customers, k: int = 10, seed: int = 0) -> FoldPlan:
    """Random partition into k folds whose sizes differ by at most one."""
    customers = np.asarray(customers, dtype=np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(np.unique(customers)) != len(customers):
        raise ValueError("customer ids must be unique")
    if k > len(customers):
        raise ValueError(f"k={k} exceeds the number of customers ({len(customers)})")
    order = np.sort(customers)
    perm = np.random.default_rng(seed).permutation(len(order))
    assignments = np.empty(len(order), dtype=np.int64)
    assignments[perm] = np.arange(len(order)) % k
    return FoldPlan(k, order, assignments, seed)


def _labels_scores(labels, scores):
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be equal-length vectors")
    return y, s


def pr_auc(labels, scores) -> float:
    """Average precision, sum over score blocks of (R_n - R_{n-1}) * P_n.

    Equal scores form one block so the result does not depend on how ties
    are ordered.
    """
    y, s = _labels_scores(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("PR-AUC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def confusion_metrics(labels, probabilities, threshold: float = 0.5) -> dict:
    """Accuracy, sensitivity, specificity and precision; None where a denominator is zero."""
    y, p = _labels_scores(labels, probabilities)
    if len(y) == 0:
        raise ValueError("confusion metrics need at least one row")
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    pred = p >= threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))

    def ratio(a, b):
        return a / b if b else None

    return {
        "accuracy": (tp + tn) / len(y),
        "sensitivity": ratio(tp, tp + fn),
        "specificity": ratio(tn, tn + fp),
        "precision": ratio(tp, tp + fp),
    }


def _pair(targets, predictions):
    t = np.asarray(targets, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("need at least one element")
    return t, p


def rmse(targets, predictions) -> float:
    t, p = _pair(targets, predictions)
    return float(math.sqrt(np.mean((t - p) ** 2)))


def mae(targets, predictions) -> float:
    t, p = _pair(targets, predictions)
    return float(np.mean(np.abs(t - p)))


def r2(targets, predictions) -> float:
    t, p = _pair(targets, predictions)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


@dataclass
class MetricReport:
    k: int
    per_fold: dict[str, list]
    flags: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for name, values in self.per_fold.items():
            v = np.array([x for x in values if x is not None and math.isfinite(x)], dtype=float)
            if len(v):
                out[name] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                             "min": float(v.min()), "max": float(v.max()), "n_folds": int(len(v))}
            else:
                out[name] = {"mean": None, "sd": None, "min": None, "max": None, "n_folds": 0}
        return out

    def mean(self, name: str) -> float | None:
        return self.summary()[name]["mean"]

    def to_json(self) -> dict:
        return {"k": self.k, "folds": [{name: self.per_fold[name][i] for name in self.per_fold}
                                       for i in range(self.k)],
                "per_fold": self.per_fold, "summary": self.summary(), "flags": self.flags}

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


def gbt_learner(objective: str, params: GbtParams):
    def fit(X, y, seed):
        model = boosting.train(X, y, params.with_(seed=seed), objective)
        return model.predict
    return fit


@dataclass
class ModelRecipe:
    """How one fold is fitted: standardization, optional resampling, then the learner.

    ``learner(X, y, seed)`` returns a scoring function.  ``resampler`` defaults
    to :func:`pclv.resampling.balance` when ``resample`` is set.
    """

    objective: str = "reg:squarederror"
    params: GbtParams = field(default_factory=GbtParams)
    resample: ResampleConfig | None = None
    standardize: bool = True
    threshold: float = 0.5
    learner: Callable | None = None
    resampler: Callable | None = None

    def make_learner(self):
        return self.learner or gbt_learner(self.objective, self.params)


@dataclass
class CvResult:
    report: MetricReport
    oof: np.ndarray


def cross_validate(X, y, customers, recipe: ModelRecipe, plan: FoldPlan,
                   metrics=None) -> CvResult:
    """Out-of-fold evaluation with all fitting confined to the training split.

    Validation rows are standardized with training statistics and scored as
    they are; they never reach the resampler.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    customers = np.asarray(customers, dtype=np.int64)
    if len(X) != len(y) or len(X) != len(customers):
        raise ValueError("X, y and customers must align")
    if metrics is None:
        metrics = CLASSIFICATION_METRICS if recipe.objective == "binary:logistic" else REGRESSION_METRICS
    pos = np.searchsorted(plan.customers, customers)
    if np.any(pos >= len(plan.customers)) or np.any(plan.customers[np.minimum(pos, len(plan.customers) - 1)] != customers):
        raise ValueError("fold plan does not cover every customer")
    fold_of = plan.assignments[pos]
    learner = recipe.make_learner()
    resampler = recipe.resampler or balance
    per_fold = {m: [] for m in metrics}
    flags = []
    oof = np.full(len(X), np.nan)
    for f in range(plan.k):
        valid = fold_of == f
        train = ~valid
        X_tr, y_tr = X[train], y[train]
        X_va, y_va = X[valid], y[valid]
        if recipe.standardize:
            scaler = Standardizer.fit(X_tr)
            X_tr, X_va_in = scaler.transform(X_tr), scaler.transform(X_va)
        else:
            X_va_in = X_va
        if recipe.resample is not None:
            cfg = ResampleConfig.from_dict({**recipe.resample.to_dict(), "seed": recipe.resample.seed + f})
            X_tr, y_tr = resampler(X_tr, y_tr, cfg)
        score = learner(X_tr, y_tr, recipe.params.seed + f)
        pred = np.asarray(score(X_va_in), dtype=float)
        oof[valid] = pred
        values = _fold_metrics(y_va, pred, metrics, recipe.threshold)
        for m in metrics:
            if values[m] is None:
                flags.append(f"fold {f}: {m} undefined")
            per_fold[m].append(values[m])
        logger.info("fold %d/%d: %s", f + 1, plan.k,
                    ", ".join(f"{m}={v:.4f}" for m, v in values.items() if v is not None))
    return CvResult(MetricReport(plan.k, per_fold, flags), oof)


def _fold_metrics(y, pred, metrics, threshold) -> dict:
    out = {}
    if any(m in CLASSIFICATION_METRICS for m in metrics):
        yb = np.asarray(y, dtype=bool)
        conf = confusion_metrics(yb, pred, threshold)
        for m in metrics:
            if m == "pr_auc":
                out[m] = pr_auc(yb, pred) if 0 < yb.sum() < len(yb) else None
            elif m in conf:
                out[m] = conf[m]
    for m in metrics:
        if m == "rmse":
            out[m] = rmse(y, pred)
        elif m == "mae":
            out[m] = mae(y, pred)
        elif m == "r2":
            v = r2(y, pred)
            out[m] = v if math.isfinite(v) else None
    return out
