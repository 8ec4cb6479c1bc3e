"""Bayesian hyperparameter search: Matern-5/2 Gaussian process plus expected improvement.

The objective is minimized.  Points live in the unit cube internally and are
mapped to parameter values per dimension (linear or log scale, optionally
rounded to integers).
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm, qmc

logger = logging.getLogger(__name__)

JITTER = 1e-6
MAX_JITTER = 1e-3
GRID_SIZE = 16
N_CANDIDATES = 1024


@dataclass(frozen=True)
class Dimension:
    name: str
    lower: float
    upper: float
    scale: str = "linear"
    integer: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower must be < upper")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"{self.name}: scale must be linear or log")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError(f"{self.name}: log scale requires lower > 0")

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.scale == "log":
            v = math.exp(math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower)))
        else:
            v = self.lower + u * (self.upper - self.lower)
        if self.integer:
            return int(min(max(round(v), math.ceil(self.lower)), math.floor(self.upper)))
        return min(max(v, self.lower), self.upper)


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __len__(self):
        return len(self.dimensions)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def decode(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dimensions, u)}


def default_space() -> SearchSpace:
    return SearchSpace((
        Dimension("eta", 0.01, 0.3, "log"),
        Dimension("max_depth", 2, 8, "linear", integer=True),
        Dimension("min_child_weight", 0.1, 10.0, "log"),
        Dimension("lambda", 0.1, 10.0, "log"),
        Dimension("gamma", 0.0, 5.0, "linear"),
        Dimension("subsample", 0.5, 1.0),
        Dimension("colsample", 0.5, 1.0),
        Dimension("n_rounds", 50, 500, "log", integer=True),
    ))


@dataclass(frozen=True)
class Observation:
    point: np.ndarray
    value: float


def expected_improvement(mu, sigma, f_best):
    """EI for minimization; zero wherever sigma is zero."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.isnan(mu).any() or np.isnan(sigma).any() or np.isnan(f_best):
        raise ValueError("expected_improvement got NaN input")
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    imp = f_best - mu
    safe = np.where(sigma > 0, sigma, 1.0)
    # beyond |z| = 40 the normal tails are below double resolution
    with np.errstate(over="ignore"):
        z = np.clip(imp / safe, -40.0, 40.0)
    ei = imp * norm.cdf(z) + safe * norm.pdf(z)
    ei = np.where(sigma > 0, np.maximum(ei, 0.0), 0.0)
    return float(ei) if ei.ndim == 0 else ei


def matern52(r, s, ell):
    a = math.sqrt(5.0) * r / ell
    return s * s * (1.0 + a + a * a / 3.0) * np.exp(-a)


def _pairwise(A, B):
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class GaussianProcess:
    """Fitted surrogate; targets are standardized internally."""

    X: np.ndarray
    y: np.ndarray
    s: float = 1.0
    ell: float = 1.0
    jitter: float = JITTER
    y_mean: float = 0.0
    y_scale: float = 1.0
    _chol: tuple = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    @classmethod
    def fit(cls, X, y) -> "GaussianProcess":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        if len(X) < 1:
            raise ValueError("need at least one observation")
        y_mean = float(y.mean())
        y_scale = float(y.std()) if len(y) > 1 and y.std() > 0 else 1.0
        z = (y - y_mean) / y_scale
        R = _pairwise(X, X)
        best = None
        dim = X.shape[1]
        for s in np.logspace(-1, 1, GRID_SIZE):
            for ell in np.logspace(-2, 0.5, GRID_SIZE) * math.sqrt(dim):
                try:
                    chol, jit = _factor(matern52(R, s, ell), s)
                except LinAlgError:
                    continue
                alpha = cho_solve(chol, z)
                logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
                ll = -0.5 * z @ alpha - 0.5 * logdet
                if best is None or ll > best[0]:
                    best = (ll, s, ell, chol, alpha, jit)
        if best is None:
            raise LinAlgError("kernel matrix not positive definite even at maximum jitter")
        _, s, ell, chol, alpha, jit = best
        return cls(X, y, s, ell, jit, y_mean, y_scale, chol, alpha)

    def posterior(self, Q):
        """Mean and standard deviation of the latent function, in the original units."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        Ks = matern52(_pairwise(Q, self.X), self.s, self.ell)
        mu = Ks @ self._alpha
        v = cho_solve(self._chol, Ks.T)
        var = self.s ** 2 - np.sum(Ks * v.T, axis=1)
        sigma = np.sqrt(np.maximum(var, 0.0))
        return self.y_mean + self.y_scale * mu, self.y_scale * sigma


def _factor(K, s):
    jit = JITTER
    while jit <= MAX_JITTER * (1 + 1e-12):
        Kj = K + (jit * s * s) * np.eye(len(K))
        if np.all(np.isfinite(Kj)):
            try:
                return cho_factor(Kj, lower=True), jit
            except LinAlgError:
                pass
        jit *= 10.0
    raise LinAlgError("kernel matrix not positive definite even at maximum jitter")


def gp_posterior(observations: list[Observation], query):
    """(mu, sigma) at ``query`` from a GP fitted to ``observations``."""
    if not observations:
        raise ValueError("need at least one observation")
    X = np.array([o.point for o in observations], dtype=float)
    y = np.array([o.value for o in observations], dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("observation values must be finite")
    gp = GaussianProcess.fit(X, y)
    mu, sigma = gp.posterior(np.atleast_2d(query))
    if np.ndim(query) == 1:
        return float(mu[0]), float(sigma[0])
    return mu, sigma


@dataclass
class HistoryEntry:
    iteration: int
    phase: str
    point: np.ndarray
    params: dict
    value: float
    incumbent: float


@dataclass
class OptimizeResult:
    best_params: dict
    best_value: float
    history: list[HistoryEntry]

    def incumbent_trace(self) -> list[float]:
        return [h.incumbent for h in self.history]


def optimize(eval_fn: Callable[[dict], float], space: SearchSpace | None = None, n_init: int = 10,
             n_iter: int = 40, seed: int = 0) -> OptimizeResult:
    """Scrambled-Sobol initial design followed by EI-maximizing proposals.

    NaN objectives are recorded as +inf and the search continues; the
    surrogate is fitted on the finite observations only.
    """
    space = space or default_space()
    if n_init < 2:
        raise ValueError("n_init must be >= 2")
    rng = np.random.default_rng(seed)
    sobol = qmc.Sobol(d=len(space), scramble=True, seed=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non-power-of-two sample counts
        init = sobol.random(n_init)

    history: list[HistoryEntry] = []
    best = math.inf
    best_params = None

    def record(u, phase):
        nonlocal best, best_params
        params = space.decode(u)
        value = float(eval_fn(params))
        if math.isnan(value):
            value = math.inf
        if value < best:
            best, best_params = value, params
        history.append(HistoryEntry(len(history), phase, np.array(u), params, value, best))
        logger.info("hpo %s #%d value=%.6g best=%.6g", phase, len(history) - 1, value, best)

    for u in init:
        record(u, "init")
    for _ in range(n_iter):
        finite = [h for h in history if math.isfinite(h.value)]
        candidates = rng.random((N_CANDIDATES, len(space)))
        if len(finite) < 1:
            record(candidates[0], "random")
            continue
        gp = GaussianProcess.fit(np.array([h.point for h in finite]), np.array([h.value for h in finite]))
        mu, sigma = gp.posterior(candidates)
        ei = expected_improvement(mu, sigma, min(h.value for h in finite))
        record(candidates[int(np.argmax(ei))], "ei")
    if best_params is None:
        best_params = history[0].params
    return OptimizeResult(best_params, best, history)


def write_history(result: OptimizeResult, path, space: SearchSpace) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "phase", *space.names, "objective"])
        for h in result.history:
            w.writerow([h.iteration, h.phase, *(repr(h.params[n]) for n in space.names), repr(h.value)])
    return path
