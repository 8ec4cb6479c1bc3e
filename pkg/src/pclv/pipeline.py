"""End-to-end pipeline: configuration, training, scoring and reporting on files."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import boosting, hpo, segmentation, valuation
from .boosting import GbtModel, GbtParams
from .datagen import MarketConfig, generate_market, write_market
from .domain import N_PSC, ObSnapshots, Transactions, load_dataset, snapshot_at
from .evaluation import ModelRecipe, Standardizer, cross_validate, kfold
from .features import FeatureSpec, Ledger, feature_matrix, label_churn
from .resampling import ResampleConfig, balance

logger = logging.getLogger(__name__)

# module seed = global seed + offset
SEED_OFFSETS = {"market": 0, "folds": 1, "resample": 2, "churn": 3, "pcm": 4, "hpo": 5, "hpo_rows": 6}

DATA_FILES = ("transactions.csv", "system_exposure.csv", "ob_snapshot.csv")


class ConfigError(ValueError):
    """Invalid or unreadable configuration (usage error)."""


class MissingInputError(RuntimeError):
    """Expected input files are absent."""


@dataclass(frozen=True)
class HpoBudget:
    n_init: int = 8
    n_iter: int = 16
    folds: int = 3
    max_rows: int = 10_000

    def __post_init__(self):
        if self.n_init < 2 or self.n_iter < 0:
            raise ValueError("hpo needs n_init >= 2 and n_iter >= 0")
        if self.folds < 2 or self.max_rows < self.folds:
            raise ValueError("hpo needs folds >= 2 and max_rows >= folds")


def _churn_defaults() -> GbtParams:
    return GbtParams(eta=0.2, max_depth=4, n_rounds=100)


def _pcm_defaults() -> GbtParams:
    return GbtParams(eta=0.2, max_depth=3, n_rounds=300)


@dataclass(frozen=True)
class PipelineConfig:
    data_dir: Path = Path("data")
    model_dir: Path = Path("models")
    report_dir: Path = Path("reports")
    market: MarketConfig = field(default_factory=MarketConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    resample: ResampleConfig = field(default_factory=ResampleConfig)
    churn: GbtParams = field(default_factory=_churn_defaults)
    pcm: GbtParams = field(default_factory=_pcm_defaults)
    hpo: HpoBudget = field(default_factory=HpoBudget)
    discount_rate: float = valuation.DEFAULT_DISCOUNT
    folds: int = 10
    threshold: float = 0.5
    report_population: str = "ob"
    seed: int = 0

    def __post_init__(self):
        if self.discount_rate <= 0:
            raise ValueError(f"discount_rate must be > 0, got {self.discount_rate}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.report_population not in ("ob", "all"):
            raise ValueError(f"report_population must be 'ob' or 'all', got {self.report_population!r}")
        if not 0 <= self.seed < 2**64 - max(SEED_OFFSETS.values()):
            raise ValueError(f"seed out of range: {self.seed}")

    def module_seed(self, module: str) -> int:
        return self.seed + SEED_OFFSETS[module]

    def market_config(self) -> MarketConfig:
        return replace(self.market, seed=self.module_seed("market"))

    def resample_config(self) -> ResampleConfig:
        return replace(self.resample, seed=self.module_seed("resample"))

    def params(self, task: str) -> GbtParams:
        return getattr(self, task).with_(seed=self.module_seed(task))

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        """Build from a JSON object; relative and default paths resolve against ``base_dir``."""
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        blocks = {"market": MarketConfig.from_dict, "features": FeatureSpec.from_dict,
                  "resample": ResampleConfig.from_dict, "churn": GbtParams.from_dict,
                  "pcm": GbtParams.from_dict, "hpo": lambda b: HpoBudget(**b)}
        defaults = cls()
        kw = {}
        if base_dir is not None:
            for name in ("data_dir", "model_dir", "report_dir"):
                kw[name] = Path(base_dir) / getattr(defaults, name)
        for name, value in d.items():
            try:
                if name in blocks:
                    if not isinstance(value, dict):
                        raise ConfigError(f"{name}: expected an object")
                    if "seed" in value:
                        raise ConfigError(f"{name}.seed: module seeds derive from the top-level seed")
                    if name in ("churn", "pcm"):
                        value = {**getattr(defaults, name).to_dict(), **value}
                    kw[name] = blocks[name](value)
                elif name.endswith("_dir"):
                    p = Path(value)
                    kw[name] = p if p.is_absolute() or base_dir is None else base_dir / p
                else:
                    kw[name] = value
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "data_dir": str(self.data_dir), "model_dir": str(self.model_dir), "report_dir": str(self.report_dir),
            "market": {k: v for k, v in self.market.to_dict().items() if k != "seed"},
            "features": self.features.to_dict(),
            "resample": {k: v for k, v in self.resample.to_dict().items() if k != "seed"},
            "churn": {k: v for k, v in self.churn.to_dict().items() if k != "seed"},
            "pcm": {k: v for k, v in self.pcm.to_dict().items() if k != "seed"},
            "hpo": vars(self.hpo).copy(),
            "discount_rate": self.discount_rate, "folds": self.folds, "threshold": self.threshold,
            "report_population": self.report_population, "seed": self.seed,
        }


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return PipelineConfig.from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------- gen

def cmd_gen(config: PipelineConfig) -> dict:
    market = generate_market(config.market_config())
    return write_market(market, config.data_dir)


# ---------------------------------------------------------------- inputs

def _require(directory: Path, names) -> list[Path]:
    paths = [directory / n for n in names]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise MissingInputError("missing input files: " + ", ".join(missing))
    return paths


def load_transactions(config: PipelineConfig) -> Transactions:
    (path,) = _require(config.data_dir, ["transactions.csv"])
    return load_dataset(path, "transactions", horizon=config.market.horizon_months)


def churn_dataset(config: PipelineConfig, ledger: Ledger):
    """(customers, X, y) at the training observation month."""
    spec = config.features
    obs = ledger.horizon - 1 - spec.churn_horizon
    spec.check_horizon(obs, ledger.horizon)
    customers, X = feature_matrix(ledger, obs, spec)
    y = label_churn(ledger, obs, spec.churn_horizon)[ledger.rows(customers)]
    return customers, X, y


def pcm_dataset(config: PipelineConfig, tx: Transactions):
    """(customers, X, y) for customers active in the final month; X is the 16-slot layout."""
    (sys_path,) = _require(config.data_dir, ["system_exposure.csv"])
    system = load_dataset(sys_path, "system_exposure")
    snap = snapshot_at(tx, tx.horizon - 1)
    active = (snap.margin != 0) | (snap.exposure.sum(axis=1) != 0)
    customers = snap.customers[active]
    X = valuation.pcm_features(snap.exposure[active], system.matrix(customers))
    return customers, X, snap.margin[active]


# ---------------------------------------------------------------- train

def _hpo_objective(task: str, X, y, customers, config: PipelineConfig, recipe_kw: dict):
    budget = config.hpo
    rng = np.random.default_rng(config.module_seed("hpo_rows"))
    if len(X) > budget.max_rows:
        rows = np.sort(rng.choice(len(X), size=budget.max_rows, replace=False))
        X, y, customers = X[rows], y[rows], customers[rows]
    plan = kfold(customers, budget.folds, config.module_seed("folds"))
    base = config.params(task)

    def evaluate(p: dict) -> float:
        params = GbtParams.from_dict({**base.to_dict(), **p})
        result = cross_validate(X, y, customers, ModelRecipe(params=params, **recipe_kw), plan)
        if task == "churn":
            ap = result.report.mean("pr_auc")
            return float("nan") if ap is None else 1.0 - ap
        return result.report.mean("rmse")

    return evaluate


def _recipe_kw(task: str, config: PipelineConfig) -> dict:
    if task == "churn":
        return {"objective": "binary:logistic", "resample": config.resample_config(),
                "standardize": True, "threshold": config.threshold}
    return {"objective": "reg:squarederror", "resample": None, "standardize": False}


def cmd_train(config: PipelineConfig, task: str, skip_hpo: bool = False) -> dict:
    """Tune (optionally), cross-validate, refit on all rows and write model plus metrics."""
    if task not in ("churn", "pcm"):
        raise ConfigError(f"unknown task {task!r}")
    start = time.perf_counter()
    tx = load_transactions(config)
    if task == "churn":
        customers, X, y = churn_dataset(config, Ledger.from_transactions(tx))
        names = config.features.names
    else:
        customers, X, y = pcm_dataset(config, tx)
        names = [f"focal_{i}" for i in range(N_PSC)] + [f"system_{i}" for i in range(N_PSC)]
    model_dir = Path(config.model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    recipe_kw = _recipe_kw(task, config)
    history_path = model_dir / f"{task}_hpo_history.csv"
    params = config.params(task)
    if not skip_hpo:
        space = hpo.default_space()
        result = hpo.optimize(_hpo_objective(task, X, y, customers, config, recipe_kw), space,
                              config.hpo.n_init, config.hpo.n_iter, config.module_seed("hpo"))
        hpo.write_history(result, history_path, space)
        params = GbtParams.from_dict({**params.to_dict(), **result.best_params})
    elif history_path.exists():
        history_path.unlink()

    plan = kfold(customers, config.folds, config.module_seed("folds"))
    cv = cross_validate(X, y, customers, ModelRecipe(params=params, **recipe_kw), plan)

    X_fit, y_fit = X, y
    scaler = None
    if recipe_kw["standardize"]:
        scaler = Standardizer.fit(X)
        X_fit = scaler.transform(X)
    if recipe_kw["resample"] is not None:
        X_fit, y_fit = balance(X_fit, y_fit, recipe_kw["resample"])
    model = boosting.train(X_fit, y_fit, params, recipe_kw["objective"])
    boosting.save_model(model, model_dir / f"{task}_model.json")
    if scaler is not None:
        (model_dir / f"{task}_scaler.json").write_text(
            json.dumps({"mean": scaler.mean.tolist(), "scale": scaler.scale.tolist()}) + "\n", encoding="utf-8")

    metrics = {"task": task, "n_rows": int(len(X)), "features": list(names), "params": params.to_dict(),
               "hpo": not skip_hpo, **cv.report.to_json()}
    if task == "pcm":
        metrics["target_sd"] = float(np.std(y))
    (model_dir / f"{task}_metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    logger.info("train %s finished in %.1fs", task, time.perf_counter() - start)
    return metrics


# ---------------------------------------------------------------- score

def _load_scaler(path: Path) -> Standardizer:
    d = json.loads(path.read_text(encoding="utf-8"))
    return Standardizer(np.array(d["mean"], dtype=float), np.array(d["scale"], dtype=float))


def load_models(config: PipelineConfig) -> tuple[GbtModel, Standardizer, GbtModel]:
    churn_path, scaler_path, pcm_path = _require(
        Path(config.model_dir), ["churn_model.json", "churn_scaler.json", "pcm_model.json"])
    return boosting.load_model(churn_path), _load_scaler(scaler_path), boosting.load_model(pcm_path)


def score_records(config: PipelineConfig, tx: Transactions, system, ob: ObSnapshots,
                  churn_model: GbtModel, scaler: Standardizer, pcm_model: GbtModel):
    """Valuation records for every customer seen by the final month."""
    ledger = Ledger.from_transactions(tx)
    last = ledger.horizon - 1
    customers, X = feature_matrix(ledger, last, config.features)
    churn_prob = churn_model.predict(scaler.transform(X))
    snap = snapshot_at(tx, last)
    cm = snap.margin[np.searchsorted(snap.customers, customers)]

    pairs = ob.pairs()
    pairs = pairs[np.isin(pairs[:, 0], customers)]
    pcm = []
    if len(pairs):
        annual = valuation.predict_pcm_competitor(pcm_model, ob.pair_matrix(pairs), system.matrix(pairs[:, 0]))
        pcm = [valuation.AnnualPcm(int(c), int(n), float(v)) for (c, n), v in zip(pairs, annual)]
    return valuation.value_customers(customers, cm, churn_prob, pcm, config.discount_rate)


def cmd_score(config: PipelineConfig) -> Path:
    churn_model, scaler, pcm_model = load_models(config)
    tx = load_transactions(config)
    sys_path, ob_path = _require(config.data_dir, ["system_exposure.csv", "ob_snapshot.csv"])
    records = score_records(config, tx, load_dataset(sys_path, "system_exposure"),
                            load_dataset(ob_path, "ob_snapshot"), churn_model, scaler, pcm_model)
    return valuation.write_valuation(records, Path(config.report_dir) / "valuation.csv")


# ---------------------------------------------------------------- report

def cmd_report(config: PipelineConfig) -> dict:
    report_dir = Path(config.report_dir)
    (val_path,) = _require(report_dir, ["valuation.csv"])
    records = valuation.read_valuation(val_path)
    if config.report_population == "ob":
        (ob_path,) = _require(config.data_dir, ["ob_snapshot.csv"])
        consenting = set(load_dataset(ob_path, "ob_snapshot").customers.tolist())
        records = [r for r in records if r.customer in consenting]
    if len(records) < 3:
        raise ValueError(f"report needs at least 3 customers, got {len(records)}")
    report = segmentation.segment_records(records)
    segmentation.write_report_csv(report, report_dir / "report.csv")
    segmentation.write_report_json(report, report_dir / "report.json")
    segmentation.write_targets(records, report_dir / "targets.csv")
    return segmentation.report_json(report)
