"""Repeated train/evaluate runs, sweeps, and the CSV record format."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import baselines
from .data import Dataset, Scaler, normalize, split_dataset, true_eigenvalues
from .metrics import eigenvalue_error, mean_se, rmse
from .model import ModelParams, default_hyper, predict, spectrum
from .train import TrainConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    methods: list = field(default_factory=lambda: ["ours", "dmd", "ndmd"])
    repetitions: int = 5
    seed: int = 0
    fractions: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    normalize: bool = True
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"max_epochs": 2000})
    eval: dict = field(default_factory=lambda: {"T": 20, "T_Q": 20})
    finetune: dict = field(default_factory=lambda: {"steps": 1000, "lr": 1e-3})
    name: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        bad = [m for m in self.methods if m not in baselines.METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected some of {list(baselines.METHODS)}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        self.train_config(0)  # validates the training options early
        if self.T < 2 or self.T_Q < 1:
            raise ConfigError("eval needs T >= 2 and T_Q >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def T(self) -> int:
        return int(self.eval.get("T", 20))

    @property
    def T_Q(self) -> int:
        return int(self.eval.get("T_Q", 20))

    def train_config(self, seed: int) -> TrainConfig:
        opts = dict(self.train)
        opts.setdefault("T", self.T)
        opts.setdefault("T_Q", self.T_Q)
        try:
            return TrainConfig.from_dict(dict(opts, seed=seed))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training options: {exc}") from exc

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def repetition_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(rep,)).generate_state(1)[0])


@dataclass
class MetricsRecord:
    method: str
    dataset: str
    repetition: int
    series_id: str
    rmse: float
    eigenvalue_error: float  # nan when the dataset has no ground-truth spectrum
    config_hash: str
    seed: int
    axis: str = ""
    value: str = ""
    error: str = ""

    def key(self):
        v = float(self.value) if self.value not in ("", None) else -math.inf
        return (self.axis, v, self.method, self.repetition, self.series_id)


RECORD_FIELDS = [f.name for f in fields(MetricsRecord)]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def records_to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in sorted(records, key=MetricsRecord.key):
        w.writerow([_fmt(getattr(r, name)) for name in RECORD_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        if list(row) != RECORD_FIELDS:
            raise ConfigError(f"unexpected record columns {list(row)}")
        out.append(MetricsRecord(
            method=row["method"], dataset=row["dataset"], repetition=int(row["repetition"]),
            series_id=row["series_id"],
            rmse=float(row["rmse"]) if row["rmse"] else math.nan,
            eigenvalue_error=float(row["eigenvalue_error"]) if row["eigenvalue_error"] else math.nan,
            config_hash=row["config_hash"], seed=int(row["seed"]), axis=row["axis"],
            value=row["value"], error=row["error"]))
    return out


def summarize(records: list[MetricsRecord]) -> list[dict]:
    """Mean and standard error per (axis value, method) over successful records."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.axis, r.value, r.method), []).append(r)
    rows = []
    for (axis, value, method), rs in sorted(groups.items(), key=lambda kv: kv[1][0].key()):
        ok = [r for r in rs if not r.error]
        rm, rse = mean_se([r.rmse for r in ok])
        eig = [r.eigenvalue_error for r in ok if not math.isnan(r.eigenvalue_error)]
        em, ese = mean_se(eig)
        rows.append({"axis": axis, "value": value, "method": method, "n": len(ok),
                     "n_failed": len(rs) - len(ok), "rmse_mean": rm, "rmse_se": rse,
                     "eig_mean": em, "eig_se": ese})
    return rows


SUMMARY_FIELDS = ["axis", "value", "method", "n", "n_failed", "rmse_mean", "rmse_se", "eig_mean", "eig_se"]


def summary_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def summary_from_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({k: (row[k] if k in ("axis", "value", "method") else
                         int(row[k]) if k in ("n", "n_failed") else
                         float(row[k]) if row[k] else math.nan) for k in SUMMARY_FIELDS})
    return rows


def per_repetition(records: list[MetricsRecord], metric: str = "rmse") -> dict:
    """Mean of ``metric`` per (method, repetition, value) over successful records."""
    acc: dict = {}
    for r in records:
        x = getattr(r, metric)
        if r.error or math.isnan(x):
            continue
        acc.setdefault((r.method, r.repetition, r.value), []).append(x)
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ------------------------------------------------------------------ runners

class _Prepared:
    """One repetition's split, scaling and per-method trained parameters."""

    def __init__(self, cfg: ExperimentConfig, ds: Dataset, rep: int):
        self.rep = rep
        self.seed = repetition_seed(cfg.seed, rep)
        split = split_dataset(ds, tuple(cfg.fractions), self.seed)
        if cfg.normalize:
            self.norm, self.scaler = normalize(split)
        else:
            self.norm, self.scaler = split, Scaler.identity(ds.dim)
        self.raw = split
        self.params: dict[str, ModelParams] = {}
        self.failures: dict[str, str] = {}


def _trained(cfg: ExperimentConfig, prep: _Prepared, method: str, train_ids: list[str] | None = None):
    key = "ndmd" if method == "finetune" else method
    if key == "dmd" or key in prep.params:
        return prep.params.get(key)
    if key in prep.failures:
        raise RuntimeError(prep.failures[key])
    train = prep.norm.subset("train")
    if train_ids is not None:
        keep = set(train_ids)
        train = [s for s in train if s.id in keep]
    hyper = default_hyper(prep.norm.dim, **cfg.model)
    try:
        params, _ = baselines.train_method(key, hyper, train, prep.norm.subset("valid"),
                                           cfg.train_config(prep.seed))
    except Exception as exc:  # recorded per method; the run continues
        prep.failures[key] = f"{type(exc).__name__}: {exc}"
        raise
    prep.params[key] = params
    return params


def _evaluate(cfg: ExperimentConfig, prep: _Prepared, method: str, T: int, T_Q: int,
              dataset_name: str, chash: str, axis: str = "", value: str = "") -> list[MetricsRecord]:
    test_norm = prep.norm.subset("test")
    test_raw = {s.id: s for s in prep.raw.subset("test")}
    out = []
    try:
        params = _trained(cfg, prep, method)
    except Exception as exc:
        msg = prep.failures.get("ndmd" if method == "finetune" else method, f"{type(exc).__name__}: {exc}")
        return [MetricsRecord(method, dataset_name, prep.rep, s.id, math.nan, math.nan, chash, prep.seed,
                              axis, value, msg) for s in test_norm]
    for idx, s in enumerate(test_norm):
        raw = test_raw[s.id]
        truth = raw.values[T:T + T_Q]
        try:
            if method == "dmd":
                _, pred, spec = baselines.dmd_fit_predict(raw.values[:T], T_Q, raw.dt)
            else:
                p = params
                if method == "finetune":
                    p = baselines.finetune(params, s.values[:T], int(cfg.finetune.get("steps", 1000)),
                                           float(cfg.finetune.get("lr", 1e-3)), seed=prep.seed + idx)
                pred = prep.scaler.invert(predict(p, s.values[:T], T_Q))
                spec = spectrum(p, s.values[:T], s.dt)
            truth_eigs = true_eigenvalues(s)
            eig_err = (eigenvalue_error([complex(z) for z in spec.eigenvalues], truth_eigs)
                       if truth_eigs else math.nan)
            out.append(MetricsRecord(method, dataset_name, prep.rep, s.id, rmse(pred, truth), eig_err,
                                     chash, prep.seed, axis, value))
        except Exception as exc:
            out.append(MetricsRecord(method, dataset_name, prep.rep, s.id, math.nan, math.nan, chash,
                                     prep.seed, axis, value, f"{type(exc).__name__}: {exc}"))
    return out


def _check_lengths(ds: Dataset, need: int, what: str):
    short = min(s.length for s in ds.series)
    if short < need:
        raise ConfigError(f"{what} needs series of at least {need} steps; shortest has {short}")


def run_experiment(cfg: ExperimentConfig, ds: Dataset) -> tuple[list[MetricsRecord], list[dict]]:
    """Repeated resplit/train/evaluate; returns per-series records and the summary."""
    _check_lengths(ds, cfg.T + cfg.T_Q, "evaluation")
    name = ds.meta.get("name", "dataset")
    chash = cfg.hash()
    records = []
    for rep in range(cfg.repetitions):
        prep = _Prepared(cfg, ds, rep)
        for method in cfg.methods:
            records.extend(_evaluate(cfg, prep, method, cfg.T, cfg.T_Q, name, chash))
    return records, summarize(records)


def sweep(cfg: ExperimentConfig, ds: Dataset, axis: str, values: list) -> tuple[list[MetricsRecord], list[dict]]:
    """Vary support length at evaluation time, or the number of training series.

    ``support_length`` reuses one trained model per repetition.
    ``train_size`` retrains on nested subsets of a fixed permutation of the
    training split, so smaller subsets are contained in larger ones.
    """
    if not values:
        raise ConfigError("sweep needs at least one value")
    name = ds.meta.get("name", "dataset")
    chash = cfg.hash()
    records: list[MetricsRecord] = []
    if axis == "support_length":
        values = [int(v) for v in values]
        if min(values) < 2:
            raise ConfigError("support lengths must be >= 2")
        _check_lengths(ds, max(values) + cfg.T_Q, "support_length sweep")
        _check_lengths(ds, cfg.T + cfg.T_Q, "training")
        for rep in range(cfg.repetitions):
            prep = _Prepared(cfg, ds, rep)
            for method in cfg.methods:
                for v in values:
                    records.extend(_evaluate(cfg, prep, method, v, cfg.T_Q, name, chash, axis, str(v)))
    elif axis == "train_size":
        values = [int(v) for v in values]
        _check_lengths(ds, cfg.T + cfg.T_Q, "evaluation")
        for rep in range(cfg.repetitions):
            base = _Prepared(cfg, ds, rep)
            train_ids = [s.id for s in base.norm.subset("train")]
            if max(values) > len(train_ids) or min(values) < 1:
                raise ConfigError(f"train sizes must be within 1..{len(train_ids)}")
            order = list(np.random.default_rng(base.seed).permutation(train_ids))
            for v in values:
                prep = _Prepared(cfg, ds, rep)
                for method in cfg.methods:
                    if method != "dmd":
                        try:
                            _trained(cfg, prep, method, order[:v])
                        except Exception:
                            pass
                    records.extend(_evaluate(cfg, prep, method, cfg.T, cfg.T_Q, name, chash, axis, str(v)))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected support_length or train_size")
    return records, summarize(records)


def nested_subsets(cfg: ExperimentConfig, ds: Dataset, rep: int, values: list[int]) -> list[list[str]]:
    """The training-id subsets a ``train_size`` sweep uses for repetition ``rep``."""
    base = _Prepared(cfg, ds, rep)
    order = list(np.random.default_rng(base.seed).permutation([s.id for s in base.norm.subset("train")]))
    return [order[:v] for v in values]
