"""Episodic meta-training: sample support/query windows, minimize query error, early-stop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph
from .data import TimeSeries
from .model import ModelParams, forward
from .optim import ParamStore, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 20
    T_Q: int = 20
    max_epochs: int = 10000
    episodes_per_epoch: int = 8
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 20
    valid_every: int = 50
    n_valid_episodes: int = 64
    seed: int = 0
    objective: str = "query"  # "query" (episodic) or "support" (self-prediction)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.T_Q < 1:
            raise ValueError("T_Q must be >= 1")
        if self.objective not in ("query", "support"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.episodes_per_epoch < 1 or self.max_epochs < 0:
            raise ValueError("episodes_per_epoch must be >= 1 and max_epochs >= 0")

    @property
    def window(self) -> int:
        """Rows one sample consumes from a series."""
        return self.T + self.T_Q if self.objective == "query" else self.T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class Episode:
    support: np.ndarray  # (T, M)
    query: np.ndarray    # (T_Q, M); empty for the self-prediction objective
    series_id: str
    offset: int          # 0-based row where the support starts


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    valid_epochs: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("inf")
    wall_time: float = 0.0

    def to_csv(self) -> str:
        valid = dict(zip(self.valid_epochs, self.valid_loss))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss"])
        for e, loss in zip(self.epochs, self.train_loss):
            w.writerow([e, repr(float(loss)), repr(float(valid[e])) if e in valid else ""])
        return buf.getvalue()


def check_lengths(series: list[TimeSeries], cfg: TrainConfig, what: str = "training") -> None:
    short = [s.id for s in series if s.length < cfg.window]
    if short:
        raise ValueError(f"{what} series shorter than the {cfg.window}-step window: {short[:5]}")


def sample_episode(series: list[TimeSeries], cfg: TrainConfig, rng: np.random.Generator) -> Episode:
    """Uniform series, then a uniform start over every offset that fits the window."""
    s = series[rng.integers(len(series))]
    start = int(rng.integers(s.length - cfg.window + 1))
    sup = s.values[start:start + cfg.T]
    if cfg.objective == "query":
        qry = s.values[start + cfg.T:start + cfg.T + cfg.T_Q]
    else:
        qry = s.values[start:start]
    return Episode(sup, qry, s.id, start)


def batch_loss(g: Graph, params: ModelParams, episodes: list[Episode], objective: str = "query"):
    """Mean episode loss on graph ``g``.

    ``query``: (1/T_Q) sum_tau ||y_hat - y||^2 over the query.
    ``support``: (1/T) sum_tau ||y_hat - y||^2 reconstructing the support from g_1.
    """
    sup = g.constant(np.stack([e.support for e in episodes]))
    B = len(episodes)
    if objective == "query":
        target = np.stack([e.query for e in episodes])
        fwd = forward(g, params, sup, target.shape[1])
    else:
        target = np.stack([e.support for e in episodes])
        fwd = forward(g, params, sup, target.shape[1], from_start=True)
    return g.sq_error(fwd.pred, g.constant(target), scale=1.0 / (B * target.shape[1]))


def episode_loss(params: ModelParams, ep: Episode, graph: Graph | None = None, objective: str = "query"):
    """Loss node of a single episode (on ``graph``) or its float value when no graph is given."""
    g = graph if graph is not None else Graph(training=False)
    node = batch_loss(g, params, [ep], objective)
    return node if graph is not None else float(g.value(node))


def validate(params: ModelParams, episodes: list[Episode], objective: str = "query",
             chunk: int = 64) -> float:
    """Dropout-off mean loss over a fixed episode list."""
    if not episodes:
        raise ValueError("validate: no episodes")
    total = 0.0
    for i in range(0, len(episodes), chunk):
        part = episodes[i:i + chunk]
        g = Graph(training=False)
        total += float(g.value(batch_loss(g, params, part, objective))) * len(part)
    return total / len(episodes)


def loss_and_grads(params: ModelParams, episodes: list[Episode], objective: str,
                   rng: np.random.Generator) -> tuple[float, dict]:
    g = Graph(training=True, rng=rng)
    loss = batch_loss(g, params, episodes, objective)
    grads = g.param_grads(loss)
    for name, t in params.tensors.items():
        grads.setdefault(name, np.zeros_like(t))
    return float(g.value(loss)), grads


def train_meta(params: ModelParams, train: list[TimeSeries], valid: list[TimeSeries],
               cfg: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Adam on batches of sampled episodes, keeping the best-validation parameters.

    ``train`` and ``valid`` are the only series the trainer ever reads.
    Returns a new :class:`ModelParams`; the input is not modified.
    """
    if not train:
        raise ValueError("no training series")
    if not valid:
        raise ValueError("no validation series")
    check_lengths(train, cfg)
    check_lengths(valid, cfg, "validation")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    drop_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    vrng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    valid_eps = [sample_episode(valid, cfg, vrng) for _ in range(cfg.n_valid_episodes)]

    work = params.copy()
    store = ParamStore(work.tensors)
    best = work.copy()
    tlog = TrainLog()
    t0 = time.perf_counter()
    tlog.best_valid = validate(work, valid_eps, cfg.objective)
    tlog.valid_epochs.append(0)
    tlog.valid_loss.append(tlog.best_valid)
    bad_checks = 0
    for epoch in range(1, cfg.max_epochs + 1):
        eps = [sample_episode(train, cfg, rng) for _ in range(cfg.episodes_per_epoch)]
        try:
            loss, grads = loss_and_grads(work, eps, cfg.objective, drop_rng)
        except FloatingPointError as exc:
            where = ", ".join(f"{e.series_id}@{e.offset}" for e in eps)
            raise TrainingError(f"non-finite loss at epoch {epoch} (episodes {where}): {exc}") from exc
        if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
            where = ", ".join(f"{e.series_id}@{e.offset}" for e in eps)
            raise TrainingError(f"non-finite loss at epoch {epoch} (episodes {where})")
        adam_step(store, grads, cfg.lr, cfg.betas, cfg.eps)
        tlog.epochs.append(epoch)
        tlog.train_loss.append(loss)
        if epoch % cfg.valid_every == 0 or epoch == cfg.max_epochs:
            vloss = validate(work, valid_eps, cfg.objective)
            tlog.valid_epochs.append(epoch)
            tlog.valid_loss.append(vloss)
            if vloss < tlog.best_valid:
                tlog.best_valid, tlog.best_epoch = vloss, epoch
                best = work.copy()
                bad_checks = 0
            else:
                bad_checks += 1
                if bad_checks >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, tlog.best_epoch)
                    break
    tlog.wall_time = time.perf_counter() - t0
    return best, tlog
