"""Comparison methods: DMD, NDMD, NDMD finetuning, and the OursT / OursN ablations.

All neural variants share :func:`metakoopman.train.train_meta`; they differ
only in whether the networks see the time-series representation
(``use_rep``) and which loss is minimized (``objective``):

    method   use_rep  objective
    ours     yes      query   (episodic)
    oursT    yes      support (self-prediction)
    oursN    no       query
    ndmd     no       support
"""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import linalg
from .autodiff import Graph
from .data import TimeSeries
from .model import ModelParams, SpectralResult, init_params, spectral_result
from .optim import ParamStore, adam_step
from .train import Episode, TrainConfig, TrainLog, batch_loss, loss_and_grads, train_meta

log = logging.getLogger(__name__)

NEURAL = {
    "ours": (True, "query"),
    "oursT": (True, "support"),
    "oursN": (False, "query"),
    "ndmd": (False, "support"),
}
METHODS = ("ours", "dmd", "ndmd", "finetune", "oursT", "oursN")


def dmd_fit_predict(support: np.ndarray, horizon: int, dt: float = 1.0,
                    rcond: float = 1e-10) -> tuple[np.ndarray, np.ndarray, SpectralResult]:
    """Exact DMD on raw measurements: K = Y2 pinv(Y1), rollout from the last row."""
    y = np.asarray(support, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ValueError("dmd: support must be a T x M matrix with T >= 2")
    y1, y2 = y[:-1].T, y[1:].T
    k = y2 @ linalg.pinv_value(y1, rcond)
    preds = np.empty((horizon, y.shape[1]))
    cur = y[-1]
    for j in range(horizon):
        cur = k @ cur
        preds[j] = cur
    return k, preds, spectral_result(k, dt)


def neural_hyper(hyper: dict, method: str) -> dict:
    use_rep, _ = NEURAL[method]
    return dict(hyper, use_rep=use_rep)


def train_method(method: str, hyper: dict, train: list[TimeSeries], valid: list[TimeSeries],
                 cfg: TrainConfig, init_seed: int | None = None) -> tuple[ModelParams, TrainLog]:
    """Train one of the neural variants from a fresh initialization."""
    if method not in NEURAL:
        raise ValueError(f"not a trainable method: {method!r}")
    use_rep, objective = NEURAL[method]
    h = dict(hyper, use_rep=use_rep)
    params = init_params(h, cfg.seed if init_seed is None else init_seed, kind=method)
    return train_meta(params, train, valid, replace(cfg, objective=objective))


def ndmd_train(hyper: dict, train, valid, cfg: TrainConfig) -> tuple[ModelParams, TrainLog]:
    return train_method("ndmd", hyper, train, valid, cfg)


def run_ablation(kind: str, hyper: dict, train, valid, cfg: TrainConfig) -> tuple[ModelParams, TrainLog]:
    if kind not in ("oursT", "oursN"):
        raise ValueError(f"unknown ablation {kind!r}")
    return train_method(kind, hyper, train, valid, cfg)


def support_loss(params: ModelParams, support: np.ndarray) -> float:
    g = Graph(training=False)
    ep = Episode(np.asarray(support, float), np.empty((0, support.shape[1])), "", 0)
    return float(g.value(batch_loss(g, params, [ep], "support")))


def finetune(params: ModelParams, support: np.ndarray, steps: int = 1000, lr: float = 1e-3,
             seed: int = 0, betas=(0.9, 0.999), eps: float = 1e-8) -> ModelParams:
    """Adapt a copy of trained NDMD weights to one support window.

    Minimizes the self-prediction loss of ``support`` with fresh Adam state.
    If a step produces non-finite values the last good parameters are returned.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    work = params.copy()
    work.kind = "finetune"
    store = ParamStore(work.tensors)
    rng = np.random.default_rng(seed)
    ep = Episode(np.asarray(support, float), np.empty((0, support.shape[1])), "target", 0)
    for step in range(steps):
        last_good = {k: v.copy() for k, v in work.tensors.items()}
        try:
            loss, grads = loss_and_grads(work, [ep], "support", rng)
        except FloatingPointError:
            log.warning("finetune: non-finite loss at step %d; keeping last good parameters", step)
            for k, v in last_good.items():
                work.tensors[k][...] = v
            break
        adam_step(store, grads, lr, betas, eps)
        if not all(np.all(np.isfinite(v)) for v in work.tensors.values()):
            log.warning("finetune: non-finite parameters at step %d; keeping last good parameters", step)
            for k, v in last_good.items():
                work.tensors[k][...] = v
            break
    return work
