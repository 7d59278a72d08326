"""Command-line entry point: ``metakoopman <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines
from .data import (GeneratorSpec, Scaler, dumps_dataset, generate, load_dataset,
                   normalize, split_dataset)
from .experiment import (SCHEMA_VERSION, ExperimentConfig, records_to_csv, summary_to_csv,
                         sweep)
from .experiment import run_experiment
from .linalg import ConvergenceError
from .model import default_hyper, params_from_dict, params_to_dict, predict, spectrum
from .plot import overlay_svg, read_predictions, write_predictions
from .train import TrainConfig, TrainingError

log = logging.getLogger("metakoopman")


class CliError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a JSON object")
    return doc


def _config(path) -> dict:
    doc = _read_json(path)
    ver = doc.get("schema_version")
    if ver != SCHEMA_VERSION:
        raise CliError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {ver!r}")
    return doc


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from exc


def _dataset(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc


def _series(ds, sid):
    try:
        return ds.get(sid)
    except KeyError as exc:
        raise CliError(f"no series {sid!r} in dataset") from exc


# ----------------------------------------------------------------- commands

def cmd_generate(a) -> int:
    doc = _config(a.spec)
    doc.pop("schema_version")
    spec = GeneratorSpec.from_dict(doc)
    if a.seed is not None:
        spec.seed = a.seed
    _write(a.out, dumps_dataset(generate(spec)))
    return 0


TRAIN_FIELDS = {"schema_version", "method", "model", "train", "fractions", "normalize", "seed"}


def cmd_train(a) -> int:
    doc = _config(a.config)
    unknown = set(doc) - TRAIN_FIELDS
    if unknown:
        raise CliError(f"unknown train config fields {sorted(unknown)}")
    method = doc.get("method", "ours")
    if method not in baselines.NEURAL:
        raise CliError(f"method {method!r} is not trainable; choose from {sorted(baselines.NEURAL)}")
    seed = a.seed if a.seed is not None else int(doc.get("seed", 0))
    ds = _dataset(a.dataset)
    ds = split_dataset(ds, tuple(doc.get("fractions", (0.7, 0.1, 0.2))), seed)
    scaler = None
    if doc.get("normalize", True):
        ds, scaler = normalize(ds)
    topts = dict(doc.get("train", {}), seed=seed)
    if a.epochs is not None:
        topts["max_epochs"] = a.epochs
    try:
        cfg = TrainConfig.from_dict(topts)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad train options: {exc}") from exc
    hyper = default_hyper(ds.dim, **doc.get("model", {}))
    params, tlog = baselines.train_method(method, hyper, ds.subset("train"), ds.subset("valid"), cfg)
    ckpt = params_to_dict(params)
    if scaler is not None:
        ckpt["normalization"] = scaler.to_dict()
    _write(a.checkpoint, json.dumps(ckpt, sort_keys=True, separators=(",", ":")) + "\n")
    _write(a.log, tlog.to_csv())
    echo = {"schema_version": SCHEMA_VERSION, "method": method, "seed": seed, "dataset_sha256": hashlib.sha256(Path(a.dataset).read_bytes()).hexdigest(),
            "model": hyper, "train": cfg.to_dict(), "fractions": list(doc.get("fractions", (0.7, 0.1, 0.2))),
            "normalize": scaler is not None, "best_epoch": tlog.best_epoch, "best_valid": tlog.best_valid}
    _write(a.config_out or f"{a.checkpoint}.config.json", json.dumps(echo, sort_keys=True, indent=1) + "\n")
    return 0


def _model(a):
    """(kind, params or None, scaler) from --checkpoint or --method dmd."""
    if a.checkpoint is None:
        if a.method != "dmd":
            raise CliError("give --checkpoint, or --method dmd for the parameter-free baseline")
        return "dmd", None, None
    doc = _read_json(a.checkpoint)
    params = params_from_dict(doc)
    norm = doc.get("normalization")
    return params.kind, params, Scaler.from_dict(norm) if norm else None


def _support(a, series, need: int):
    if a.T < 2:
        raise CliError("--T must be >= 2")
    if series.length < need:
        raise CliError(f"series {series.id} has {series.length} steps; need {need}")
    return series.values[:a.T]


def cmd_predict(a) -> int:
    kind, params, scaler = _model(a)
    s = _series(_dataset(a.dataset), a.series_id)
    sup = _support(a, s, a.T + a.horizon)
    if params is None:
        _, pred, _ = baselines.dmd_fit_predict(sup, a.horizon, s.dt)
    else:
        if params.hyper["M"] != s.values.shape[1]:
            raise CliError(f"checkpoint expects {params.hyper['M']} dimensions, series has {s.values.shape[1]}")
        x = scaler.apply(sup) if scaler else sup
        pred = predict(params, x, a.horizon)
        pred = scaler.invert(pred) if scaler else pred
    steps = np.arange(a.T, a.T + a.horizon)
    names = [str(j) for j in range(s.values.shape[1])]
    _write(a.out, write_predictions(steps, names, s.values[a.T:a.T + a.horizon], pred))
    return 0


def cmd_spectrum(a) -> int:
    kind, params, scaler = _model(a)
    s = _series(_dataset(a.dataset), a.series_id)
    sup = _support(a, s, a.T)
    if params is None:
        _, _, spec = baselines.dmd_fit_predict(sup, 1, s.dt)
    else:
        spec = spectrum(params, scaler.apply(sup) if scaler else sup, s.dt)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "re", "im", "abs", "frequency", "growth_rate"])
    for i, (z, f, gr) in enumerate(zip(spec.eigenvalues, spec.frequencies, spec.growth_rates)):
        w.writerow([i, repr(float(z.re)), repr(float(z.im)), repr(float(abs(z))), repr(float(f)), repr(float(gr))])
    _write(a.out, buf.getvalue())
    return 0


def _experiment(a) -> ExperimentConfig:
    doc = _config(a.config)
    if a.seed is not None:
        doc["seed"] = a.seed
    if a.repetitions is not None:
        doc["repetitions"] = a.repetitions
    if a.epochs is not None:
        doc["train"] = dict(doc.get("train", {}), max_epochs=a.epochs)
    return ExperimentConfig.from_dict(doc)


def _report(a, records, summary) -> int:
    _write(a.records, records_to_csv(records))
    _write(a.summary, summary_to_csv(summary))
    failed = [r for r in records if r.error]
    for r in failed[:10]:
        print(f"failed: {r.method} rep {r.repetition} {r.series_id}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_evaluate(a) -> int:
    cfg = _experiment(a)
    records, summary = run_experiment(cfg, _dataset(a.dataset))
    return _report(a, records, summary)


def cmd_sweep(a) -> int:
    cfg = _experiment(a)
    try:
        values = [int(v) for v in a.values.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"--values must be comma-separated integers: {a.values!r}") from exc
    records, summary = sweep(cfg, _dataset(a.dataset), a.axis, values)
    return _report(a, records, summary)


def cmd_plot(a) -> int:
    try:
        text = Path(a.predictions).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {a.predictions}: {exc.strerror}") from exc
    try:
        steps, names, truth, pred = read_predictions(text)
    except ValueError as exc:
        raise CliError(f"{a.predictions}: {exc}") from exc
    _write(a.out, overlay_svg(steps, names, truth, pred, a.title or Path(a.predictions).stem))
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metakoopman", description="Meta-learned Koopman spectral analysis.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generator spec JSON -> dataset JSON")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train config JSON -> checkpoint + training log CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--log", required=True, help="TrainLog CSV path")
    t.add_argument("--config-out", help="echoed run config (default: <checkpoint>.config.json)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("predict", cmd_predict, "forecast one series -> predictions CSV"),
                              ("spectrum", cmd_spectrum, "eigenvalues of one series -> CSV")):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--checkpoint")
        q.add_argument("--method", choices=["dmd"])
        q.add_argument("--dataset", required=True)
        q.add_argument("--series-id", required=True)
        q.add_argument("--T", type=int, default=20, help="support length")
        if name == "predict":
            q.add_argument("--horizon", type=int, default=20)
        q.add_argument("--out", required=True)
        q.add_argument("--seed", type=int, help="accepted for uniformity; prediction is deterministic")
        q.set_defaults(func=func)

    for name, func in (("evaluate", cmd_evaluate), ("sweep", cmd_sweep)):
        e = sub.add_parser(name, help="experiment config JSON -> records CSV + summary CSV")
        e.add_argument("--config", required=True)
        e.add_argument("--dataset", required=True)
        e.add_argument("--records", required=True)
        e.add_argument("--summary", required=True)
        e.add_argument("--seed", type=int)
        e.add_argument("--repetitions", type=int)
        e.add_argument("--epochs", type=int)
        if name == "sweep":
            e.add_argument("--axis", required=True, choices=["support_length", "train_size"])
            e.add_argument("--values", required=True, help="comma-separated integers")
        e.set_defaults(func=func)

    pl = sub.add_parser("plot", help="predictions CSV -> SVG overlay")
    pl.add_argument("--predictions", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (CliError, ValueError, TrainingError, ConvergenceError) as exc:
        print(f"metakoopman {a.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
