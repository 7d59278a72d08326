"""Time-series datasets: ODE integration, generators, splitting, scaling, JSON I/O."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .linalg import eigvals_dense

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DatasetError(ValueError):
    pass


@dataclass
class TimeSeries:
    id: str
    values: np.ndarray  # (T_d, M)
    params: dict = field(default_factory=dict)
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DatasetError(f"series {self.id!r}: values must be a non-empty T x M matrix")
        if not np.all(np.isfinite(self.values)):
            raise DatasetError(f"series {self.id!r}: non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class Dataset:
    series: list[TimeSeries]
    split: dict[str, str] = field(default_factory=dict)  # series id -> split name
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {s.values.shape[1] for s in self.series}
        if len(dims) > 1:
            raise DatasetError(f"series have differing measurement dimensions {sorted(dims)}")
        ids = [s.id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate series ids")

    @property
    def dim(self) -> int:
        return self.series[0].values.shape[1]

    def get(self, series_id: str) -> TimeSeries:
        for s in self.series:
            if s.id == series_id:
                return s
        raise KeyError(series_id)

    def subset(self, name: str) -> list[TimeSeries]:
        """Series assigned to split ``name``; the only accessor the trainers use."""
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.series if self.split.get(s.id) == name]


# ------------------------------------------------------------------- ODEs

def integrate_rk4(f: Callable[[np.ndarray], np.ndarray], y0, dt: float, steps: int) -> np.ndarray:
    """Classical RK4; row ``k`` of the result is the state after ``k + 1`` steps."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y = np.asarray(y0, dtype=np.float64).copy()
    out = np.empty((steps,) + y.shape)
    half = 0.5 * dt
    for k in range(steps):
        k1 = f(y)
        k2 = f(y + half * k1)
        k3 = f(y + half * k2)
        k4 = f(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"integrate_rk4: non-finite state at step {k + 1}")
        out[k] = y
    return out


def van_der_pol(a: float, b: float):
    def f(y):
        return np.array([y[1], a * y[1] * (1.0 - y[0] ** 2) - b * y[0]])
    return f


def lorenz(rho: float, beta: float, sigma: float = 10.0):
    def f(y):
        return np.array([sigma * (y[1] - y[0]),
                         y[0] * (rho - y[2]) - y[1],
                         y[0] * y[1] - beta * y[2]])
    return f


# -------------------------------------------------------------- generators

@dataclass
class GeneratorSpec:
    """What to generate. Unset fields fall back to the per-family defaults."""

    family: str  # synthetic-koopman | van-der-pol | lorenz | linear
    length: int = 200
    seed: int = 0
    dt: float | None = None
    substeps: int | None = None
    grid: dict = field(default_factory=dict)
    n_series: int | None = None
    noise: float = 0.0
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {"family", "length", "seed", "dt", "substeps", "grid", "n_series", "noise", "options"}
        unknown = set(d) - known - {"schema_version"}
        if unknown:
            raise DatasetError(f"unknown generator fields: {sorted(unknown)}")
        if "family" not in d:
            raise DatasetError("generator spec needs a 'family'")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {"family": self.family, "length": self.length, "seed": self.seed, "dt": self.dt,
                "substeps": self.substeps, "grid": dict(self.grid), "n_series": self.n_series,
                "noise": self.noise, "options": dict(self.options)}


def series_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per series so generation order never matters."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, index)))


def _shared_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, tag)))


def _add_noise(values: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise > 0:
        values = values + noise * rng.standard_normal(values.shape)
    return values


def _grid_pairs(spec: GeneratorSpec, names, ranges, counts):
    axes = []
    for name, (lo, hi), n in zip(names, ranges, counts):
        g = spec.grid.get(name, {})
        if isinstance(g, list):
            vals = np.asarray(g, dtype=float)
        else:
            lo, hi, n = g.get("min", lo), g.get("max", hi), g.get("n", n)
            if n < 1 or hi < lo:
                raise DatasetError(f"bad grid for {name}: min={lo} max={hi} n={n}")
            vals = np.linspace(lo, hi, int(n))
        axes.append(vals)
    mesh = np.meshgrid(*axes, indexing="ij")
    pairs = np.stack([m.ravel() for m in mesh], axis=1)
    if spec.n_series is not None:
        if spec.n_series > len(pairs):
            raise DatasetError(f"n_series={spec.n_series} exceeds grid size {len(pairs)}")
        pick = _shared_rng(spec.seed, 0).choice(len(pairs), spec.n_series, replace=False)
        pairs = pairs[np.sort(pick)]
    return pairs


def gen_van_der_pol(spec: GeneratorSpec) -> Dataset:
    """Van der Pol series over an (a, b) grid, initial state uniform in [-2, 2]^2."""
    dt = spec.dt or 0.05
    sub = spec.substeps or 1
    box = spec.options.get("init_box", 2.0)
    pairs = _grid_pairs(spec, ("a", "b"), ((0.1, 2.0), (0.1, 2.0)), (10, 10))
    series = []
    for i, (a, b) in enumerate(pairs):
        rng = series_rng(spec.seed, i)
        y0 = rng.uniform(-box, box, size=2)
        traj = integrate_rk4(van_der_pol(a, b), y0, dt / sub, spec.length * sub)[sub - 1::sub]
        vals = np.vstack([y0, traj[:-1]])
        series.append(TimeSeries(f"vdp-{i:04d}", _add_noise(vals, spec.noise, rng),
                                 {"a": float(a), "b": float(b), "y0": y0.tolist()}, dt))
    return Dataset(series, meta={"generator": spec.to_dict() | {"dt": dt, "substeps": sub},
                                 "name": "van-der-pol"})


def gen_lorenz(spec: GeneratorSpec) -> Dataset:
    """Lorenz series over a (rho, beta) grid with sigma fixed, started after a burn-in."""
    dt = spec.dt or 0.01
    sub = spec.substeps or 2
    sigma = spec.options.get("sigma", 10.0)
    burn = spec.options.get("burn_in", 500)
    pairs = _grid_pairs(spec, ("rho", "beta"), ((20.0, 80.0), (2.0, 5.0)), (30, 30))
    series = []
    for i, (rho, beta) in enumerate(pairs):
        rng = series_rng(spec.seed, i)
        y0 = rng.normal(0.0, 1.0, size=3) + np.array([1.0, 1.0, rho - 1.0])
        f = lorenz(rho, beta, sigma)
        if burn > 0:
            y0 = integrate_rk4(f, y0, dt, burn)[-1]
        traj = integrate_rk4(f, y0, dt, spec.length * sub)[sub - 1::sub]
        vals = np.vstack([y0, traj[:-1]])
        series.append(TimeSeries(f"lorenz-{i:04d}", _add_noise(vals, spec.noise, rng),
                                 {"rho": float(rho), "beta": float(beta), "sigma": float(sigma)},
                                 dt * sub))
    return Dataset(series, meta={"generator": spec.to_dict() | {"dt": dt, "substeps": sub},
                                 "name": "lorenz"})


def sample_transition(rng: np.random.Generator, dim: int = 2, max_radius: float = 1.05,
                      std: float | None = None, min_radius: float = 0.0) -> np.ndarray:
    """Gaussian matrix rescaled so its spectral radius lies in ``[min_radius, max_radius]``."""
    std = 1.0 / np.sqrt(dim) if std is None else std
    a = rng.normal(0.0, std, size=(dim, dim))
    radius = max(abs(z) for z in eigvals_dense(a))
    if radius > max_radius:
        a *= max_radius / radius
    elif 0 < radius < min_radius:
        a *= min_radius / radius
    return a


class MeasurementNet:
    """Random tanh network mapping (embedding, representation) to measurements."""

    def __init__(self, rng: np.random.Generator, n_in: int, width: int, n_out: int,
                 gain: float = 1.0):
        self.weights = []
        sizes = [n_in, width, width, n_out]
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append((rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)),
                                 rng.normal(0.0, 0.1, size=fan_out)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for k, (w, b) in enumerate(self.weights):
            x = x @ w + b
            if k < len(self.weights) - 1:
                x = np.tanh(x)
        return x


def synthetic_series(a: np.ndarray, rep: np.ndarray, g0: np.ndarray, net: MeasurementNet,
                     length: int) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings ``g_t = A^t g0`` and measurements ``net([g_t, rep])``."""
    g = np.empty((length, a.shape[0]))
    g[0] = g0
    for t in range(1, length):
        g[t] = a @ g[t - 1]
    x = np.hstack([g, np.broadcast_to(rep, (length, rep.size))])
    return g, net(x)


def gen_synthetic_koopman(spec: GeneratorSpec) -> Dataset:
    """Linear 2-d Koopman dynamics pushed through one shared random network.

    Each series gets its own transition matrix and representation vector;
    the true eigenvalues are stored in the series params.
    """
    opts = spec.options
    d = opts.get("koopman_dim", 2)
    r = opts.get("rep_dim", 2)
    m = opts.get("measure_dim", 10)
    width = opts.get("width", 32)
    max_radius = opts.get("max_radius", 1.05)
    min_radius = opts.get("min_radius", 0.0)
    std = opts.get("transition_std", 1.0 / np.sqrt(d))
    n = spec.n_series or 81
    regimes = opts.get("regimes")  # optional fixed list of representation vectors
    gain = opts.get("gain", 1.0)
    net = MeasurementNet(_shared_rng(spec.seed, 1), d + r, width, m, gain)
    series = []
    for i in range(n):
        rng = series_rng(spec.seed, i)
        a = sample_transition(rng, d, max_radius, std, min_radius)
        if regimes:
            rep = np.asarray(regimes[i % len(regimes)], dtype=float)
        else:
            rep = rng.normal(0.0, 1.0, size=r)
        g0 = rng.normal(0.0, 1.0, size=d)
        _, y = synthetic_series(a, rep, g0, net, spec.length)
        lams = eigvals_dense(a)
        series.append(TimeSeries(
            f"syn-{i:04d}", _add_noise(y, spec.noise, rng),
            {"A": a.tolist(), "rep": rep.tolist(), "g0": g0.tolist(),
             "eigenvalues": [[z.real, z.imag] for z in lams],
             **({"regime": i % len(regimes)} if regimes else {})},
            spec.dt or 1.0))
    meta = {"generator": spec.to_dict(), "name": "synthetic",
            "network": {"activation": "tanh", "width": width, "layers": 3, "gain": gain}}
    return Dataset(series, meta=meta)


def gen_linear(spec: GeneratorSpec) -> Dataset:
    """Toy family y_{t+1} = A y_t observed directly (M = D), one A per series."""
    opts = spec.options
    d = opts.get("dim", 2)
    max_radius = opts.get("max_radius", 0.99)
    min_radius = opts.get("min_radius", 0.8)
    n = spec.n_series or 30
    series = []
    for i in range(n):
        rng = series_rng(spec.seed, i)
        a = sample_transition(rng, d, max_radius, 1.0 / np.sqrt(d), min_radius)
        y0 = rng.normal(0.0, 1.0, size=d)
        y = np.empty((spec.length, d))
        y[0] = y0
        for t in range(1, spec.length):
            y[t] = a @ y[t - 1]
        lams = eigvals_dense(a)
        series.append(TimeSeries(
            f"lin-{i:04d}", _add_noise(y, spec.noise, rng),
            {"A": a.tolist(), "y0": y0.tolist(), "eigenvalues": [[z.real, z.imag] for z in lams]},
            spec.dt or 1.0))
    return Dataset(series, meta={"generator": spec.to_dict(), "name": "linear"})


def generate(spec: GeneratorSpec) -> Dataset:
    gens = {"van-der-pol": gen_van_der_pol, "lorenz": gen_lorenz,
            "synthetic-koopman": gen_synthetic_koopman, "linear": gen_linear}
    if spec.family not in gens:
        raise DatasetError(f"unknown family {spec.family!r}; expected one of {sorted(gens)}")
    return gens[spec.family](spec)


def true_eigenvalues(s: TimeSeries) -> list[complex] | None:
    ev = s.params.get("eigenvalues")
    return None if ev is None else [complex(re, im) for re, im in ev]


# ------------------------------------------------------------- split/scale

def split_dataset(ds: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> Dataset:
    """Random train/valid/test assignment; counts are rounded and the remainder goes to test."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError("fractions must be three numbers summing to 1")
    n = len(ds.series)
    if n < 3:
        raise DatasetError(f"need at least 3 series to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_valid = min(n_valid, n - n_train)
    split = {}
    for rank, idx in enumerate(perm):
        name = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
        split[ds.series[idx].id] = name
    out = Dataset(ds.series, split, copy.deepcopy(ds.meta))
    out.meta["split_seed"] = seed
    return out


@dataclass(frozen=True)
class Scaler:
    """Per-dimension affine map ``x -> (x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], float), np.asarray(d["scale"], float))

    @classmethod
    def identity(cls, dim: int) -> "Scaler":
        return cls(np.zeros(dim), np.ones(dim))


def fit_scaler(series: list[TimeSeries]) -> Scaler:
    if not series:
        raise DatasetError("cannot fit normalization on an empty training split")
    stacked = np.vstack([s.values for s in series])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    flat = std <= 1e-12 * np.maximum(np.abs(mean), 1.0)
    if flat.any():
        log.warning("zero-variance measurement dimensions %s; using scale 1", np.flatnonzero(flat).tolist())
        std = np.where(flat, 1.0, std)
    return Scaler(mean, std)


def normalize(ds: Dataset) -> tuple[Dataset, Scaler]:
    """Standardize every series with statistics of the training split only."""
    scaler = fit_scaler(ds.subset("train"))
    series = [TimeSeries(s.id, scaler.apply(s.values), s.params, s.dt) for s in ds.series]
    meta = copy.deepcopy(ds.meta)
    meta["normalization"] = scaler.to_dict()
    return Dataset(series, dict(ds.split), meta), scaler


def denormalize(ds: Dataset) -> Dataset:
    meta = copy.deepcopy(ds.meta)
    scaler = Scaler.from_dict(meta.pop("normalization"))
    series = [TimeSeries(s.id, scaler.invert(s.values), s.params, s.dt) for s in ds.series]
    return Dataset(series, dict(ds.split), meta)


# --------------------------------------------------------------------- I/O

def dataset_to_dict(ds: Dataset) -> dict:
    meta = copy.deepcopy(ds.meta)
    if ds.split:
        meta["split"] = {name: [s.id for s in ds.series if ds.split.get(s.id) == name] for name in SPLITS}
    return {"meta": meta,
            "series": [{"id": s.id, "params": s.params, "dt": s.dt, "values": s.values.tolist()}
                       for s in ds.series]}


def dataset_from_dict(doc: dict) -> Dataset:
    try:
        meta = copy.deepcopy(doc["meta"])
        raw = doc["series"]
        series = [TimeSeries(str(r["id"]), np.asarray(r["values"], dtype=np.float64),
                             r.get("params", {}), float(r.get("dt", 1.0))) for r in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed dataset document: {exc}") from exc
    if not series:
        raise DatasetError("dataset has no series")
    split = {}
    for name, ids in meta.pop("split", {}).items():
        for sid in ids:
            split[sid] = name
    return Dataset(series, split, meta)


def dumps_dataset(ds: Dataset) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(dataset_to_dict(ds), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def load_dataset(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from exc
    return dataset_from_dict(doc)
