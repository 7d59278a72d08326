"""The representation-conditioned Koopman model.

Pipeline for a batch of support windows ``Y`` with shape ``(B, T, M)``:

    r = BiLSTM(Y)                      (B, 2K)   averaged hidden states
    G = phi([Y, r])                    (B, T, D)
    K = G[:, 1:]^T pinv(G[:, :-1]^T)   (B, D, D)
    G_hat[j] = K^j g_T                 (B, H, D)
    Y_hat = psi([G_hat, r])            (B, H, M)

With ``use_rep`` off the BiLSTM is dropped and phi/psi see only y or g,
which gives the NDMD-style networks used by the baselines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .autodiff import Graph, NodeId, ShapeError
from .linalg import ComplexScalar

RIDGE_EPS = 1e-8
RIDGE_TRIGGER = 1e-8
KINDS = ("ours", "ndmd", "oursT", "oursN", "finetune")


class CheckpointError(ValueError):
    pass


def default_hyper(M: int, **overrides) -> dict:
    hyper = {"M": M, "K": 32, "D": 2, "hidden": 128, "layers": 4, "dropout": 0.1,
             "use_rep": True, "rcond": 1e-10}
    unknown = set(overrides) - set(hyper)
    if unknown:
        raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
    hyper.update(overrides)
    return hyper


@dataclass
class ModelParams:
    hyper: dict
    tensors: dict[str, np.ndarray]
    kind: str = "ours"

    def copy(self) -> "ModelParams":
        return ModelParams(dict(self.hyper), {k: v.copy() for k, v in self.tensors.items()}, self.kind)

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def param_shapes(hyper: dict) -> dict[str, tuple]:
    """Every tensor name and shape implied by ``hyper`` (insertion order is stable)."""
    M, K, D = hyper["M"], hyper["K"], hyper["D"]
    H, L = hyper["hidden"], hyper["layers"]
    rep = 2 * K if hyper["use_rep"] else 0
    shapes: dict[str, tuple] = {}
    if hyper["use_rep"]:
        for d in ("lstm_fwd", "lstm_bwd"):
            shapes[f"{d}.Wx"] = (M, 4 * K)
            shapes[f"{d}.Wh"] = (K, 4 * K)
            shapes[f"{d}.b"] = (4 * K,)
    for net, n_in, n_out in (("phi", M + rep, D), ("psi", D + rep, M)):
        sizes = [n_in] + [H] * (L - 1) + [n_out]
        for i in range(L):
            shapes[f"{net}.W{i}"] = (sizes[i], sizes[i + 1])
            shapes[f"{net}.b{i}"] = (sizes[i + 1],)
    return shapes


def init_params(hyper: dict, seed: int = 0, kind: str = "ours") -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights; LSTM forget-gate bias set to 1."""
    rng = np.random.default_rng(seed)
    K = hyper["K"]
    tensors = {}
    for name, shape in param_shapes(hyper).items():
        if name.startswith("lstm"):
            bound = 1.0 / np.sqrt(K)
        else:
            net, p = name.split(".")
            fan_in = param_shapes(hyper)[f"{net}.W{p[1:]}"][0]
            bound = 1.0 / np.sqrt(fan_in)
        t = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".b") and name.startswith("lstm"):
            t[K:2 * K] = 1.0
        tensors[name] = t
    return ModelParams(dict(hyper), tensors, kind)


# -------------------------------------------------------------- graph pieces

def _as_batch(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        return y[None]
    if y.ndim != 3:
        raise ShapeError(f"expected (T, M) or (B, T, M) series, got shape {y.shape}")
    return y


def _lstm(g: Graph, params: ModelParams, prefix: str, y: NodeId, reverse: bool) -> NodeId:
    """Mean over time of one LSTM direction's hidden states: (B, T, M) -> (B, K)."""
    t = params.tensors
    K = params.hyper["K"]
    B, T, _ = g.shape(y)
    wh = g.param(f"{prefix}.Wh", t[f"{prefix}.Wh"])
    xp = g.add(g.matmul(y, g.param(f"{prefix}.Wx", t[f"{prefix}.Wx"])),
               g.param(f"{prefix}.b", t[f"{prefix}.b"]))
    h = c = None
    hs = []
    for step in (range(T - 1, -1, -1) if reverse else range(T)):
        z = g.take(xp, 1, step)
        if h is not None:
            z = g.add(z, g.matmul(h, wh))
        act = g.sigmoid(z)
        i_gate = g.slice(act, -1, 0, K)
        f_gate = g.slice(act, -1, K, 2 * K)
        o_gate = g.slice(act, -1, 3 * K, 4 * K)
        cand = g.tanh(g.slice(z, -1, 2 * K, 3 * K))
        c = g.mul(i_gate, cand) if c is None else g.add(g.mul(f_gate, c), g.mul(i_gate, cand))
        h = g.mul(o_gate, g.tanh(c))
        hs.append(h)
    return g.mean(g.stack(hs, axis=1), axis=1)


def encode_series(g: Graph, params: ModelParams, y: NodeId) -> NodeId:
    """Time-series representation r_S = mean_t [h^F_t, h^B_t], shape (B, 2K)."""
    if g.shape(y)[-1] != params.hyper["M"]:
        raise ShapeError(f"encode_series: series dimension {g.shape(y)[-1]} != M={params.hyper['M']}")
    fwd = _lstm(g, params, "lstm_fwd", y, reverse=False)
    bwd = _lstm(g, params, "lstm_bwd", y, reverse=True)
    return g.concat([fwd, bwd], axis=-1)


def _mlp(g: Graph, params: ModelParams, net: str, x: NodeId) -> NodeId:
    L = params.hyper["layers"]
    rate = params.hyper["dropout"]
    for i in range(L):
        x = g.add(g.matmul(x, g.param(f"{net}.W{i}", params.tensors[f"{net}.W{i}"])),
                  g.param(f"{net}.b{i}", params.tensors[f"{net}.b{i}"]))
        if i < L - 1:
            x = g.dropout(g.relu(x), rate)
    return x


def _with_rep(g: Graph, x: NodeId, r: NodeId | None) -> NodeId:
    if r is None:
        return x
    B, T, _ = g.shape(x)
    rb = g.broadcast_to(g.reshape(r, (B, 1, g.shape(r)[-1])), (B, T, g.shape(r)[-1]))
    return g.concat([x, rb], axis=-1)


def embed(g: Graph, params: ModelParams, y: NodeId, r: NodeId | None) -> NodeId:
    """g_t = phi([y_t, r]) for every t: (B, T, M) -> (B, T, D)."""
    _check_rep(params, r)
    if g.shape(y)[-1] != params.hyper["M"]:
        raise ShapeError(f"embed: measurement dimension {g.shape(y)[-1]} != M={params.hyper['M']}")
    return _mlp(g, params, "phi", _with_rep(g, y, r))


def decode(g: Graph, params: ModelParams, g_hat: NodeId, r: NodeId | None) -> NodeId:
    """y_hat = psi([g_hat, r]): (B, H, D) -> (B, H, M)."""
    _check_rep(params, r)
    if g.shape(g_hat)[-1] != params.hyper["D"]:
        raise ShapeError(f"decode: embedding dimension {g.shape(g_hat)[-1]} != D={params.hyper['D']}")
    return _mlp(g, params, "psi", _with_rep(g, g_hat, r))


def _check_rep(params: ModelParams, r):
    if params.hyper["use_rep"] and r is None:
        raise ValueError("model uses a representation but none was given")
    if not params.hyper["use_rep"] and r is not None:
        raise ValueError("model has no representation inputs")


def estimate_koopman(g: Graph, emb: NodeId, rcond: float = 1e-10) -> NodeId:
    """Least-squares K with G2 ~ K G1 from embeddings (B, T, D) -> (B, D, D).

    Falls back to the ridge form G2 G1^T (G1 G1^T + eps I)^-1 when G1 is
    numerically rank deficient.
    """
    B, T, D = g.shape(emb)
    if T < 2:
        raise ShapeError(f"estimate_koopman: need at least 2 time steps, got {T}")
    g_all = g.transpose(emb)                       # (B, D, T)
    g1 = g.slice(g_all, -1, 0, T - 1)
    g2 = g.slice(g_all, -1, 1, T)
    sv = linalg.svd_jacobi(g.value(g1))[1]
    rank_ok = sv[..., -1] >= RIDGE_TRIGGER * sv[..., 0] if D <= T - 1 else np.zeros(B, bool)
    if np.all(rank_ok):
        return g.matmul(g2, linalg.pinv(g, g1, rcond))
    g1t = g.transpose(g1)
    gram = g.add(g.matmul(g1, g1t), g.constant(RIDGE_EPS * np.eye(D)))
    return g.matmul(g.matmul(g2, g1t), g.inv(gram))


def rollout(g: Graph, k: NodeId, g_last: NodeId, horizon: int) -> NodeId:
    """Rows K^j g_last for j = 1..horizon: (B, D, D), (B, D) -> (B, horizon, D)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    B, D = g.shape(g_last)
    cur = g.reshape(g_last, (B, D, 1))
    steps = []
    for _ in range(horizon):
        cur = g.matmul(k, cur)
        steps.append(cur)
    return g.reshape(g.stack(steps, axis=1), (B, horizon, D))


@dataclass
class Forward:
    """Intermediate nodes of one model pass (kept for tests and diagnostics)."""

    rep: NodeId | None
    emb: NodeId
    koopman: NodeId
    pred: NodeId
    extra: dict = field(default_factory=dict)


def forward(g: Graph, params: ModelParams, support: NodeId, horizon: int,
            from_start: bool = False) -> Forward:
    """Run the full pipeline on the graph.

    ``from_start`` rolls out from g_1 and includes g_1 itself, giving the
    reconstruction of the support window (horizon must equal T then).
    """
    r = encode_series(g, params, support) if params.hyper["use_rep"] else None
    emb = embed(g, params, support, r)
    k = estimate_koopman(g, emb, params.hyper.get("rcond", 1e-10))
    if from_start:
        g0 = g.take(emb, 1, 0)
        B, D = g.shape(g0)
        first = g.reshape(g0, (B, 1, D))
        g_hat = first if horizon == 1 else g.concat([first, rollout(g, k, g0, horizon - 1)], axis=1)
    else:
        T = g.shape(emb)[1]
        g_hat = rollout(g, k, g.take(emb, 1, T - 1), horizon)
    return Forward(r, emb, k, decode(g, params, g_hat, r))


def predict(params: ModelParams, support: np.ndarray, horizon: int) -> np.ndarray:
    """Eval-mode forecast of the ``horizon`` steps after ``support``."""
    y = _as_batch(support)
    if y.shape[1] < 2:
        raise ShapeError("predict: support needs at least 2 time steps")
    g = Graph(training=False)
    out = g.value(forward(g, params, g.constant(y), horizon).pred)
    return out[0] if np.ndim(support) == 2 else out


def koopman_matrix(params: ModelParams, support: np.ndarray) -> np.ndarray:
    y = _as_batch(support)
    g = Graph(training=False)
    r = encode_series(g, params, g.constant(y)) if params.hyper["use_rep"] else None
    k = g.value(estimate_koopman(g, embed(g, params, g.constant(y), r), params.hyper.get("rcond", 1e-10)))
    return k[0] if np.ndim(support) == 2 else k


@dataclass
class SpectralResult:
    eigenvalues: list[ComplexScalar]
    modes: np.ndarray
    dt: float

    @property
    def frequencies(self) -> list[float]:
        return [float(np.angle(complex(z))) / self.dt for z in self.eigenvalues]

    @property
    def growth_rates(self) -> list[float]:
        return [float(np.log(abs(z))) / self.dt if abs(z) > 0 else float("-inf") for z in self.eigenvalues]


def spectral_result(k: np.ndarray, dt: float = 1.0) -> SpectralResult:
    lams, vecs = linalg.eig_dense(k)
    return SpectralResult(lams, vecs, dt)


def spectrum(params: ModelParams, support: np.ndarray, dt: float = 1.0) -> SpectralResult:
    return spectral_result(koopman_matrix(params, np.asarray(support)), dt)


# --------------------------------------------------------------- checkpoint

def params_to_dict(params: ModelParams) -> dict:
    return {"kind": params.kind, "hyper": params.hyper,
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in params.tensors.items()}}


def dumps_params(params: ModelParams) -> str:
    return json.dumps(params_to_dict(params), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def checkpoint_save(params: ModelParams, path) -> None:
    Path(path).write_text(dumps_params(params), encoding="utf-8")


def params_from_dict(doc: dict, expect_hyper: dict | None = None) -> ModelParams:
    try:
        hyper = dict(doc["hyper"])
        kind = doc.get("kind", "ours")
        shapes = param_shapes(hyper)
        tensors = {}
        for name, entry in doc["tensors"].items():
            arr = np.asarray(entry["data"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"tensor {name!r}: {arr.size} values for shape {shape}")
            tensors[name] = arr.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from exc
    if set(tensors) != set(shapes):
        raise CheckpointError(f"checkpoint tensors {sorted(tensors)} do not match hyper {sorted(shapes)}")
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    if expect_hyper is not None and expect_hyper != hyper:
        raise CheckpointError(f"hyperparameter mismatch: checkpoint {hyper} vs model {expect_hyper}")
    return ModelParams(hyper, tensors, kind)


def checkpoint_load(path, expect_hyper: dict | None = None) -> ModelParams:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    return params_from_dict(doc, expect_hyper)
