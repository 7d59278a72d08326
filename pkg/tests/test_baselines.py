import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metakoopman.baselines import METHODS, NEURAL, dmd_fit_predict, finetune, run_ablation, support_loss, train_method
from metakoopman.data import GeneratorSpec, generate, split_dataset
from metakoopman.linalg import eigvals_dense
from metakoopman.metrics import eigenvalue_error
from metakoopman.model import default_hyper, init_params, param_shapes
from metakoopman.train import TrainConfig


def linear_series(a, y0, n):
    y = [y0]
    for _ in range(n - 1):
        y.append(a @ y[-1])
    return np.array(y)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(2, 3))
def test_dmd_exact_on_linear_data(seed, M):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(M, M))
    a *= 0.95 / max(abs(z) for z in eigvals_dense(a))
    y = linear_series(a, rng.normal(size=M), 30)
    k, pred, spec = dmd_fit_predict(y[:20], 10)
    if np.linalg.svd(y[:19].T, compute_uv=False)[-1] < 1e-6:
        return  # ill-conditioned draw
    assert np.linalg.norm(k - a) < 1e-8
    assert np.allclose(pred, y[20:], atol=1e-8)
    assert eigenvalue_error(spec.eigenvalues, eigvals_dense(a)) < 1e-8


def test_dmd_constant_series():
    y = np.tile([2.0, -1.0], (10, 1))
    k, pred, spec = dmd_fit_predict(y, 5)
    assert np.allclose(pred, y[:5], atol=1e-12)
    assert np.allclose(k @ y[0], y[0], atol=1e-12)
    assert max(abs(z) for z in spec.eigenvalues) == pytest.approx(1.0, abs=1e-12)


def test_dmd_rotation_unit_modulus():
    th = 0.4
    r = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    _, _, spec = dmd_fit_predict(linear_series(r, np.array([1.0, 0.0]), 20), 1)
    assert all(abs(abs(z) - 1) < 1e-8 for z in spec.eigenvalues)


def test_dmd_rejects_short_support():
    with pytest.raises(ValueError):
        dmd_fit_predict(np.ones((1, 2)), 3)


def test_ndmd_architecture_arithmetic():
    h = default_hyper(3, K=4, hidden=8)
    full, plain = param_shapes(h), param_shapes(dict(h, use_rep=False))
    assert not any(k.startswith("lstm") for k in plain)
    count = lambda s: sum(int(np.prod(v)) for v in s.values())
    lstm = sum(int(np.prod(v)) for k, v in full.items() if k.startswith("lstm"))
    rep_cols = 2 * (2 * h["K"] * h["hidden"])  # representation input rows of phi.W0 and psi.W0
    assert count(plain) == count(full) - lstm - rep_cols


def test_ablation_shapes():
    h = default_hyper(3, K=4, hidden=8)
    ds = _toy()
    cfg = TrainConfig(T=5, T_Q=3, max_epochs=2)
    t, _ = run_ablation("oursT", h, ds.subset("train"), ds.subset("valid"), cfg)
    n, _ = run_ablation("oursN", h, ds.subset("train"), ds.subset("valid"), cfg)
    ours = init_params(h, 0)
    assert {k: v.shape for k, v in t.tensors.items()} == {k: v.shape for k, v in ours.tensors.items()}
    assert not any(k.startswith("lstm") for k in n.tensors)
    assert t.kind == "oursT" and n.kind == "oursN"
    with pytest.raises(ValueError):
        run_ablation("ours", h, [], [], cfg)


def _toy(n=8, M=3):
    ds = generate(GeneratorSpec("linear", length=20, n_series=n, options={"dim": M}))
    return split_dataset(ds, (0.5, 0.25, 0.25), seed=0)


def test_neural_methods_deterministic():
    ds = _toy()
    h = default_hyper(3, K=4, hidden=8)
    cfg = TrainConfig(T=5, T_Q=3, max_epochs=10, valid_every=5)
    for m in NEURAL:
        a, _ = train_method(m, h, ds.subset("train"), ds.subset("valid"), cfg)
        b, _ = train_method(m, h, ds.subset("train"), ds.subset("valid"), cfg)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_finetune_zero_lr_and_no_mutation(rng):
    p = init_params(default_hyper(2, K=4, hidden=8, use_rep=False), 0, kind="ndmd")
    before = {k: v.copy() for k, v in p.tensors.items()}
    sup = rng.normal(size=(8, 2))
    q = finetune(p, sup, steps=5, lr=0.0)
    assert all(np.array_equal(q.tensors[k], before[k]) for k in before)
    finetune(p, sup, steps=5, lr=1e-2)
    assert all(np.array_equal(p.tensors[k], before[k]) for k in before)


def test_finetune_reduces_support_loss():
    worse = 0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        p = init_params(default_hyper(2, K=4, hidden=16, use_rep=False), trial, kind="ndmd")
        sup = linear_series(0.9 * np.array([[0.8, -0.6], [0.6, 0.8]]), rng.normal(size=2), 10)
        worse += support_loss(finetune(p, sup, steps=50, seed=trial), sup) > support_loss(p, sup)
    assert worse <= 1  # at most 5% of trials


def test_finetune_rejects_zero_steps(rng):
    p = init_params(default_hyper(2, K=4, hidden=8, use_rep=False), 0)
    with pytest.raises(ValueError):
        finetune(p, rng.normal(size=(5, 2)), steps=0)


def test_method_table():
    assert set(METHODS) == {"ours", "dmd", "ndmd", "finetune", "oursT", "oursN"}
    assert NEURAL["ndmd"] == (False, "support") and NEURAL["oursN"] == (False, "query")
