import numpy as np
import pytest
from scipy.stats import chisquare

from metakoopman.data import Dataset, TimeSeries, split_dataset
from metakoopman.model import default_hyper, init_params, predict
from metakoopman.train import (Episode, TrainConfig, TrainingError, batch_loss, check_lengths, episode_loss,
                               loss_and_grads, sample_episode, train_meta, validate)
from metakoopman.optim import ParamStore, adam_step
from metakoopman.autodiff import Graph

TINY = dict(K=4, hidden=8)


def tiny(M=2, seed=0, **kw):
    return init_params(default_hyper(M, **{**TINY, **kw}), seed)


def series(i, n=30, M=2, seed=0):
    return TimeSeries(f"s{i}", np.random.default_rng(seed + i).normal(size=(n, M)), {}, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(T=1)
    with pytest.raises(ValueError):
        TrainConfig(T_Q=0)
    with pytest.raises(ValueError):
        TrainConfig(objective="other")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(T=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_forced_single_offset():
    cfg = TrainConfig(T=5, T_Q=3)
    s = series(0, n=8)
    for _ in range(20):
        ep = sample_episode([s], cfg, np.random.default_rng(_))
        assert ep.offset == 0 and np.array_equal(ep.support, s.values[:5])


def test_query_follows_support():
    cfg = TrainConfig(T=5, T_Q=3)
    s = series(0, n=40)
    rng = np.random.default_rng(0)
    for _ in range(200):
        ep = sample_episode([s], cfg, rng)
        assert np.array_equal(ep.query, s.values[ep.offset + 5:ep.offset + 8])
        assert np.array_equal(ep.support, s.values[ep.offset:ep.offset + 5])


def test_offset_histogram_uniform():
    cfg = TrainConfig(T=5, T_Q=5)
    s = series(0, n=30)
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_episode([s], cfg, rng).offset for _ in range(100_000)], minlength=21)
    assert len(counts) == 21
    assert chisquare(counts).pvalue > 0.01


def test_short_series_rejected_upfront():
    with pytest.raises(ValueError, match="shorter"):
        check_lengths([series(0, n=10)], TrainConfig(T=6, T_Q=5))


def test_loss_zero_for_perfect_query(rng):
    p = tiny()
    sup = rng.normal(size=(6, 2))
    ep = Episode(sup, predict(p, sup, 4), "x", 0)
    assert episode_loss(p, ep) == pytest.approx(0.0, abs=1e-24)


def test_loss_single_step_offset(rng):
    p = tiny()
    sup = rng.normal(size=(6, 2))
    e = np.array([[0.3, -1.2]])
    ep = Episode(sup, predict(p, sup, 1) + e, "x", 0)
    assert episode_loss(p, ep) == pytest.approx(float(np.sum(e * e)), rel=1e-12)


def test_loss_matches_summation_oracle(rng):
    p = tiny()
    sup, qry = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
    pred = predict(p, sup, 5)
    total = 0.0
    for tau in range(5):
        total += sum((pred[tau, m] - qry[tau, m]) ** 2 for m in range(2))
    assert episode_loss(p, Episode(sup, qry, "x", 0)) == pytest.approx(total / 5, rel=1e-12)


def test_validate_is_mean_and_repeatable(rng):
    p = tiny()
    eps = [Episode(rng.normal(size=(6, 2)), rng.normal(size=(4, 2)), "x", 0) for _ in range(5)]
    v = validate(p, eps, chunk=2)
    assert v == pytest.approx(np.mean([episode_loss(p, e) for e in eps]), rel=1e-12)
    assert validate(p, eps, chunk=2) == v
    with pytest.raises(ValueError):
        validate(p, [])


def test_small_step_decreases_episode_loss():
    decreases = 0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        p = tiny(seed=trial, dropout=0.0)
        ep = Episode(rng.normal(size=(6, 2)), rng.normal(size=(4, 2)), "x", 0)
        before, grads = loss_and_grads(p, [ep], "query", rng)
        store = ParamStore(p.tensors)
        adam_step(store, grads, lr=1e-5)
        decreases += episode_loss(p, ep) < before
    assert decreases >= 19


def _split(n=6, length=30):
    ds = Dataset([series(i, n=length) for i in range(n)])
    return split_dataset(ds, (0.5, 0.25, 0.25), seed=0)


def test_zero_lr_keeps_params():
    ds = _split()
    p = tiny()
    out, log = train_meta(p, ds.subset("train"), ds.subset("valid"), TrainConfig(T=5, T_Q=3, max_epochs=20, lr=0.0))
    assert all(np.array_equal(p.tensors[k], out.tensors[k]) for k in p.tensors)


def test_training_is_deterministic_and_best_is_recorded():
    ds = _split()
    cfg = TrainConfig(T=5, T_Q=3, max_epochs=60, valid_every=10, seed=4)
    a, la = train_meta(tiny(), ds.subset("train"), ds.subset("valid"), cfg)
    b, lb = train_meta(tiny(), ds.subset("train"), ds.subset("valid"), cfg)
    assert la.to_csv() == lb.to_csv()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert la.best_valid == min(la.valid_loss)
    vrng = np.random.default_rng(np.random.SeedSequence(4, spawn_key=(2,)))
    veps = [sample_episode(ds.subset("valid"), cfg, vrng) for _ in range(cfg.n_valid_episodes)]
    assert validate(a, veps) == pytest.approx(la.best_valid, rel=1e-12)


def test_training_log_csv_columns():
    ds = _split()
    _, log = train_meta(tiny(), ds.subset("train"), ds.subset("valid"), TrainConfig(T=5, T_Q=3, max_epochs=5, valid_every=2))
    lines = log.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,valid_loss" and len(lines) == 6


def test_poisoned_test_split_never_read():
    ds = _split()
    poisoned = [TimeSeries(s.id, np.full_like(s.values, 1e300) if ds.split[s.id] == "test" else s.values,
                           s.params, s.dt) for s in ds.series]
    pds = Dataset(poisoned, ds.split)
    cfg = TrainConfig(T=5, T_Q=3, max_epochs=30, valid_every=10)
    a, la = train_meta(tiny(), ds.subset("train"), ds.subset("valid"), cfg)
    b, lb = train_meta(tiny(), pds.subset("train"), pds.subset("valid"), cfg)
    assert la.to_csv() == lb.to_csv()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_episode_info():
    bad = TimeSeries("boom", np.full((20, 2), 1e200), {}, 1.0)
    with pytest.raises(TrainingError, match="boom@"):
        train_meta(tiny(), [bad], [series(9, n=20)], TrainConfig(T=5, T_Q=3, max_epochs=3))


def test_support_objective_uses_support_only(rng):
    p = tiny()
    sup = rng.normal(size=(6, 2))
    g = Graph()
    loss = g.value(batch_loss(g, p, [Episode(sup, sup[:0], "x", 0)], "support"))
    assert np.isfinite(loss) and loss > 0
