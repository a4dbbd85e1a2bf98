import json

import numpy as np
import pytest

from attnloc.errors import TrainingDiverged
from attnloc.locater import (TrainConfig, fd_regularizer_grads, regularizer, regularizer_grads, train)
from attnloc.model import AttentionParams, max_rel_err
from oracles import central_diff


def test_regularizer_examples():
    d = 4
    assert regularizer(np.eye(d), np.eye(d)) == (d, (d - 1) ** 2)
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(d, d))
    K = np.linalg.inv(Q.T) / d  # Q^T K = I / d
    assert regularizer(Q, K)[1] < 1e-20
    A, B = rng.normal(size=(2, 5, 5))
    M = A.T @ B
    s, m = regularizer(A, B)
    assert abs(s - np.trace(M.T @ M)) < 1e-12 * s and abs(m - (np.trace(M) - 1) ** 2) < 1e-12 * max(1, m)


def test_zero_key_gives_zero_query_gradients():
    for v in ("paper", "verified"):
        g = regularizer_grads(np.ones((3, 3)), np.zeros((3, 3)), v)
        assert not g["scale"][0].any() and not g["mean"][0].any()


def test_gradients_against_independent_fd():
    rng = np.random.default_rng(1)
    for _ in range(5):
        Q, K = rng.normal(size=(2, 4, 4))
        s = lambda q, k: regularizer(q, k)[0]
        m = lambda q, k: regularizer(q, k)[1]
        fd = {"scale": (central_diff(lambda q: s(q, K), Q, 1e-6), central_diff(lambda k: s(Q, k), K, 1e-6)),
              "mean": (central_diff(lambda q: m(q, K), Q, 1e-6), central_diff(lambda k: m(Q, k), K, 1e-6))}
        v = regularizer_grads(Q, K, "verified")
        p = regularizer_grads(Q, K, "paper")
        for t in ("scale", "mean"):
            for i in (0, 1):
                assert max_rel_err(v[t][i], fd[t][i]) < 1e-6
        assert max_rel_err(p["scale"][0], fd["scale"][0]) < 1e-6
        ours = fd_regularizer_grads(Q, K)
        assert max_rel_err(ours["mean"][1], fd["mean"][1]) < 1e-8


def test_printed_mean_formula_differs():
    rng = np.random.default_rng(2)
    Q, K = rng.normal(size=(2, 4, 4))
    fd = fd_regularizer_grads(Q, K)
    p = regularizer_grads(Q, K, "paper")
    assert max_rel_err(p["mean"][0], fd["mean"][0]) > 1e-2


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(kappa1=-1)
    with pytest.raises(ValueError):
        TrainConfig(data_source="corpus")
    assert TrainConfig(d=32).resolved_lr == 1e-4 and TrainConfig(d=128).resolved_lr == 2.5e-5


def test_frozen_training_constant_log():
    cfg = TrainConfig(kappa1=0, kappa2=0, lr=0.0, iters=30, log_every=10, d=6, T=8, batch_size=8, eval_size=16,
                      weight_decay=0.0)
    log = train(cfg)
    assert len(log.records) == 3
    first = {k: v for k, v in log.records[0].items() if k != "iter"}
    for r in log.records[1:]:
        assert {k: v for k, v in r.items() if k != "iter"} == first


def test_zero_iteration_logs_initial_state():
    log = train(TrainConfig(iters=0, d=6, T=8, batch_size=4, eval_size=8))
    assert len(log.records) == 1 and log.records[0]["iter"] == 0


def test_log_structure_and_serialization(tmp_path):
    cfg = TrainConfig(iters=40, log_every=10, d=6, T=8, batch_size=8, eval_size=16, kappa2=0.1)
    log = train(cfg)
    S = log.spp_matrix()
    assert S.shape == (4, 8) and np.all((S >= 0) & (S <= 1))
    assert all(np.isfinite(r["reg_loss"]) for r in log.records)
    log.to_csv(tmp_path / "a.csv")
    log.to_json(tmp_path / "a.json")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].split(",")[:6] == list(log.SCALARS)
    js = json.loads((tmp_path / "a.json").read_text())
    assert js["config"]["kappa2"] == 0.1 and len(js["records"]) == 4


def test_determinism():
    cfg = TrainConfig(iters=25, log_every=5, d=5, T=6, batch_size=8, eval_size=8, kappa2=1.0, seed=3)
    assert train(cfg).records == train(cfg).records


def test_scale_regularizer_shrinks_scale():
    cfg = TrainConfig(kappa1=1e3, kappa2=0.0, lr=1e-2, iters=300, log_every=300, d=8, T=8, batch_size=16,
                      eval_size=16, seed=1)
    p0 = AttentionParams.random(8, seed=0)
    s0 = float(np.sum(p0.W_QK[0] ** 2))
    log = train(cfg, params=p0)
    assert log.final()["scale"] <= 0.5 * s0


def test_divergence_guard():
    cfg = TrainConfig(kappa1=0, kappa2=0, lr=1e6, optimizer="sgd", iters=50, log_every=1, d=4, T=4,
                      batch_size=4, eval_size=4, weight_decay=0.0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as exc:
        train(cfg)
    assert exc.value.record is not None and exc.value.log is not None


def test_corpus_training(tmp_path):
    text = tmp_path / "c.txt"
    text.write_bytes(b"the quick brown fox jumps over the lazy dog. " * 40)
    cfg = TrainConfig(iters=10, log_every=5, d=6, T=8, batch_size=4, eval_size=4, data_source="corpus",
                      corpus_path=str(text))
    log = train(cfg)
    assert log.spp_matrix().shape == (2, 8)
