"""Trace-based regularizer on W_QK and a small training loop around it.

Objective: ``J + k1 tr(W_QK^T W_QK) + k2 (tr(W_QK) - 1)^2`` with
``W_QK = W_Q^T W_K`` summed over layers.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .model import AttentionParams, attention_entropy, hash_seed, loss_and_grads
from .randwalk import walk_batch
from .spp import spp_empirical_batch

PARAM_NAMES = ("W_Q", "W_K", "W_V", "W_F1", "W_F2")


def regularizer(wq, wk):
    """``(tr(W_QK^T W_QK), (tr(W_QK) - 1)^2)`` for ``W_QK = W_Q^T W_K``."""
    wqk = np.asarray(wq, dtype=float).T @ np.asarray(wk, dtype=float)
    return float(np.sum(wqk * wqk)), float((np.trace(wqk) - 1.0) ** 2)


def regularizer_grads(wq, wk, variant: str = "verified"):
    """Gradients of both terms with respect to ``W_Q`` and ``W_K``.

    Returns ``{"scale": (dQ, dK), "mean": (dQ, dK)}``.  ``variant="paper"``
    reproduces the printed mean-term formula ``(tr - 1) tr W_K``;
    ``"verified"`` uses ``2 (tr - 1) W_K``, which matches finite differences.
    The scale-term formula is the same in both variants.
    """
    wq = np.asarray(wq, dtype=float)
    wk = np.asarray(wk, dtype=float)
    tr = float(np.sum(wq * wk))  # tr(W_Q^T W_K)
    scale = (2.0 * wk @ wk.T @ wq, 2.0 * wq @ wq.T @ wk)
    if variant == "paper":
        mean = ((tr - 1.0) * tr * wk, (tr - 1.0) * tr * wq)
    elif variant == "verified":
        mean = (2.0 * (tr - 1.0) * wk, 2.0 * (tr - 1.0) * wq)
    else:
        raise ValueError("variant must be 'paper' or 'verified'")
    return {"scale": scale, "mean": mean}


def fd_regularizer_grads(wq, wk, h: float = 1e-6):
    """Central differences of both regularizer terms, same layout as ``regularizer_grads``."""
    wq = np.asarray(wq, dtype=float)
    wk = np.asarray(wk, dtype=float)
    out = {"scale": [np.zeros_like(wq), np.zeros_like(wk)], "mean": [np.zeros_like(wq), np.zeros_like(wk)]}
    for which in (0, 1):
        for idx in np.ndindex(*wq.shape):
            mats = [wq.copy(), wk.copy()]
            mats[which][idx] += h
            sp, mp = regularizer(*mats)
            mats[which][idx] -= 2 * h
            sm, mm = regularizer(*mats)
            out["scale"][which][idx] = (sp - sm) / (2 * h)
            out["mean"][which][idx] = (mp - mm) / (2 * h)
    return {k: tuple(v) for k, v in out.items()}


@dataclass
class TrainConfig:
    kappa1: float = 100.0
    kappa2: float = 0.0
    lr: float | None = None  # None: 1e-4 for d <= 32, else 2.5e-5
    iters: int = 5000
    batch_size: int = 64
    T: int = 32
    d: int = 32
    layers: int = 1
    weight_decay: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    data_source: str = "random-walk"
    corpus_path: str | None = None
    paper_grad_variant: bool = False
    log_every: int = 100
    eval_size: int = 64
    activation: str = "identity"

    def __post_init__(self):
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("regularization strengths must be nonnegative")
        if self.iters < 0 or self.batch_size < 1 or self.T < 1 or self.d < 1 or self.log_every < 1:
            raise ValueError("iters, batch_size, T, d and log_every must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.data_source not in ("random-walk", "corpus"):
            raise ValueError("data_source must be 'random-walk' or 'corpus'")
        if self.data_source == "corpus" and not self.corpus_path:
            raise ValueError("corpus data needs corpus_path")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be nonnegative")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if self.d <= 32 else 2.5e-5


@dataclass
class TrainLog:
    config: dict
    records: list = field(default_factory=list)

    SCALARS = ("iter", "loss", "reg_loss", "trace", "scale", "entropy")

    def spp_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.config["T"]))
        return np.array([r["spp"] for r in self.records])

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def final(self) -> dict:
        return self.records[-1]

    def to_csv(self, path):
        T = self.config["T"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.SCALARS) + [f"spp_{i}" for i in range(1, T + 1)])
            for r in self.records:
                w.writerow([r["iter"]] + [repr(float(r[k])) for k in self.SCALARS[1:]]
                           + [repr(float(v)) for v in r["spp"]])

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"config": self.config, "records": self.records}, fh, indent=1, sort_keys=True)


class Adam:
    """Adam with decoupled weight decay; no gradient clipping."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            p *= 1 - self.lr * self.wd
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr, weight_decay=0.0):
        self.lr, self.wd = lr, weight_decay

    def step(self, params: dict, grads: dict):
        for k, p in params.items():
            p *= 1 - self.lr * self.wd
            p -= self.lr * grads[k]


def regularized_loss_and_grads(params: AttentionParams, batch, cfg: TrainConfig):
    J, g = loss_and_grads(params, batch, mode="exact")
    grads = {k: getattr(g, k).copy() for k in PARAM_NAMES}
    variant = "paper" if cfg.paper_grad_variant else "verified"
    reg = 0.0
    for l in range(params.layers):
        s, m = regularizer(params.W_Q[l], params.W_K[l])
        reg += cfg.kappa1 * s + cfg.kappa2 * m
        rg = regularizer_grads(params.W_Q[l], params.W_K[l], variant)
        grads["W_Q"][l] += cfg.kappa1 * rg["scale"][0] + cfg.kappa2 * rg["mean"][0]
        grads["W_K"][l] += cfg.kappa1 * rg["scale"][1] + cfg.kappa2 * rg["mean"][1]
    return J, J + reg, grads


def _snapshot(params, X, Y, cfg, it):
    from .model import loss

    J = loss(params, (X, Y), "exact")
    wqk = params.W_QK
    reg = sum(cfg.kappa1 * float(np.sum(w * w)) + cfg.kappa2 * (float(np.trace(w)) - 1.0) ** 2 for w in wqk)
    return {
        "iter": it,
        "loss": J,
        "reg_loss": J + reg,
        "trace": float(np.mean([np.trace(w) for w in wqk])),
        "scale": float(np.mean([np.sum(w * w) for w in wqk])),
        "entropy": attention_entropy(params, X),
        "spp": [float(v) for v in spp_empirical_batch(params, (X, Y)).values],
    }


def _batch_source(cfg: TrainConfig):
    if cfg.data_source == "corpus":
        from .corpus import CorpusBatches

        src = CorpusBatches(cfg.corpus_path, cfg.d, cfg.T, cfg.seed)
        return src.batch
    cov = np.eye(cfg.d)
    return lambda k, size: walk_batch(cov, cfg.T, size, hash_seed(cfg.seed, 11, k))


def train(cfg: TrainConfig, params: AttentionParams | None = None) -> TrainLog:
    """Minimize the regularized squared loss; returns the log taken on a fixed evaluation batch."""
    params = (AttentionParams.random(cfg.d, cfg.layers, seed=hash_seed(cfg.seed, 3), activation=cfg.activation)
              if params is None else params.copy())
    next_batch = _batch_source(cfg)
    Xe, Ye = next_batch(0, cfg.eval_size)  # training batches use k >= 1
    log = TrainLog(config={**asdict(cfg), "lr": cfg.resolved_lr})
    lr = cfg.resolved_lr
    opt = Adam(lr, weight_decay=cfg.weight_decay) if cfg.optimizer == "adam" else SGD(lr, cfg.weight_decay)
    tensors = {k: getattr(params, k) for k in PARAM_NAMES}
    if cfg.iters == 0:
        log.records.append(_snapshot(params, Xe, Ye, cfg, 0))
    for it in range(1, cfg.iters + 1):
        X, Y = next_batch(it, cfg.batch_size)
        J, R, grads = regularized_loss_and_grads(params, (X, Y), cfg)
        if not (np.isfinite(J) and np.isfinite(R)):
            rec = {"iter": it, "loss": J, "reg_loss": R,
                   "max_abs_param": {k: float(np.nanmax(np.abs(v))) for k, v in tensors.items()}}
            raise TrainingDiverged(f"non-finite loss at iteration {it}", record=rec, log=log)
        opt.step(tensors, grads)
        if it % cfg.log_every == 0 or it == cfg.iters:
            rec = _snapshot(params, Xe, Ye, cfg, it)
            if not np.isfinite(rec["reg_loss"]):
                raise TrainingDiverged(f"non-finite evaluation loss at iteration {it}", record=rec, log=log)
            log.records.append(rec)
    log.params = params
    return log
