"""Residual self-attention stack without layer normalization.

Each layer maps ``X`` (``d x T``) through

    M = X^T W_QK X / lam          (M[s, t]: key s, query t)
    A[:, t] = softmax(M[:, t])    (or the clamped linear surrogate)
    Z = W_V X A + X
    X' = W_F2 act(W_F1 Z) + Z

and the prediction is the last column of the final ``X``.  Everything here is
batched over a leading axis, so ``X`` arrays have shape ``(n, d, T)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyBatchError, InvalidDimensionError, InvalidTemperatureError
from .pwsoftmax import linear_argument, piecewise_softmax, propagates, softmax
from .randwalk import TokenSequence, iter_walk_chunks, walk_batch

MODES = ("exact", "piecewise")
ACTIVATIONS = ("identity", "relu")


@dataclass
class AttentionParams:
    W_Q: np.ndarray  # (L, d, d)
    W_K: np.ndarray
    W_V: np.ndarray
    W_F1: np.ndarray
    W_F2: np.ndarray
    lam: float
    activation: str = "identity"
    wqk: np.ndarray | None = None  # joint W_QK overriding W_Q^T W_K when set

    def __post_init__(self):
        mats = [np.asarray(m, dtype=float) for m in (self.W_Q, self.W_K, self.W_V, self.W_F1, self.W_F2)]
        mats = [m[None] if m.ndim == 2 else m for m in mats]
        shape = mats[0].shape
        if len(shape) != 3 or shape[1] != shape[2] or any(m.shape != shape for m in mats):
            raise InvalidDimensionError("parameter matrices must all be d x d (optionally stacked per layer)")
        self.W_Q, self.W_K, self.W_V, self.W_F1, self.W_F2 = mats
        if not self.lam > 0:
            raise InvalidTemperatureError(f"temperature must be positive, got {self.lam}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.wqk is not None:
            w = np.asarray(self.wqk, dtype=float)
            self.wqk = w[None] if w.ndim == 2 else w
            if self.wqk.shape != shape:
                raise InvalidDimensionError("W_QK override has the wrong shape")

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    @property
    def layers(self) -> int:
        return self.W_Q.shape[0]

    @property
    def W_QK(self) -> np.ndarray:
        if self.wqk is not None:
            return self.wqk
        return np.transpose(self.W_Q, (0, 2, 1)) @ self.W_K

    @property
    def W_F(self) -> np.ndarray:
        return self.W_F2 @ self.W_F1 + np.eye(self.d)

    @classmethod
    def random(cls, d: int, layers: int = 1, seed: int = 0, std: float | None = None,
               lam: float | None = None, activation: str = "identity"):
        """Element-wise Gaussian initialization, std ``1/sqrt(d)`` by default."""
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(d) if std is None else std
        mats = [std * rng.standard_normal((layers, d, d)) for _ in range(5)]
        return cls(*mats, lam=np.sqrt(d) if lam is None else lam, activation=activation)

    @classmethod
    def zeros(cls, d: int, layers: int = 1, lam: float | None = None, activation: str = "identity"):
        mats = [np.zeros((layers, d, d)) for _ in range(5)]
        return cls(*mats, lam=np.sqrt(d) if lam is None else lam, activation=activation)

    def with_wqk(self, wqk):
        """Copy that uses the given joint ``W_QK`` (single matrix or per layer)."""
        w = np.asarray(wqk, dtype=float)
        if w.ndim == 2:
            w = np.broadcast_to(w, (self.layers,) + w.shape).copy()
        return replace(self, wqk=w)

    def copy(self):
        return replace(self, W_Q=self.W_Q.copy(), W_K=self.W_K.copy(), W_V=self.W_V.copy(),
                       W_F1=self.W_F1.copy(), W_F2=self.W_F2.copy(),
                       wqk=None if self.wqk is None else self.wqk.copy())


def as_arrays(batch):
    """Normalize a batch to ``(X (n, d, T), Y (n, d))``.

    Accepts a ``TokenSequence``, a list of them, or an ``(X, Y)`` pair.
    """
    if isinstance(batch, TokenSequence):
        return batch.data[None].astype(float), batch.target[None].astype(float)
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], TokenSequence):
        X, Y = (np.asarray(b, dtype=float) for b in batch)
        if X.ndim == 2:
            X, Y = X[None], Y[None]
        return X, Y
    batch = list(batch)
    if not batch:
        raise EmptyBatchError("batch is empty")
    Ts = {s.T for s in batch}
    if len(Ts) != 1:
        raise InvalidDimensionError("all sequences in a batch must share T")
    return np.stack([s.data for s in batch]).astype(float), np.stack([s.target for s in batch]).astype(float)


def _bsum(a, b):
    """``sum_n a[n] @ b[n].T`` for stacks of ``d x T`` matrices."""
    return np.tensordot(a, b, axes=([0, 2], [0, 2]))


def _act(z, kind):
    return z if kind == "identity" else np.maximum(z, 0.0)


def _act_grad(z, kind):
    return np.ones_like(z) if kind == "identity" else (z > 0).astype(float)


def _attention(M, mode):
    # normalize over keys (axis 1) for every query column
    if mode == "exact":
        return softmax(M, axis=1)
    if mode == "piecewise":
        return np.clip(linear_argument(M, axis=1), 0.0, 1.0)
    raise ValueError(f"mode must be one of {MODES}")


def _forward_cached(params: AttentionParams, X, mode):
    if X.shape[1] != params.d:
        raise InvalidDimensionError(f"token dim {X.shape[1]} != model dim {params.d}")
    caches = []
    Wqk = params.W_QK
    for l in range(params.layers):
        M = np.transpose(X, (0, 2, 1)) @ (Wqk[l] @ X) / params.lam
        A = _attention(M, mode)
        XA = X @ A
        Z = params.W_V[l] @ XA + X
        P1 = params.W_F1[l] @ Z
        S1 = _act(P1, params.activation)
        Xn = params.W_F2[l] @ S1 + Z
        caches.append((X, M, A, XA, Z, P1, S1))
        X = Xn
    return X, caches


def forward(params: AttentionParams, X, mode: str = "exact"):
    """Prediction ``F(X)_T``; ``X`` may be ``(d, T)`` or ``(n, d, T)``."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    out, _ = _forward_cached(params, X[None] if single else X, mode)
    return out[0, :, -1] if single else out[:, :, -1]


def loss(params: AttentionParams, batch, mode: str = "exact") -> float:
    """Batch mean of ``0.5 * ||y - F(X)_T||^2``."""
    X, Y = as_arrays(batch)
    if X.shape[0] == 0:
        raise EmptyBatchError("batch is empty")
    r = forward(params, X, mode) - Y
    return 0.5 * float(np.mean(np.sum(r * r, axis=1)))


@dataclass
class Grads:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_F1: np.ndarray
    W_F2: np.ndarray
    W_QK: np.ndarray


def loss_and_grads(params: AttentionParams, batch, mode: str = "exact"):
    """Loss and reverse-mode gradients for every parameter (including joint ``W_QK``)."""
    X, Y = as_arrays(batch)
    n = X.shape[0]
    if n == 0:
        raise EmptyBatchError("batch is empty")
    out, caches = _forward_cached(params, X, mode)
    r = out[:, :, -1] - Y
    J = 0.5 * float(np.mean(np.sum(r * r, axis=1)))

    L, d = params.layers, params.d
    g = {k: np.zeros((L, d, d)) for k in ("W_QK", "W_V", "W_F1", "W_F2")}
    dX = np.zeros_like(out)
    dX[:, :, -1] = r / n
    Wqk = params.W_QK
    T = out.shape[2]
    for l in reversed(range(L)):
        Xl, M, A, XA, Z, P1, S1 = caches[l]
        g["W_F2"][l] = _bsum(dX, S1)
        dP1 = _act_grad(P1, params.activation) * (params.W_F2[l].T @ dX)
        g["W_F1"][l] = _bsum(dP1, Z)
        dZ = dX + params.W_F1[l].T @ dP1
        g["W_V"][l] = _bsum(dZ, XA)
        dXA = params.W_V[l].T @ dZ
        dXl = dZ + dXA @ np.transpose(A, (0, 2, 1))
        dA = np.transpose(Xl, (0, 2, 1)) @ dXA
        if mode == "exact":
            dM = A * (dA - np.sum(A * dA, axis=1, keepdims=True))
        else:
            da = dA * propagates(linear_argument(M, axis=1))
            dM = da / T - np.sum(da, axis=1, keepdims=True) / T**2
        dM = dM / params.lam
        g["W_QK"][l] = _bsum(Xl @ dM, Xl)
        W = Wqk[l]
        dXl += W @ Xl @ np.transpose(dM, (0, 2, 1)) + W.T @ Xl @ dM
        dX = dXl
    G = g["W_QK"]
    gQ = params.W_K @ np.transpose(G, (0, 2, 1))
    gK = params.W_Q @ G
    return J, Grads(W_Q=gQ, W_K=gK, W_V=g["W_V"], W_F1=g["W_F1"], W_F2=g["W_F2"], W_QK=G)


# -- analytic QK-gradient of the one-layer linearized model -------------------

@dataclass
class GradReport:
    analytic: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    term3: np.ndarray
    numeric: np.ndarray | None
    max_rel_err: float | None
    kink_flagged: bool = False
    min_kink_distance: float = float("inf")


def _check_analysis_arch(params):
    if params.layers != 1 or params.activation != "identity":
        raise ValueError("the analytic QK-gradient needs one layer with identity activation")


def kink_distance(params: AttentionParams, X) -> np.ndarray:
    """Per-item distance of the last query's linear arguments to the clamp kinks 0 and 1."""
    X = np.asarray(X, dtype=float)
    W = params.W_QK[0]
    omega = np.einsum("ndt,nd->nt", X, X[:, :, -1] @ W.T) / params.lam
    z = linear_argument(omega)
    return np.minimum(np.abs(z), np.abs(z - 1.0)).min(axis=1)


def qk_gradient_terms(params: AttentionParams, batch):
    """Batch means of the three gradient terms, in order:

    ``X G P G^T omega x_T^T / lam``, ``X G P g0 x_T^T / lam``, ``X G q x_T^T / lam``
    where ``G`` and ``g0`` are the active surrogate coefficients at each item's
    ``omega``, ``P = X^T W_V^T W_F^T W_F W_V X`` and
    ``q = X^T W_V^T W_F^T (W_F x_T - y)``.
    """
    _check_analysis_arch(params)
    X, Y = as_arrays(batch)
    n = X.shape[0]
    if n == 0:
        raise EmptyBatchError("batch is empty")
    W = params.W_QK[0]
    WF = params.W_F[0]
    B = WF @ params.W_V[0]
    lam = params.lam
    d = params.d
    t1 = np.zeros((d, d))
    t2 = np.zeros((d, d))
    t3 = np.zeros((d, d))
    for Xk, y in zip(X, Y):
        xT = Xk[:, -1]
        omega = Xk.T @ W @ xT / lam
        _, pc = piecewise_softmax(omega)
        G, g0 = pc.Gamma, pc.gamma0_tilde
        BX = B @ Xk
        P = BX.T @ BX
        q = BX.T @ (WF @ xT - y)
        XG = Xk @ G
        t1 += np.outer(XG @ (P @ (G.T @ omega)), xT)
        t2 += np.outer(XG @ (P @ g0), xT)
        t3 += np.outer(XG @ q, xT)
    s = 1.0 / (lam * n)
    return t1 * s, t2 * s, t3 * s


def fd_gradient_wqk(params: AttentionParams, batch, mode: str = "piecewise", rel_step: float = 1e-5):
    """Central differences of the batch loss w.r.t. each entry of the first-layer ``W_QK``."""
    base = params.W_QK.copy()
    out = np.zeros(base.shape[1:])
    for idx in np.ndindex(*out.shape):
        w = base[(0,) + idx]
        h = rel_step * max(1.0, abs(w))
        plus = base.copy()
        plus[(0,) + idx] = w + h
        minus = base.copy()
        minus[(0,) + idx] = w - h
        out[idx] = (loss(params.with_wqk(plus), batch, mode) - loss(params.with_wqk(minus), batch, mode)) / (2 * h)
    return out


def max_rel_err(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute error when ``b`` vanishes)."""
    scale = np.max(np.abs(b))
    err = np.max(np.abs(a - b))
    return float(err / scale) if scale > 0 else float(err)


def qk_gradient_analytic(params: AttentionParams, batch, check: bool = True, kink_tol: float = 1e-6) -> GradReport:
    """Three-term analytic gradient with an optional finite-difference check."""
    t1, t2, t3 = qk_gradient_terms(params, batch)
    total = t1 + t2 + t3
    X, _ = as_arrays(batch)
    dist = float(kink_distance(params, X).min())
    numeric = fd_gradient_wqk(params, batch) if check else None
    err = max_rel_err(total, numeric) if check else None
    return GradReport(analytic=total, term1=t1, term2=t2, term3=t3, numeric=numeric, max_rel_err=err,
                      kink_flagged=dist < kink_tol, min_kink_distance=dist)


def off_kink_batch(params: AttentionParams, cov, T: int, size: int, seed: int = 0, margin: float = 1e-3,
                   max_draws: int = 1_000_000):
    """Rejection-sample walks whose last-query linear arguments all stay ``margin`` away from 0 and 1."""
    keep_X, keep_Y, got, drawn = [], [], 0, 0
    for X, Y in iter_walk_chunks(cov, T, max_draws, seed, chunk=max(64, size)):
        ok = kink_distance(params, X) >= margin
        keep_X.append(X[ok])
        keep_Y.append(Y[ok])
        got += int(ok.sum())
        drawn += X.shape[0]
        if got >= size:
            break
    if got < size:
        raise RuntimeError(f"only {got} off-kink walks among {drawn} draws")
    return np.concatenate(keep_X)[:size], np.concatenate(keep_Y)[:size]


@dataclass
class TermOrderReport:
    T_values: list
    norms: np.ndarray | None  # (len(T_values), 3)
    ratios: np.ndarray | None
    slopes: np.ndarray | None  # log-log slope per term
    increasing: bool | None
    skipped: bool = False
    reason: str = ""
    extra: dict = field(default_factory=dict)


def grad_term_orders(params: AttentionParams, T_values=(16, 64, 256), n_batches: int = 16, batch_size: int = 32,
                     seed: int = 0) -> TermOrderReport:
    """Frobenius norms of the three gradient terms as ``T`` grows, with isotropic walks.

    The terms are expectations, so each norm is taken of the mean over all
    ``n_batches * batch_size`` sampled walks.
    """
    _check_analysis_arch(params)
    T_values = list(T_values)
    if np.all(params.W_V == 0):
        return TermOrderReport(T_values, None, None, None, None, skipped=True,
                               reason="W_V = 0 makes every term vanish")
    cov = np.eye(params.d)
    norms = np.zeros((len(T_values), 3))
    for a, T in enumerate(T_values):
        acc = [np.zeros((params.d, params.d)) for _ in range(3)]
        for b in range(n_batches):
            X, Y = walk_batch(cov, T, batch_size, seed=hash_seed(seed, a, b))
            for k, t in enumerate(qk_gradient_terms(params, (X, Y))):
                acc[k] += t / n_batches
        norms[a] = [np.linalg.norm(t) for t in acc]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = norms[:, 0] / (norms[:, 1] + norms[:, 2])
        logs = np.log(norms)
    logT = np.log(T_values)
    slopes = np.array([np.polyfit(logT, logs[:, k], 1)[0] if np.all(np.isfinite(logs[:, k])) else np.nan
                       for k in range(3)])
    increasing = bool(np.all(np.isfinite(ratios)) and np.all(np.diff(ratios) > 0))
    return TermOrderReport(T_values, norms, ratios, slopes, increasing)


def hash_seed(*parts) -> int:
    """Fold integers into one 63-bit seed (stable across runs and platforms)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


# -- attention entropy ----------------------------------------------------------

def attention_matrix(wqk, X, lam: float):
    """Exact attention ``A`` with ``A[:, t]`` the distribution of query ``t`` over keys."""
    X = np.asarray(X, dtype=float)
    M = np.einsum("...ds,de,...et->...st", X, np.asarray(wqk, dtype=float), X, optimize=True) / lam
    return softmax(M, axis=-2)


def _entropy(A, axis):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A > 0, -A * np.log(A), 0.0)
    return terms.sum(axis=axis)


def attention_entropy_from_wqk(wqk, X, lam: float) -> float:
    """Average Shannon entropy (nats) of the per-query attention distributions."""
    A = attention_matrix(wqk, X, lam)
    return float(np.mean(_entropy(A, axis=-2)))


def attention_entropy(params: AttentionParams, X, layer: int = 0) -> float:
    """Entropy of layer ``layer``'s attention, averaged over queries (and batch items)."""
    X = np.asarray(X, dtype=float)
    if layer > 0:
        Xb = X[None] if X.ndim == 2 else X
        _, caches = _forward_cached(params, Xb, "exact")
        X = caches[layer][0]
    return attention_entropy_from_wqk(params.W_QK[layer], X, params.lam)


def entropy_lower_bound(nu, T: int):
    """``ln(1 + T e^-nu) + nu e^(-nu/2) / (1/T + e^-nu)``, evaluated stably for large ``nu``."""
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0) or T < 1:
        raise ValueError("need nu >= 0 and T >= 1")
    first = np.log1p(T * np.exp(-nu))
    # nu e^{-nu/2} / (1/T + e^{-nu}) = nu T e^{-nu/2} / (1 + T e^{-nu})
    second = nu * T * np.exp(-nu / 2) / (1.0 + T * np.exp(-nu))
    out = first + second
    return float(out) if out.ndim == 0 else out


def entropy_nu(X, wqk) -> float:
    """``||X X^T||_2 ||W_QK||_2`` for a single ``d x T`` sequence."""
    X = np.asarray(X, dtype=float)
    return float(np.linalg.norm(X @ X.T, 2) * np.linalg.norm(np.asarray(wqk, dtype=float), 2))
