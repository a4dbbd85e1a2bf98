"""Gaussian and random-walk moment formulas with a brute-force sampler.

The closed forms are evaluated exactly as printed, including the walk-index
coefficients such as ``(i - 1)`` and ``(i^2 - 2i + 2)``.  The sampler follows
the walk model with ``x_1 ~ N(0, S)``; any mismatch surfaces in
``audit_walk_formulas`` instead of being patched here.

Notation: ``A = tr(W S W S)``, ``B = tr(W S)^2``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AsymmetricMatrixError, InvalidDimensionError
from .randwalk import covariance_factor

GAUSSIAN_KINDS = ("quad", "outer", "cubic", "quad_quad")
WALK_KINDS = ("walk_quad", "walk_quad_quad_same", "walk_quad_quad_cross", "walk_cubic", "cross_with_T")
MC_CHUNK = 100_000


@dataclass
class MomentQuery:
    kind: str
    W: np.ndarray
    sigma: np.ndarray
    m: np.ndarray | None = None
    a: np.ndarray | None = None
    i: int | None = None
    j: int | None = None
    T: int | None = None

    def __post_init__(self):
        if self.kind not in GAUSSIAN_KINDS + WALK_KINDS:
            raise ValueError(f"unknown moment kind {self.kind!r}")
        self.W = np.asarray(self.W, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        d = self.W.shape[0]
        if self.W.shape != (d, d) or self.sigma.shape != (d, d):
            raise InvalidDimensionError("W and sigma must be square with equal size")
        self.m = np.zeros(d) if self.m is None else np.asarray(self.m, dtype=float)
        self.a = np.zeros(d) if self.a is None else np.asarray(self.a, dtype=float)
        if self.kind in ("walk_quad_quad_cross", "walk_cubic", "cross_with_T") and self.j is None:
            raise ValueError(f"{self.kind} needs index j")
        if self.kind == "cross_with_T" and self.T is None:
            raise ValueError("cross_with_T needs T")
        if self.kind in WALK_KINDS:
            order = [self.i] + ([self.j] if self.j is not None else []) + ([self.T] if self.T is not None else [])
            if self.i is None or self.i < 1 or any(p > q for p, q in zip(order, order[1:])):
                raise ValueError("walk indices must satisfy 1 <= i <= j <= T")


def _check_symmetric(W):
    if not np.allclose(W, W.T, rtol=0, atol=1e-12 * max(1.0, np.abs(W).max())):
        raise AsymmetricMatrixError("moment formulas require a symmetric W")


def moment_closed_form(q: MomentQuery):
    W, S, m, a = q.W, q.sigma, q.m, q.a
    _check_symmetric(W)
    WS = W @ S
    t = np.trace(WS)
    A = np.trace(WS @ WS)
    B = t**2
    mWm = m @ W @ m
    if q.kind == "quad":
        return t + mWm
    if q.kind == "outer":
        return S + np.outer(m, m)
    if q.kind == "cubic":
        return 2 * a @ W @ S @ W @ m + (a @ W @ m) * (t + mWm)
    if q.kind == "quad_quad":
        return 2 * A + B + 4 * m @ W @ S @ W @ m + 2 * t * mWm + mWm**2
    i, j, T = q.i, q.j, q.T
    if q.kind == "walk_quad":
        return (i - 1) * t
    if q.kind == "walk_quad_quad_same":
        return (i**2 - 2 * i + 2) * (2 * A + B)
    if q.kind == "walk_quad_quad_cross":
        return (i**2 + i * j - 3 * i - j + 4) * A + (i**2 - 2 * i + 2) * B
    if q.kind == "walk_cubic":
        return (i * j - i - j + 2) * (2 * A + B)
    # cross_with_T: E[x_i^T W x_T x_j^T W x_T]
    return (i * j + (T - 2) * i - j - (T - 4)) * A + (i * j - i - j + 2) * B


def _walk_positions(rng, L, positions, n):
    """Sample the walk at sorted positions by summing independent increments."""
    d = L.shape[0]
    out = {}
    x = np.zeros((n, d))
    prev = 0
    for p in sorted(set(positions)):
        x = x + np.sqrt(p - prev) * (rng.standard_normal((n, d)) @ L.T)
        out[p] = x
        prev = p
    return out


def _quad(x, W, y):
    return np.einsum("nd,de,ne->n", x, W, y)


def _sample_chunk(q: MomentQuery, L, rng, n):
    W = q.W
    if q.kind in GAUSSIAN_KINDS:
        x = q.m + rng.standard_normal((n, W.shape[0])) @ L.T
        if q.kind == "quad":
            return _quad(x, W, x)
        if q.kind == "outer":
            return np.einsum("ni,nj->nij", x, x)
        if q.kind == "cubic":
            return (x @ (W @ q.a)) * _quad(x, W, x)
        return _quad(x, W, x) ** 2
    pos = _walk_positions(rng, L, [p for p in (q.i, q.j, q.T) if p is not None], n)
    xi = pos[q.i]
    if q.kind == "walk_quad":
        return _quad(xi, W, xi)
    if q.kind == "walk_quad_quad_same":
        return _quad(xi, W, xi) ** 2
    xj = pos[q.j]
    if q.kind == "walk_quad_quad_cross":
        return _quad(xi, W, xj) ** 2
    if q.kind == "walk_cubic":
        return _quad(xi, W, xj) * _quad(xj, W, xj)
    xT = pos[q.T]
    return _quad(xi, W, xT) * _quad(xj, W, xT)


def moment_monte_carlo(q: MomentQuery, n_samples: int = 1_000_000, seed: int = 0):
    """Plain sample average of the target expression and its standard error."""
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    L = covariance_factor(q.sigma)
    total = None
    total_sq = None
    done, k = 0, 0
    while done < n_samples:
        n = min(MC_CHUNK, n_samples - done)
        vals = _sample_chunk(q, L, np.random.default_rng([seed, k]), n)
        s, s2 = vals.sum(axis=0), (vals**2).sum(axis=0)
        total = s if total is None else total + s
        total_sq = s2 if total_sq is None else total_sq + s2
        done += n
        k += 1
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean**2, 0.0) * n_samples / (n_samples - 1)
    return mean, np.sqrt(var / n_samples)


@dataclass
class AuditRow:
    formula_id: str
    i: int
    j: int | None
    closed_form: float
    oracle: float
    se: float

    @property
    def rel_diff(self) -> float:
        return (self.closed_form - self.oracle) / self.oracle if self.oracle != 0 else float("inf")


FORMULA_IDS = {k: k for k in WALK_KINDS}


def audit_walk_formulas(i_values=(10, 50, 250), W=None, sigma=None, n_samples: int = 1_000_000,
                        seed: int = 0, j_factor: int = 2, T_factor: int = 4):
    """Tabulate printed walk formulas against the sampler.

    Pairs use ``j = j_factor * i`` and the ``x_T`` cross term ``T = T_factor * i``.
    Returns ``(rows, shrinking)`` where ``shrinking[formula_id]`` says whether
    ``|rel_diff|`` decreases monotonically along ``i_values``.
    """
    W = np.eye(8) if W is None else np.asarray(W, dtype=float)
    sigma = np.eye(W.shape[0]) if sigma is None else np.asarray(sigma, dtype=float)
    rows = []
    for n_kind, kind in enumerate(WALK_KINDS):
        for n_i, i in enumerate(i_values):
            j = None if kind in ("walk_quad", "walk_quad_quad_same") else j_factor * i
            T = T_factor * i if kind == "cross_with_T" else None
            q = MomentQuery(kind, W, sigma, i=i, j=j, T=T)
            est, se = moment_monte_carlo(q, n_samples, seed=seed + 1000 * n_kind + n_i)
            rows.append(AuditRow(FORMULA_IDS[kind], i, j, float(moment_closed_form(q)), float(est), float(se)))
    shrinking = {}
    for fid in FORMULA_IDS.values():
        rel = [abs(r.rel_diff) for r in rows if r.formula_id == fid]
        shrinking[fid] = all(b < a for a, b in zip(rel, rel[1:]))
    return rows, shrinking


def write_audit_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["formula-id", "i", "j", "closed_form", "oracle", "se", "rel_diff"])
        for r in rows:
            w.writerow([r.formula_id, r.i, "" if r.j is None else r.j,
                        repr(r.closed_form), repr(r.oracle), repr(r.se), repr(r.rel_diff)])
