"""Gaussian random-walk token sequences and covariance construction.

Tokens follow ``x_1 ~ N(0, S)`` and ``x_{t+1} ~ N(x_t, S)``, so that
``Cov(x_s, x_t) = min(s, t) * S``.  Sequences are stored column-wise, i.e. a
``(d, T)`` matrix whose columns are ``x_1 .. x_T``; the prediction target is
``x_{T+1}``.

Batches are generated in fixed-size chunks whose generators are seeded by
``(seed, chunk_index)``, so the result does not depend on how many chunks are
produced at once or in which order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InvalidCovarianceError, InvalidDimensionError

PSD_TOL = 1e-8
CHUNK = 512


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str = "isotropic"  # "isotropic" | "factored"
    dim: int = 1
    factor_bound: float = 2.5
    seed: int = 0


@dataclass
class TokenSequence:
    data: np.ndarray  # (d, T)
    target: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]


def make_covariance(spec: CovarianceSpec) -> np.ndarray:
    """Realize the covariance matrix described by ``spec``.

    The factored kind draws ``R`` element-wise from ``U(-b, b)`` and returns
    ``R^T R / d``.
    """
    d = int(spec.dim)
    if d < 1:
        raise InvalidDimensionError(f"covariance dimension must be >= 1, got {d}")
    if spec.kind == "isotropic":
        return np.eye(d)
    if spec.kind == "factored":
        rng = np.random.default_rng(spec.seed)
        b = float(spec.factor_bound)
        R = rng.uniform(-b, b, size=(d, d))
        cov = R.T @ R / d
        return 0.5 * (cov + cov.T)
    raise ValueError(f"unknown covariance kind {spec.kind!r}")


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == cov`` for a symmetric PSD ``cov``.

    Eigenvalues in ``[-PSD_TOL, 0)`` are clamped to zero; anything more
    negative is rejected.  Works for singular matrices, where Cholesky does not.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] < 1:
        raise InvalidDimensionError(f"covariance must be a non-empty square matrix, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * max(1.0, np.abs(cov).max())):
        raise InvalidCovarianceError("covariance must be symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if evals.min() < -PSD_TOL:
        raise InvalidCovarianceError(
            f"covariance is not positive semi-definite (min eigenvalue {evals.min():.3e})"
        )
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def _walk_chunk(factor: np.ndarray, T: int, n: int, rng: np.random.Generator) -> np.ndarray:
    d = factor.shape[0]
    steps = rng.standard_normal((n, T + 1, d)) @ factor.T
    return np.cumsum(steps, axis=1)  # (n, T+1, d), row t is x_{t+1}


def generate_walk(cov: np.ndarray, T: int, seed: int) -> TokenSequence:
    """Draw one sequence ``x_1..x_T`` together with its target ``x_{T+1}``."""
    if T < 1:
        raise InvalidDimensionError(f"sequence length must be >= 1, got {T}")
    factor = covariance_factor(cov)
    path = _walk_chunk(factor, T, 1, np.random.default_rng(seed))[0]
    return TokenSequence(data=path[:T].T.copy(), target=path[T].copy())


def iter_walk_chunks(
    cov: np.ndarray, T: int, n: int, seed: int, chunk: int = CHUNK
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(X, Y)`` blocks with ``X`` of shape ``(m, d, T)`` and ``Y`` ``(m, d)``.

    Chunk ``k`` always uses ``default_rng([seed, k])``.
    """
    if T < 1:
        raise InvalidDimensionError(f"sequence length must be >= 1, got {T}")
    factor = covariance_factor(cov)
    done, k = 0, 0
    while done < n:
        m = min(chunk, n - done)
        path = _walk_chunk(factor, T, m, np.random.default_rng([seed, k]))
        yield np.ascontiguousarray(path[:, :T].transpose(0, 2, 1)), path[:, T].copy()
        done += m
        k += 1


def walk_batch(cov: np.ndarray, T: int, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Materialize ``n`` walks as arrays ``X (n, d, T)`` and ``Y (n, d)``."""
    xs, ys = zip(*iter_walk_chunks(cov, T, n, seed)) if n > 0 else ((), ())
    if not xs:
        d = np.asarray(cov).shape[0]
        return np.zeros((0, d, T)), np.zeros((0, d))
    return np.concatenate(xs), np.concatenate(ys)


def walk_sequences(cov: np.ndarray, T: int, n: int, seed: int) -> list[TokenSequence]:
    X, Y = walk_batch(cov, T, n, seed)
    return [TokenSequence(data=x, target=y) for x, y in zip(X, Y)]
