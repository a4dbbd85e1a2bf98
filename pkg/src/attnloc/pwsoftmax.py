"""Softmax, its first-order Taylor coefficients at the origin, and the
clamped piecewise-linear surrogate.

Token indices ``i`` in this module are 1-based (``1 <= i <= T``), matching the
relative position ``theta = i / T`` used elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

CLAMPED_LOW = -1
LINEAR = 0
CLAMPED_HIGH = 1


@dataclass(frozen=True)
class TaylorCoeffs:
    gamma: np.ndarray
    gamma0: float
    index: int


@dataclass(frozen=True)
class PiecewiseCoeffs:
    Gamma: np.ndarray  # (T, T), column i is the active slope for output i
    gamma0_tilde: np.ndarray  # (T,)
    region: np.ndarray  # (T,), int8 codes CLAMPED_LOW / LINEAR / CLAMPED_HIGH


def _check_finite(omega):
    omega = np.asarray(omega, dtype=float)
    if np.isnan(omega).any():
        raise InvalidInputError("softmax input contains NaN")
    return omega


def softmax(omega, axis=-1):
    omega = _check_finite(omega)
    shifted = omega - omega.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def taylor_coeffs(T: int, i: int) -> TaylorCoeffs:
    if not 1 <= i <= T:
        raise IndexError(f"token index {i} outside 1..{T}")
    gamma = np.full(T, -1.0 / T**2)
    gamma[i - 1] += 1.0 / T
    return TaylorCoeffs(gamma=gamma, gamma0=1.0 / T, index=i)


def linear_argument(omega, axis=-1):
    """``<gamma^i, omega> + gamma0^i`` for every ``i`` at once.

    Equals ``(omega_i - mean(omega)) / T + 1 / T`` along ``axis``.
    """
    omega = np.asarray(omega, dtype=float)
    T = omega.shape[axis]
    return (omega - omega.mean(axis=axis, keepdims=True)) / T + 1.0 / T


def propagates(z):
    """Closed-interval test ``z in [0, 1]``; boundary values count as linear."""
    return (z >= 0.0) & (z <= 1.0)


def piecewise_softmax(omega) -> tuple[np.ndarray, PiecewiseCoeffs]:
    omega = _check_finite(omega)
    if omega.ndim != 1:
        raise InvalidInputError("piecewise_softmax expects a 1-D input")
    T = omega.shape[0]
    z = linear_argument(omega)
    region = np.where(z < 0.0, CLAMPED_LOW, np.where(z > 1.0, CLAMPED_HIGH, LINEAR)).astype(np.int8)
    live = region == LINEAR
    gamma = np.eye(T) / T - 1.0 / T**2
    Gamma = gamma * live[None, :]
    gamma0 = np.where(live, 1.0 / T, np.where(region == CLAMPED_HIGH, 1.0, 0.0))
    values = np.clip(z, 0.0, 1.0)
    return values, PiecewiseCoeffs(Gamma=Gamma, gamma0_tilde=gamma0, region=region)


def piecewise_softmax_batched(omega, axis=-1):
    """Clamped surrogate and its linear-region mask for arbitrary batch shapes."""
    z = linear_argument(_check_finite(omega), axis=axis)
    return np.clip(z, 0.0, 1.0), propagates(z)
