"""Signal propagation probability (SPP).

For token ``i`` the SPP is ``P{ <gamma^i, omega> + gamma0^i in [0, 1] }`` with
``omega = X^T W_QK x_T / lam``.  Three routes are provided:

* ``spp_monte_carlo`` -- the frequency over sampled random walks;
* ``rho_gaussian`` -- a normal approximation from a mean and variance;
* ``rho_theory`` -- the closed-form curve over relative position ``theta``.

The closed-form variance comes in two forms.  ``variance="paper"`` uses the
printed coefficient ``2 theta^2 + 7/12``.  ``variance="corrected"`` uses
``2 theta^2 - 2 theta + 7/12``, which is what the walk model actually gives to
leading order (see ``spp_mean_var_exact`` for the finite-``T`` value).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import EmptyBatchError, InvalidDimensionError, InvalidTemperatureError
from .pwsoftmax import linear_argument, propagates
from .randwalk import iter_walk_chunks
from .spectrum import ShapeParams, symmetrize

VARIANCE_FORMS = ("paper", "corrected")


@dataclass
class SppProfile:
    values: np.ndarray
    positions: np.ndarray
    kind: str  # "monte-carlo" | "gaussian-analytic" | "closed-form" | "empirical"
    n_samples: int | None = None


@dataclass(frozen=True)
class MeanVar:
    mu: float
    v: float
    index: int


def default_lambda(d: int) -> float:
    return float(np.sqrt(d))


def _check_lam(lam):
    if not lam > 0:
        raise InvalidTemperatureError(f"temperature must be positive, got {lam}")


def omega_batch(X, wqk, lam):
    """``omega = X^T W_QK x_T / lam`` for a batch ``X`` of shape ``(n, d, T)``."""
    X = np.asarray(X, dtype=float)
    wq = X[:, :, -1] @ np.asarray(wqk, dtype=float).T  # rows are W_QK x_T
    return np.einsum("ndt,nd->nt", X, wq) / lam


def spp_monte_carlo(wqk, cov, T: int, lam: float | None = None, n_walks: int = 1000, seed: int = 0) -> SppProfile:
    """Fraction of sampled walks whose ``i``-th softmax coordinate stays linear."""
    wqk = np.asarray(wqk, dtype=float)
    if wqk.shape != np.asarray(cov).shape:
        raise InvalidDimensionError(f"W_QK {wqk.shape} and covariance {np.shape(cov)} disagree")
    lam = default_lambda(wqk.shape[0]) if lam is None else lam
    _check_lam(lam)
    if n_walks < 1:
        raise ValueError("n_walks must be >= 1")
    hits = np.zeros(T)
    for X, _ in iter_walk_chunks(cov, T, n_walks, seed):
        hits += propagates(linear_argument(omega_batch(X, wqk, lam))).sum(axis=0)
    return SppProfile(values=hits / n_walks, positions=np.arange(1, T + 1), kind="monte-carlo", n_samples=n_walks)


def linear_argument_samples(wqk, cov, T: int, indices, lam: float | None = None, n_walks: int = 10000, seed: int = 0):
    """Samples of ``<gamma^i, omega> + gamma0^i`` for the given 1-based indices.

    Returns an array of shape ``(n_walks, len(indices))``.
    """
    wqk = np.asarray(wqk, dtype=float)
    lam = default_lambda(wqk.shape[0]) if lam is None else lam
    cols = np.asarray(indices, dtype=int) - 1
    out = []
    for X, _ in iter_walk_chunks(cov, T, n_walks, seed):
        xbar = X.mean(axis=2)
        wq = X[:, :, -1] @ wqk.T
        centered = X[:, :, cols] - xbar[:, :, None]
        out.append(np.einsum("ndk,nd->nk", centered, wq) / (lam * T) + 1.0 / T)
    return np.concatenate(out)


def _variance_coeff(theta, variance):
    theta = np.asarray(theta, dtype=float)
    if variance == "paper":
        return 2.0 * theta**2 + 7.0 / 12.0
    if variance == "corrected":
        return 2.0 * theta**2 - 2.0 * theta + 7.0 / 12.0
    raise ValueError(f"variance must be one of {VARIANCE_FORMS}, got {variance!r}")


def spp_mean_var(i: int, T: int, wqk, cov, lam: float | None = None, variance: str = "paper") -> MeanVar:
    """Leading-order mean and variance of ``<gamma^i, omega> + gamma0^i``.

    ``mu = (i/T - 1/2) tr(W) / lam`` and ``v = c(i/T) tr(W^2) / lam^2`` where the
    coefficient ``c`` depends on ``variance`` (see module docstring).
    """
    from .spectrum import traces

    if not 1 <= i <= T:
        raise IndexError(f"token index {i} outside 1..{T}")
    lam = default_lambda(np.shape(wqk)[0]) if lam is None else lam
    _check_lam(lam)
    tr1, tr2 = traces(wqk, cov)
    theta = i / T
    mu = (theta - 0.5) * tr1 / lam
    v = float(_variance_coeff(theta, variance)) * tr2 / lam**2
    return MeanVar(mu=float(mu), v=max(float(v), 0.0), index=i)


def spp_mean_var_exact(i: int, T: int, wqk, cov, lam: float | None = None) -> MeanVar:
    """Exact finite-``T`` moments for symmetric ``W_QK`` under ``Cov(x_s, x_t) = min(s, t) S``.

    With ``a = x_i - mean_t x_t`` and ``b = x_T``, Isserlis' theorem gives
    ``E[a^T W b] = k_ab tr(W)`` and ``Var[a^T W b] = (k_aa k_bb + k_ab^2) tr(W^2)``.
    """
    from .spectrum import traces

    if not 1 <= i <= T:
        raise IndexError(f"token index {i} outside 1..{T}")
    lam = default_lambda(np.shape(wqk)[0]) if lam is None else lam
    _check_lam(lam)
    tr1, tr2 = traces(wqk, cov)
    k_bb = float(T)
    k_ab = i - (T + 1) / 2.0
    k_aa = i - 2.0 * (i * T - i * (i - 1) / 2.0) / T + (T + 1) * (2 * T + 1) / (6.0 * T)
    mu = k_ab * tr1 / (lam * T) + 1.0 / T
    v = (k_aa * k_bb + k_ab**2) * tr2 / (lam * T) ** 2
    return MeanVar(mu=float(mu), v=float(v), index=i)


def rho_gaussian(mv: MeanVar | None = None, *, mu=None, v=None):
    """``P{N(mu, v) in [0, 1]}``; a zero variance gives the indicator of ``mu in [0, 1]``."""
    if mv is not None:
        mu, v = mv.mu, mv.v
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("variance must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sqrt(2.0 * v)
        val = 0.5 * (erf((1.0 - mu) / s) + erf(mu / s))
    out = np.where(v > 0, val, ((mu >= 0) & (mu <= 1)).astype(float))
    return float(out) if out.ndim == 0 else out


def rho_theory(theta, params: ShapeParams, variance: str = "paper"):
    """Closed-form SPP curve ``rho(theta) = Phi((theta-1/2) xi) - Phi((theta-1/2) xi - 1/eta)``.

    ``Phi(z; theta) = erf(z / sqrt(2 c(theta))) / 2``.  ``eta == 0`` is the
    degenerate zero-variance case and returns the indicator of
    ``(theta - 1/2) r in [0, 1]``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < 0) | (theta > 1)):
        raise ValueError("theta must lie in [0, 1]")
    if params.eta == 0:
        mu = (theta - 0.5) * params.r
        out = ((mu >= 0) & (mu <= 1)).astype(float)
    else:
        s = np.sqrt(2.0 * _variance_coeff(theta, variance))
        z = (theta - 0.5) * params.xi
        out = 0.5 * erf(z / s) - 0.5 * erf((z - 1.0 / params.eta) / s)
    return float(out) if out.ndim == 0 else out


def rho_theory_profile(T: int, params: ShapeParams, variance: str = "paper") -> SppProfile:
    pos = np.arange(1, T + 1)
    return SppProfile(values=rho_theory(pos / T, params, variance), positions=pos, kind="closed-form")


def rho_derivative(theta, params: ShapeParams, h: float = 1e-4, rho_fn=None):
    """Central difference of the closed form; one-sided at the ends of ``[0, 1]``."""
    rho_fn = rho_theory if rho_fn is None else rho_fn
    theta = np.asarray(theta, dtype=float)
    lo = np.clip(theta - h, 0.0, 1.0)
    hi = np.clip(theta + h, 0.0, 1.0)
    return (rho_fn(hi, params) - rho_fn(lo, params)) / (hi - lo)


def uniformity_bound(theta, xi, eta):
    """Bound ``|xi| / (sqrt(pi) (2(2 theta^2 + 7/12))^{3/2} eta)`` on ``|rho'|`` as printed."""
    theta = np.asarray(theta, dtype=float)
    return abs(xi) / (np.sqrt(np.pi) * (2.0 * (2.0 * theta**2 + 7.0 / 12.0)) ** 1.5 * eta)


def half_max_support(params: ShapeParams, n: int = 200001, variance: str = "paper", rho_fn=None) -> float:
    """Length of ``{theta : rho(theta) >= max(rho) / 2}`` on a uniform grid."""
    rho_fn = (lambda t, p: rho_theory(t, p, variance)) if rho_fn is None else rho_fn
    theta = np.linspace(0.0, 1.0, n)
    rho = rho_fn(theta, params)
    return float(np.count_nonzero(rho >= 0.5 * rho.max()) * (theta[1] - theta[0]))


@dataclass(frozen=True)
class LimitCase:
    kind: str  # "localization" | "uniformity" | "vanishing"
    xi: float
    eta: float

    @property
    def r(self) -> float:
        return self.xi * self.eta


@dataclass
class LimitResult:
    case: LimitCase
    metric: float
    threshold: float
    passed: bool
    detail: dict = field(default_factory=dict)


DEFAULT_LIMIT_CASES = (
    LimitCase("localization", 1e4, 1e-4),
    LimitCase("localization", 1e4, 4e-4),
    LimitCase("localization", -1e4, 1e-4),
    LimitCase("localization", -1e4, 4e-4),
    LimitCase("uniformity", 1e-6, 1.0),
    LimitCase("vanishing", 1.0, 1e6),
)


def limit_shape(theta, r):
    """Indicator the curve approaches as ``|xi| -> inf``, ``eta -> 0``, ``xi eta -> r``."""
    theta = np.asarray(theta, dtype=float)
    if r >= 0:
        if r <= 2:
            return (theta >= 0.5).astype(float), [0.5]
        return ((theta >= 0.5) & (theta <= 0.5 + 1 / r)).astype(float), [0.5, 0.5 + 1 / r]
    if r >= -2:
        return (theta <= 0.5).astype(float), [0.5]
    return ((theta >= 0.5 + 1 / r) & (theta <= 0.5)).astype(float), [0.5 + 1 / r, 0.5]


def verify_limits(cases=DEFAULT_LIMIT_CASES, rho_fn=None, step: float = 1e-3, edge: float = 1e-2,
                  tolerances=None) -> list[LimitResult]:
    """Numerically check the limiting regimes of the closed-form curve.

    ``rho_fn(theta, params)`` defaults to ``rho_theory``; passing a modified
    function lets callers confirm the checks are sensitive to the formula.
    """
    rho_fn = rho_theory if rho_fn is None else rho_fn
    tol = {"localization": 0.02, "uniformity": 1e-5, "vanishing": 1e-4}
    tol.update(tolerances or {})
    theta = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    results = []
    for case in cases:
        p = ShapeParams(xi=case.xi, eta=case.eta, r=case.r, lam=1.0)
        rho = rho_fn(theta, p)
        if case.kind == "localization":
            target, edges = limit_shape(theta, case.r)
            keep = np.ones_like(theta, dtype=bool)
            for e in edges:
                keep &= np.abs(theta - e) >= edge
            metric = float(np.max(np.abs(rho - target)[keep]))
            detail = {"edges": edges, "points": int(keep.sum())}
        elif case.kind == "uniformity":
            deriv = np.abs(rho_derivative(theta, p, rho_fn=rho_fn))
            bound = uniformity_bound(theta, case.xi, case.eta)
            metric = float(deriv.max())
            detail = {
                "printed_bound_max": float(bound.max()),
                "printed_bound_respected": bool(np.all(deriv <= bound + 1e-9)),
                "argmax_theta": float(theta[np.argmax(deriv)]),
                "rho_range": [float(rho.min()), float(rho.max())],
            }
        elif case.kind == "vanishing":
            metric = float(np.max(rho))
            detail = {}
        else:
            raise ValueError(f"unknown limit case kind {case.kind!r}")
        results.append(LimitResult(case=case, metric=metric, threshold=tol[case.kind],
                                   passed=bool(metric <= tol[case.kind]), detail=detail))
    return results


def spp_empirical_batch(params, batch) -> SppProfile:
    """Per-token frequency of the linear region over a batch, using the
    model's own (possibly asymmetric) first-layer ``W_QK``."""
    from .model import as_arrays

    X, _ = as_arrays(batch)
    if X.shape[0] == 0:
        raise EmptyBatchError("batch is empty")
    z = linear_argument(omega_batch(X, params.W_QK[0], params.lam))
    T = X.shape[2]
    return SppProfile(values=propagates(z).mean(axis=0), positions=np.arange(1, T + 1),
                      kind="empirical", n_samples=X.shape[0])
