"""Query-key matrices with prescribed eigenspectra and the spectral summaries
that govern attention localization.

Throughout, ``W = sym(W_QK) @ S`` folds the data covariance ``S`` into the
(symmetrized) query-key matrix.  Its mean ``tr(W)`` and scale ``tr(W^2)``
define the shape parameters

    xi  = tr(W) / sqrt(tr(W^2))
    eta = sqrt(tr(W^2)) / lam
    r   = xi * eta = tr(W) / lam
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDimensionError, InvalidTemperatureError

NORM_TOL = 1e-10


@dataclass(frozen=True)
class EigenSpec:
    dim: int
    mean: float = 0.0
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("eigenvalue scale must be nonnegative")


@dataclass(frozen=True)
class ShapeParams:
    xi: float
    eta: float
    r: float
    lam: float


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR with sign-fixed diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def compose_spectrum(eigenvalues, basis) -> np.ndarray:
    m = (basis * np.asarray(eigenvalues, dtype=float)) @ basis.T
    return symmetrize(m)


def sample_wqk(spec: EigenSpec, return_eigenvalues: bool = False):
    """Draw eigenvalues from ``N(mean, scale^2)`` and rotate by a Haar basis.

    A zero scale returns ``mean * I`` exactly.
    """
    d = int(spec.dim)
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    rng = np.random.default_rng(spec.seed)
    if spec.scale == 0:
        w = np.full(d, float(spec.mean))
        m = float(spec.mean) * np.eye(d)
    else:
        w = rng.normal(spec.mean, spec.scale, size=d)
        m = compose_spectrum(w, haar_orthogonal(d, rng))
    return (m, w) if return_eigenvalues else m


def spectrum_with_shape(d: int, xi: float, eta: float, lam: float, seed: int = 0):
    """Eigenvalues hitting prescribed ``(xi, eta)`` exactly.

    The spectrum is ``c * (cos(phi) 1/sqrt(d) + sin(phi) u)`` with ``u`` a random
    unit vector orthogonal to the all-ones vector, ``cos(phi) = xi / sqrt(d)`` and
    ``c = eta * lam``.
    """
    if abs(xi) > np.sqrt(d) + 1e-12:
        raise ValueError(f"|xi| must not exceed sqrt(d) = {np.sqrt(d):.4g}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    u -= u.mean()
    nu = np.linalg.norm(u)
    u = u / nu if nu > 0 else np.zeros(d)
    cphi = xi / np.sqrt(d)
    sphi = np.sqrt(max(0.0, 1.0 - cphi**2))
    return eta * lam * (cphi / np.sqrt(d) + sphi * u)


def wqk_with_shape(d: int, xi: float, eta: float, lam: float, seed: int = 0) -> np.ndarray:
    """Symmetric ``W_QK`` with the requested shape parameters under ``S = I``."""
    rng = np.random.default_rng([seed, 1])
    w = spectrum_with_shape(d, xi, eta, lam, seed)
    return compose_spectrum(w, haar_orthogonal(d, rng))


def _folded(wqk, sigma):
    wqk = np.asarray(wqk, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if wqk.ndim != 2 or wqk.shape != sigma.shape or wqk.shape[0] != wqk.shape[1]:
        raise InvalidDimensionError(f"shape mismatch: W_QK {wqk.shape}, covariance {sigma.shape}")
    return symmetrize(wqk) @ sigma


def traces(wqk, sigma) -> tuple[float, float]:
    """``(tr(W), tr(W^2))`` with ``W = sym(W_QK) S``."""
    W = _folded(wqk, sigma)
    return float(np.trace(W)), float(np.sum(W * W.T))


def shape_params(wqk, sigma, lam: float) -> ShapeParams:
    if not lam > 0:
        raise InvalidTemperatureError(f"temperature must be positive, got {lam}")
    tr1, tr2 = traces(wqk, sigma)
    if tr2 <= 0.0:
        # 0/0 convention; downstream treats eta == 0 as the exact W = 0 path
        return ShapeParams(xi=0.0, eta=0.0, r=0.0, lam=float(lam))
    root = np.sqrt(tr2)
    return ShapeParams(xi=tr1 / root, eta=root / lam, r=tr1 / lam, lam=float(lam))


def eigenspectrum_variance(wqk, sigma) -> float:
    """``d tr(W^2) - tr(W)^2``, i.e. ``d^2`` times the eigenvalue variance."""
    d = np.asarray(wqk).shape[0]
    tr1, tr2 = traces(wqk, sigma)
    return d * tr2 - tr1**2


@dataclass
class CollapseBounds:
    """Norms of ``W_QK`` and the two inequality chains relating them to ``tr(W)``.

    ``l1_norm`` is the entrywise l1 norm; ``l1_induced`` the max-column-sum norm.
    ``links`` records every individual inequality so failures can be located.
    """

    l1_norm: float
    l1_induced: float
    spectral_norm: float
    frobenius_norm: float
    trace_w: float
    trace_w2: float
    trace_wqk: float
    lower_bound_chain_holds: bool
    upper_bound_chain_holds: bool | None
    upper_checked: bool
    links: dict = field(default_factory=dict)


def _leq(a, b, scale):
    return bool(a <= b + NORM_TOL * max(1.0, scale))


def collapse_bounds(wqk, sigma) -> CollapseBounds:
    """Evaluate both chains numerically.

    Lower chain (as printed):
        |tr W| / (sqrt(d) ||S||_2) <= ||W_QK||_2 <= ||W_QK||_F <= ||W_QK||_1
    Upper chain (as printed, needs ``S`` invertible):
        ||S^-1||_F sqrt(tr W^2) >= |tr W_QK| >= ||W_QK||_2

    The link ``trace_over_sigma <= frobenius`` is the Cauchy-Schwarz form that
    holds for every input and is reported alongside.
    """
    wqk = np.asarray(wqk, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d = wqk.shape[0]
    tr1, tr2 = traces(wqk, sigma)
    spec = float(np.linalg.norm(wqk, 2))
    frob = float(np.linalg.norm(wqk, "fro"))
    l1 = float(np.abs(wqk).sum())
    l1_ind = float(np.linalg.norm(wqk, 1))
    sig2 = float(np.linalg.norm(sigma, 2))
    tr_wqk = float(np.trace(wqk))
    scale = max(spec, frob, l1, abs(tr1), 1e-300)

    lhs = abs(tr1) / (np.sqrt(d) * sig2) if sig2 > 0 else (0.0 if tr1 == 0 else np.inf)
    links = {
        "trace_over_sigma<=spectral": _leq(lhs, spec, scale),
        "spectral<=frobenius": _leq(spec, frob, scale),
        "frobenius<=l1": _leq(frob, l1, scale),
        "frobenius<=l1_induced": _leq(frob, l1_ind, scale),
        "trace_over_sigma<=frobenius": _leq(lhs, frob, scale),
    }
    lower = links["trace_over_sigma<=spectral"] and links["spectral<=frobenius"] and links["frobenius<=l1"]

    upper = None
    checked = False
    if np.linalg.matrix_rank(sigma) == d:
        checked = True
        inv_f = float(np.linalg.norm(np.linalg.inv(sigma), "fro"))
        top = inv_f * np.sqrt(max(tr2, 0.0))
        links["sigma_inv_bound>=abs_trace_wqk"] = _leq(abs(tr_wqk), top, max(scale, top))
        links["abs_trace_wqk>=spectral"] = _leq(spec, abs(tr_wqk), scale)
        upper = links["sigma_inv_bound>=abs_trace_wqk"] and links["abs_trace_wqk>=spectral"]

    return CollapseBounds(
        l1_norm=l1,
        l1_induced=l1_ind,
        spectral_norm=spec,
        frobenius_norm=frob,
        trace_w=tr1,
        trace_w2=tr2,
        trace_wqk=tr_wqk,
        lower_bound_chain_holds=lower,
        upper_bound_chain_holds=upper,
        upper_checked=checked,
        links=links,
    )


def audit_collapse_bounds(n_draws: int = 100, d: int = 16, seed: int = 0) -> dict:
    """Per-link hold rates over random symmetric ``W_QK`` and factored ``S``."""
    rng = np.random.default_rng(seed)
    counts: dict[str, int] = {}
    lower = upper = 0
    for k in range(n_draws):
        spec = EigenSpec(dim=d, mean=rng.normal(0, 0.5), scale=abs(rng.normal(0, 1)) + 1e-3, seed=int(rng.integers(2**31)))
        wqk = sample_wqk(spec)
        R = rng.uniform(-2.5, 2.5, size=(d, d))
        sigma = R.T @ R / d + 1e-3 * np.eye(d)
        cb = collapse_bounds(wqk, sigma)
        lower += cb.lower_bound_chain_holds
        upper += bool(cb.upper_bound_chain_holds)
        for name, ok in cb.links.items():
            counts[name] = counts.get(name, 0) + int(ok)
    rates = {name: c / n_draws for name, c in counts.items()}
    return {"n_draws": n_draws, "lower_chain_rate": lower / n_draws, "upper_chain_rate": upper / n_draws, "link_rates": rates}
