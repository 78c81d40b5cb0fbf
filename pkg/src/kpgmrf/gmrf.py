"""Per-country precision and covariance assembly.

The global precision is block diagonal by country with one shared
``3T x 3T`` block, and the random-effect covariance is likewise block
diagonal, so everything here works on a single country block.  The global
``3TN x 3TN`` matrices are never formed outside of tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NonPositiveDiagonal, NotPositiveDefinite
from .panel import FIRST_YEAR, LAST_YEAR, N_POP, N_REGION, POPULATIONS, REGION_CODES

N_YEARS = LAST_YEAR - FIRST_YEAR + 1
PAIRS = ((0, 1), (0, 2), (1, 2))
N_PARAMS = N_REGION * N_POP + 4 * N_POP

# offsets into the flat parameter vector
MU = slice(0, N_REGION * N_POP)
TAU = slice(21, 24)
S = slice(24, 27)
GAMMA = slice(27, 30)
RHO = slice(30, 33)


def param_names():
    names = [f"mu_{r}_{p}" for r in REGION_CODES for p in POPULATIONS]
    names += [f"tau_{p}" for p in POPULATIONS]
    names += [f"s_{p}" for p in POPULATIONS]
    names += [f"gamma_{p}" for p in POPULATIONS]
    names += [f"rho_{POPULATIONS[a]}_{POPULATIONS[b]}" for a, b in PAIRS]
    return names


PARAM_NAMES = tuple(param_names())


@dataclass(frozen=True)
class StructuralParams:
    """The 33 structural parameters.

    ``mu`` is (7, 3) regional means; ``tau``, ``s``, ``gamma`` are per
    population; ``rho`` follows pair order (MSM,FSW), (MSM,PWID), (FSW,PWID).
    ``tau`` must be positive unless ``allow_zero_tau`` is set, which the
    country-effect ablation and a few analytic checks rely on.
    """

    mu: np.ndarray
    tau: np.ndarray
    s: np.ndarray
    gamma: np.ndarray
    rho: np.ndarray
    allow_zero_tau: bool = field(default=False, compare=False)

    def __post_init__(self):
        shapes = {"mu": (N_REGION, N_POP), "tau": (N_POP,), "s": (N_POP,),
                  "gamma": (N_POP,), "rho": (len(PAIRS),)}
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        lo_ok = self.tau >= 0 if self.allow_zero_tau else self.tau > 0
        if not np.all(lo_ok):
            raise ValueError(f"tau must be {'>=' if self.allow_zero_tau else '>'} 0, got {self.tau}")

    def to_vector(self):
        return np.concatenate([self.mu.ravel(), self.tau, self.s, self.gamma, self.rho])

    @classmethod
    def from_vector(cls, theta, allow_zero_tau=False):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {theta.shape}")
        return cls(theta[MU].reshape(N_REGION, N_POP), theta[TAU], theta[S], theta[GAMMA],
                   theta[RHO], allow_zero_tau=allow_zero_tau)

    def replace(self, **kw):
        d = dict(mu=self.mu, tau=self.tau, s=self.s, gamma=self.gamma, rho=self.rho,
                 allow_zero_tau=self.allow_zero_tau)
        d.update(kw)
        return StructuralParams(**d)


def build_temporal_block(s, gamma, n_years=N_YEARS):
    """Tridiagonal precision: ``s`` on the diagonal, ``gamma`` beside it."""
    if n_years < 1:
        raise ValueError("n_years must be >= 1")
    if not s > 0:
        raise NonPositiveDiagonal(f"temporal diagonal must be positive, got {s}")
    m = np.diag(np.full(n_years, float(s)))
    if n_years > 1:
        off = np.full(n_years - 1, float(gamma))
        m += np.diag(off, 1) + np.diag(off, -1)
    return m


def build_cross_block(rho, n_years=N_YEARS):
    if n_years < 1:
        raise ValueError("n_years must be >= 1")
    return float(rho) * np.eye(n_years)


def _assemble_precision(s, gamma, rho, n_years):
    T = n_years
    q = np.zeros((N_POP * T, N_POP * T))
    for k in range(N_POP):
        q[k * T:(k + 1) * T, k * T:(k + 1) * T] = build_temporal_block(s[k], gamma[k], T)
    for (a, b), r in zip(PAIRS, rho):
        blk = build_cross_block(r, T)
        q[a * T:(a + 1) * T, b * T:(b + 1) * T] = blk
        q[b * T:(b + 1) * T, a * T:(a + 1) * T] = blk
    return q


def build_country_precision(params: StructuralParams, n_years=N_YEARS, check=True):
    """The shared per-country precision block (3T x 3T).

    Raises NotPositiveDefinite when its Cholesky factorization fails.
    """
    q = _assemble_precision(params.s, params.gamma, params.rho, n_years)
    if check:
        _cholesky(q, "country precision block")
    return q


def build_omega(tau, n_years=N_YEARS):
    """Random-effect covariance for one country: blocks ``tau_k * J``."""
    T = n_years
    om = np.zeros((N_POP * T, N_POP * T))
    for k in range(N_POP):
        om[k * T:(k + 1) * T, k * T:(k + 1) * T] = tau[k]
    return om


def _cholesky(m, what):
    try:
        return linalg.cholesky(m, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(f"{what} is not positive definite") from exc


@dataclass(frozen=True)
class CountryCovariance:
    sigma: np.ndarray
    chol: np.ndarray
    country: int | None = None

    def __post_init__(self):
        self.sigma.setflags(write=False)
        self.chol.setflags(write=False)


def precision_inverse(q):
    lq = _cholesky(q, "country precision block")
    qinv = linalg.cho_solve((lq, True), np.eye(q.shape[0]))
    return 0.5 * (qinv + qinv.T)


def covariance_matrix(params: StructuralParams, n_years=N_YEARS):
    """Q^-1 + Omega for one country, without the final Cholesky."""
    q = build_country_precision(params, n_years, check=False)
    return precision_inverse(q) + build_omega(params.tau, n_years)


def build_country_covariance(params: StructuralParams, n_years=N_YEARS, country=None) -> CountryCovariance:
    sigma = covariance_matrix(params, n_years)
    return CountryCovariance(sigma, _cholesky(sigma, "country covariance"), country)


def build_mean(params: StructuralParams, panel):
    """Length-3TN mean vector; constant across years within (country, population)."""
    per_country = params.mu[panel.region]  # (N, 3)
    return np.repeat(per_country, panel.n_years, axis=1).ravel()


def mid_position(n_years):
    return (n_years - 1) // 2


def implied_correlations(params: StructuralParams, n_years=N_YEARS, sigma=None):
    """3x3 summary of correlations implied by the country covariance.

    Diagonal: lag-1 autocorrelation between the mid-series year and the next
    one.  Off-diagonal: same-year cross-population correlation at the
    mid-series year.
    """
    if sigma is None:
        sigma = covariance_matrix(params, n_years)
        _cholesky(sigma, "country covariance")
    T = n_years
    m = mid_position(T)
    sd = np.sqrt(np.diag(sigma))
    corr = sigma / np.outer(sd, sd)
    out = np.empty((N_POP, N_POP))
    for k in range(N_POP):
        out[k, k] = corr[k * T + m, k * T + m + 1] if T > 1 else np.nan
    for a, b in PAIRS:
        out[a, b] = out[b, a] = corr[a * T + m, b * T + m]
    return out

