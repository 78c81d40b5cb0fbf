"""Split R-hat and effective sample size.

Both work on split chains: each chain is cut into two halves (dropping the
last draw when the length is odd), giving ``M`` sequences of length ``n``.

* ``W`` is the mean within-sequence variance, ``B/n`` the variance of the
  sequence means, ``var+ = (n-1)/n W + B/n`` and ``R-hat = sqrt(var+/W)``.
* For ESS the per-lag correlation is
  ``rho_t = 1 - (W - mean_m acov_m(t)) / var+`` with biased (1/n) FFT
  autocovariances.  Pairs ``rho_{2s} + rho_{2s+1}`` are summed until the
  first negative pair; ``tau = -1 + 2 * sum`` and ``n_eff = M n / tau``,
  capped at the number of draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDraws


@dataclass
class DiagnosticsReport:
    rhat: np.ndarray
    n_eff: np.ndarray
    zero_variance: np.ndarray
    names: tuple = ()

    @property
    def n_eff_median(self):
        return float(np.median(self.n_eff))

    @property
    def n_eff_min(self):
        return float(np.min(self.n_eff))

    @property
    def n_eff_max(self):
        return float(np.max(self.n_eff))

    @property
    def max_rhat(self):
        return float(np.max(self.rhat))


def _split(chains):
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[:, :, None]
    m, n = chains.shape[:2]
    if m < 2 or n < 4:
        raise InsufficientDraws(f"need >=2 chains of >=4 draws, got {m} x {n}")
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)


def _autocov(x):
    """Biased autocovariance along axis 1 for an (M, n, P) array."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def split_rhat(chains):
    """Split R-hat per parameter; returns (rhat, zero_variance_flag)."""
    s = _split(chains)
    n = s.shape[1]
    w = s.var(axis=1, ddof=1).mean(axis=0)
    b_over_n = s.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    zero = w <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(zero, 1.0, np.sqrt(var_plus / np.where(zero, 1.0, w)))
    return rhat, zero


def effective_sample_size(chains):
    s = _split(chains)
    m, n, p = s.shape
    total = m * n
    acov = _autocov(s)
    w = s.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * w + s.mean(axis=1).var(axis=0, ddof=1)
    mean_acov = acov.mean(axis=0)  # (n, P)
    out = np.empty(p)
    for j in range(p):
        if not var_plus[j] > 0:
            out[j] = float(total)
            continue
        rho = 1.0 - (w[j] - mean_acov[:, j]) / var_plus[j]
        rho[0] = 1.0
        acc = 0.0
        t = 0
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            acc += pair
            t += 2
        tau = -1.0 + 2.0 * acc
        out[j] = total / tau if tau > 0 else float(total)
    return np.minimum(out, float(total))


def diagnostics(draws) -> DiagnosticsReport:
    """Diagnostics for a :class:`PosteriorDraws` or a raw (chains, n, P) array."""
    if hasattr(draws, "by_chain"):
        arr = draws.by_chain()
        from .gmrf import PARAM_NAMES
        names = PARAM_NAMES
    else:
        arr = np.asarray(draws, dtype=float)
        names = ()
    rhat, zero = split_rhat(arr)
    return DiagnosticsReport(rhat, effective_sample_size(arr), zero, names)
