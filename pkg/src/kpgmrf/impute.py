"""Posterior draws of log prevalence at every cell.

Missing cells come from the conditional normal given each country's
observed cells.  Observed cells are rebuilt as ``mu + b + eps`` by a short
Gibbs run per parameter draw; note that the error update there does not
condition on the data, so those values are a model-based reconstruction
rather than a posterior for a latent truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import kernels
from .errors import (
    IoError, MismatchedDrawCounts, NotPositiveDefinite, SingularObservedBlock,
)
from .gmrf import GAMMA, MU, RHO, S, TAU, _assemble_precision
from .panel import N_POP, POPULATIONS, PanelData, unflat_index
from .posterior import Design, PosteriorDraws, sigma_from_theta

ESTIMATE_HEADER = [
    "country", "population", "year",
    "log_mean", "log_median", "log_q2.5", "log_q97.5",
    "nat_mean", "nat_median", "nat_q2.5", "nat_q97.5",
]
CHANGE_HEADER = ["country", "population", "ratio_median", "pr_gt_1.5", "pr_lt_0.5", "class"]

# stream tags keep the two samplers' substreams apart for the same draw index
_PREDICT_STREAM = 0
_GIBBS_STREAM = 1


def conditional_gaussian(mean, cov, obs_idx, y_obs):
    """Mean and covariance of the unobserved coordinates given the observed ones.

    Uses a Cholesky factor of the observed block; no explicit inverse.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[0]
    obs = np.asarray(obs_idx, dtype=np.int64)
    if obs.size == 0 or obs.size >= n or len(np.unique(obs)) != obs.size:
        raise ValueError("obs_idx must be a nonempty proper subset of the coordinates")
    miss = np.setdiff1d(np.arange(n), obs)
    try:
        L = linalg.cholesky(cov[np.ix_(obs, obs)], lower=True)
    except linalg.LinAlgError as exc:
        raise SingularObservedBlock("observed covariance block is not positive definite") from exc
    s_om = cov[np.ix_(obs, miss)]
    w = linalg.solve_triangular(L, s_om, lower=True)
    a = linalg.solve_triangular(L, np.asarray(y_obs, dtype=float) - mean[obs], lower=True)
    cond_mean = mean[miss] + w.T @ a
    cond_cov = cov[np.ix_(miss, miss)] - w.T @ w
    return cond_mean, 0.5 * (cond_cov + cond_cov.T)


# --------------------------------------------------------------------------
# cell posteriors


@dataclass
class CellPosterior:
    """Draws of log prevalence for a set of cells.

    ``flat`` holds 0-based flat cell positions, ``draws`` is (D, n_cells) and
    ``draw_index`` records which parameter draw produced each row.
    ``cond_mean`` (optional, same shape as draws) holds conditional means used
    for the Rao-Blackwellized estimate.
    """

    flat: np.ndarray
    draws: np.ndarray
    draw_index: np.ndarray
    countries: tuple
    first_year: int
    n_years: int
    cond_mean: np.ndarray | None = None
    kind: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.draws.shape[0]

    @property
    def n_cells(self):
        return self.flat.shape[0]

    def cells(self):
        """(country code, population, year) per cell."""
        N = len(self.countries)
        out = []
        for f in self.flat:
            i, k, t = unflat_index(int(f) + 1, N, self.n_years, self.first_year)
            out.append((self.countries[i - 1], POPULATIONS[k], t))
        return out

    def summaries(self):
        """Dict of per-cell log- and natural-scale summaries.

        The natural-scale mean is the mean of exponentiated draws.
        """
        d = self.draws
        e = np.exp(d)
        if d.shape[0] == 0:
            nan = np.full(d.shape[1], np.nan)
            return {k: nan for k in ESTIMATE_HEADER[3:]}
        q = np.quantile(d, [0.5, 0.025, 0.975], axis=0)
        qe = np.quantile(e, [0.5, 0.025, 0.975], axis=0)
        return {
            "log_mean": d.mean(axis=0), "log_median": q[0], "log_q2.5": q[1], "log_q97.5": q[2],
            "nat_mean": e.mean(axis=0), "nat_median": qe[0], "nat_q2.5": qe[1], "nat_q97.5": qe[2],
        }

    def rao_blackwell_mean(self):
        """Average conditional mean; falls back to the draw mean when absent."""
        if self.cond_mean is None:
            return self.draws.mean(axis=0)
        return self.cond_mean.mean(axis=0)

    def column(self, flat):
        pos = np.searchsorted(self.flat, flat)
        if pos >= self.n_cells or self.flat[pos] != flat:
            raise KeyError(flat)
        return self.draws[:, pos]


def merge_cells(a: CellPosterior, b: CellPosterior) -> CellPosterior:
    """Union of two disjoint cell sets drawn from the same parameter draws."""
    if a.n_draws != b.n_draws or not np.array_equal(a.draw_index, b.draw_index):
        raise MismatchedDrawCounts(f"cannot pair {a.n_draws} draws with {b.n_draws} draws")
    if np.intersect1d(a.flat, b.flat).size:
        raise ValueError("cell sets overlap")
    flat = np.concatenate([a.flat, b.flat])
    order = np.argsort(flat, kind="stable")
    draws = np.concatenate([a.draws, b.draws], axis=1)[:, order]
    cm = None
    if a.cond_mean is not None or b.cond_mean is not None:
        ca = a.draws if a.cond_mean is None else a.cond_mean
        cb = b.draws if b.cond_mean is None else b.cond_mean
        cm = np.concatenate([ca, cb], axis=1)[:, order]
    return CellPosterior(flat[order], draws, a.draw_index.copy(), a.countries,
                         a.first_year, a.n_years, cm)


def _selected(draws: PosteriorDraws, thin):
    if draws.n_draws == 0:
        raise ValueError("no posterior draws")
    return np.arange(0, draws.n_draws, max(1, int(thin)))


def predict_missing(draws: PosteriorDraws, panel: PanelData, seed=0, thin=1) -> CellPosterior:
    """Sample every missing cell once per retained parameter draw.

    Normals for draw ``d`` come from ``default_rng([seed, d, 0])``, laid out
    country by country, so results do not depend on evaluation order.
    """
    sel = _selected(draws, thin)
    design = Design.from_panel(panel)
    N, B = design.y.shape
    miss = ~design.mask
    flat = np.flatnonzero(miss.ravel())
    out = np.empty((len(sel), flat.size))
    cm_out = np.empty((len(sel), flat.size))
    for row, d in enumerate(sel):
        theta = draws.draws[d]
        sigma = sigma_from_theta(theta, design.n_years)
        if sigma is None:
            raise NotPositiveDefinite(f"parameter draw {d} gives a non-PD precision")
        mean = design.mean(theta[MU])
        z = np.random.default_rng([int(seed), int(d), _PREDICT_STREAM]).standard_normal((N, B))
        dev, cmean, status = kernels.conditional_draw(sigma, design.y - mean, design.perm, design.n_obs, z)
        if status > 0:
            raise SingularObservedBlock(f"observed block of {panel.countries[status - 1]} is singular (draw {d})")
        if status < 0:
            raise NotPositiveDefinite(f"conditional covariance of {panel.countries[-status - 1]} failed (draw {d})")
        out[row] = (mean + dev)[miss]
        cm_out[row] = (mean + cmean)[miss]
    return CellPosterior(flat, out, sel, panel.countries, panel.first_year, panel.n_years,
                         cm_out, {"source": "conditional"})


@dataclass
class GibbsState:
    """Random effects ``b`` (N, 3) and structured errors ``eps`` (N, 3T)."""

    b: np.ndarray
    eps: np.ndarray

    @classmethod
    def zeros(cls, n_countries, n_years):
        return cls(np.zeros((n_countries, N_POP)), np.zeros((n_countries, N_POP * n_years)))


def gibbs_reconstruct(draws: PosteriorDraws, panel: PanelData, sweeps=10, seed=0, thin=1,
                      state: GibbsState | None = None) -> CellPosterior:
    """Rebuild observed cells as ``mu + b + eps`` by Gibbs sweeps.

    Per parameter draw: ``sweeps`` rounds of (all b updates, then one
    single-site eps sweep in flat order); the chain state carries over from
    one draw to the next.  The b update uses precision ``1/tau_k + n_ik``,
    i.e. it assumes unit residual precision.
    """
    sel = _selected(draws, thin)
    design = Design.from_panel(panel)
    N, B = design.y.shape
    T = design.n_years
    state = state or GibbsState.zeros(N, T)
    obs = design.mask
    flat = np.flatnonzero(obs.ravel())
    out = np.empty((len(sel), flat.size))
    for row, d in enumerate(sel):
        theta = draws.draws[d]
        q = _assemble_precision(theta[S], theta[GAMMA], theta[RHO], T)
        if not np.all(np.diag(q) > 0):
            raise NotPositiveDefinite(f"parameter draw {d} has a non-positive precision diagonal")
        mean = design.mean(theta[MU])
        rng = np.random.default_rng([int(seed), int(d), _GIBBS_STREAM])
        noise_b = rng.standard_normal((sweeps, N, N_POP))
        noise_e = rng.standard_normal((sweeps, N, B))
        tau = np.ascontiguousarray(theta[TAU], dtype=float)
        dev = kernels.gibbs_sweeps(q, tau, T, design.y - mean, obs, state.b, state.eps, noise_b, noise_e)
        out[row] = (mean + dev)[obs]
    return CellPosterior(flat, out, sel, panel.countries, panel.first_year, panel.n_years,
                         None, {"source": "gibbs"})


def full_posterior(draws: PosteriorDraws, panel: PanelData, seed=0, thin=1, sweeps=10):
    """Missing cells by conditional sampling merged with Gibbs-rebuilt observed cells."""
    return merge_cells(predict_missing(draws, panel, seed, thin),
                       gibbs_reconstruct(draws, panel, sweeps, seed, thin))


# --------------------------------------------------------------------------
# change between two years


@dataclass
class ChangeSummary:
    keys: list            # (country, population)
    ratio: np.ndarray     # (D, n_pairs)
    pr_up: np.ndarray
    pr_down: np.ndarray
    label: list
    up: float = 1.5
    down: float = 0.5
    prob: float = 0.95

    @property
    def ratio_median(self):
        if self.ratio.shape[0] == 0:
            return np.full(self.ratio.shape[1], np.nan)
        return np.median(self.ratio, axis=0)


def classify(pr_up, pr_down, prob=0.95):
    if pr_up > prob:
        return "increase"
    if pr_down > prob:
        return "decrease"
    return "no_change"


def change_contrast(cells: CellPosterior, year_a=2011, year_b=2021, up=1.5, down=0.5,
                    prob=0.95, other: CellPosterior | None = None) -> ChangeSummary:
    """Ratio ``exp(Y_b - Y_a)`` per draw for every (country, population) with both years.

    ``other`` may supply the year-b cells from a separate cell posterior; it
    must share the same draw indices.
    """
    src_b = other if other is not None else cells
    if src_b.n_draws != cells.n_draws or not np.array_equal(src_b.draw_index, cells.draw_index):
        raise MismatchedDrawCounts(f"year {year_a} has {cells.n_draws} draws, year {year_b} has {src_b.n_draws}")
    T = cells.n_years
    ta, tb = year_a - cells.first_year, year_b - cells.first_year
    if not (0 <= ta < T and 0 <= tb < T):
        raise ValueError(f"years {year_a}, {year_b} outside the panel window")
    pos_a = {int(f): j for j, f in enumerate(cells.flat)}
    pos_b = {int(f): j for j, f in enumerate(src_b.flat)}
    keys, cols_a, cols_b = [], [], []
    for i, code in enumerate(cells.countries):
        for k, pop in enumerate(POPULATIONS):
            fa = (i * N_POP + k) * T + ta
            fb = (i * N_POP + k) * T + tb
            if fa in pos_a and fb in pos_b:
                keys.append((code, pop))
                cols_a.append(pos_a[fa])
                cols_b.append(pos_b[fb])
    ratio = np.exp(src_b.draws[:, cols_b] - cells.draws[:, cols_a])
    if ratio.shape[0]:
        pr_up = (ratio > up).mean(axis=0)
        pr_down = (ratio < down).mean(axis=0)
    else:
        pr_up = pr_down = np.zeros(len(keys))
    label = [classify(u, v, prob) for u, v in zip(pr_up, pr_down)]
    return ChangeSummary(keys, ratio, pr_up, pr_down, label, up, down, prob)


# --------------------------------------------------------------------------
# reports


def _open(path, mode):
    try:
        return open(path, mode, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc


def write_estimates(cells: CellPosterior, path):
    summ = cells.summaries()
    cols = [summ[h] for h in ESTIMATE_HEADER[3:]]
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_HEADER)
        for j, (code, pop, year) in enumerate(cells.cells()):
            w.writerow([code, pop, year, *(repr(float(c[j])) for c in cols)])


def write_changes(changes: ChangeSummary, path):
    med = changes.ratio_median
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHANGE_HEADER)
        for j, (code, pop) in enumerate(changes.keys):
            w.writerow([code, pop, repr(float(med[j])), repr(float(changes.pr_up[j])),
                        repr(float(changes.pr_down[j])), changes.label[j]])


def export_estimates(cells: CellPosterior, changes: ChangeSummary | None, path, change_path=None):
    """Write the per-cell estimate report and, if given, the change report.

    The change report goes to ``change_path`` or ``<path stem>_changes.csv``.
    """
    write_estimates(cells, path)
    if changes is not None:
        if change_path is None:
            p = str(path)
            stem = p[:-4] if p.endswith(".csv") else p
            change_path = stem + "_changes.csv"
        write_changes(changes, change_path)
        return path, change_path
    return path, None


def _read_rows(path, header):
    with _open(path, "r") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise IoError(f"{path}: unexpected header")
    return rows[1:]


def read_estimates(path):
    """Rows as dicts with numeric summaries parsed back to float."""
    out = []
    for r in _read_rows(path, ESTIMATE_HEADER):
        rec = {"country": r[0], "population": r[1], "year": int(r[2])}
        rec.update({h: float(v) for h, v in zip(ESTIMATE_HEADER[3:], r[3:])})
        out.append(rec)
    return out


def read_changes(path):
    out = []
    for r in _read_rows(path, CHANGE_HEADER):
        out.append({"country": r[0], "population": r[1], "ratio_median": float(r[2]),
                    "pr_gt_1.5": float(r[3]), "pr_lt_0.5": float(r[4]), "class": r[5]})
    return out


__all__ = [
    "conditional_gaussian", "CellPosterior", "GibbsState", "ChangeSummary",
    "predict_missing", "gibbs_reconstruct", "full_posterior", "merge_cells",
    "change_contrast", "classify", "export_estimates", "write_estimates",
    "write_changes", "read_estimates", "read_changes",
]
