"""Cross-validation, the regional-median baseline, ablations and prior sweeps."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FoldFailed, IoError, KPError, TooFewObservations
from .gmrf import RHO
from .panel import N_POP, N_REGION, PanelData
from .posterior import ModelSpec, PriorSpec, SamplerConfig, sample_posterior

EVAL_HEADER = ["model", "fold", "n_held", "mse", "coverage95"]


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    """Fold label 1..k per cell (0 for cells that are not observed)."""

    labels: np.ndarray
    k: int
    seed: int
    strategy: str = "cell"

    def held(self, fold):
        return self.labels == fold

    def sizes(self):
        return np.bincount(self.labels, minlength=self.k + 1)[1:]


def _deal(n, k, rng):
    """Labels 1..k for n units in random order, sizes differing by at most one."""
    lab = np.empty(n, dtype=np.int64)
    lab[rng.permutation(n)] = np.arange(n) % k + 1
    return lab


def make_folds(panel: PanelData, k=5, seed=0, by_series=False) -> FoldAssignment:
    """Random folds stratified by population.

    Cell-level by default; ``by_series`` keeps each (country, population)
    series together.  Populations without any observation are skipped.
    """
    if k < 2:
        raise ValueError("need k >= 2")
    N, T = panel.n_countries, panel.n_years
    mask = panel.mask.reshape(N, N_POP, T)
    labels = np.zeros((N, N_POP, T), dtype=np.int64)
    for p in range(N_POP):
        rng = np.random.default_rng([int(seed), p])
        m = mask[:, p, :]
        if by_series:
            series = np.flatnonzero(m.any(axis=1))
            if series.size == 0:
                continue
            if series.size < k:
                raise TooFewObservations(f"population {p}: {series.size} observed series for {k} folds")
            lab = _deal(series.size, k, rng)
            labels[series, p, :] = np.where(m[series], lab[:, None], 0)
        else:
            cells = np.flatnonzero(m.ravel())
            if cells.size == 0:
                continue
            if cells.size < k:
                raise TooFewObservations(f"population {p}: {cells.size} observed cells for {k} folds")
            flat = labels[:, p, :].reshape(-1)
            flat[cells] = _deal(cells.size, k, rng)
            labels[:, p, :] = flat.reshape(N, T)
    if not labels.any():
        raise TooFewObservations("panel has no observed cells")
    return FoldAssignment(labels.ravel(), int(k), int(seed), "series" if by_series else "cell")


# --------------------------------------------------------------------------
# baseline


@dataclass
class BaselinePrediction:
    values: np.ndarray      # per cell, flat order
    fallback: np.ndarray    # (regions, 3) True where the global median was used
    empty_population: np.ndarray  # (3,) True where no data existed at all (prediction 0)


def baseline_regional_median(panel: PanelData, window=None) -> BaselinePrediction:
    """Median observed log value per (region, population), constant across years.

    ``window`` restricts the data to the last ``window`` years of the panel.
    """
    N, T = panel.n_countries, panel.n_years
    y = panel.y.reshape(N, N_POP, T)
    m = panel.mask.reshape(N, N_POP, T).copy()
    if window is not None:
        m[:, :, :max(0, T - int(window))] = False
    med = np.zeros((N_REGION, N_POP))
    fallback = np.zeros((N_REGION, N_POP), dtype=bool)
    empty = np.zeros(N_POP, dtype=bool)
    for k in range(N_POP):
        allk = y[:, k][m[:, k]]
        glob = float(np.median(allk)) if allk.size else 0.0
        empty[k] = allk.size == 0
        for r in range(N_REGION):
            rows = panel.region == r
            vals = y[rows, k][m[rows, k]]
            if vals.size:
                med[r, k] = float(np.median(vals))
            else:
                med[r, k] = glob
                fallback[r, k] = True
    values = np.repeat(med[panel.region], T, axis=1).ravel()
    return BaselinePrediction(values, fallback, empty)


# --------------------------------------------------------------------------
# predictors: called as predictor(train_panel, held_mask, fold) -> (point, lower, upper)
# over the held cells in flat order; lower/upper may be None.


@dataclass
class BaselinePredictor:
    window: int | None = None
    tag: str = "baseline"

    def __call__(self, train, held, fold):
        pred = baseline_regional_median(train, self.window).values
        return pred[held], None, None


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


@dataclass
class BayesPredictor:
    """Fit on the training cells, then sample the held cells conditionally.

    The point prediction is the average conditional mean over parameter
    draws (Rao-Blackwellized predictive mean); intervals are equal-tailed
    2.5%/97.5% quantiles of the predictive draws.
    """

    model: ModelSpec = field(default_factory=ModelSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    thin: int = 1

    @property
    def tag(self):
        return self.model.tag

    def __call__(self, train, held, fold):
        from .impute import predict_missing

        fs = fold_seed(self.seed, fold)
        cfg = replace(self.sampler, seed=fs, threads=1)
        post = sample_posterior(train, self.model, cfg)
        cells = predict_missing(post, train, seed=fs, thin=self.thin)
        pos = np.searchsorted(cells.flat, np.flatnonzero(held))
        d = cells.draws[:, pos]
        lo, hi = np.quantile(d, [0.025, 0.975], axis=0)
        return cells.rao_blackwell_mean()[pos], lo, hi


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    held: np.ndarray        # flat indices scored in this fold
    train: np.ndarray       # flat indices the fit saw
    sse: float
    hits: int
    has_interval: bool
    failed: str = ""

    @property
    def n_held(self):
        return int(self.held.size)

    @property
    def mse(self):
        return self.sse / self.n_held if self.n_held else float("nan")

    @property
    def coverage(self):
        return self.hits / self.n_held if self.has_interval and self.n_held else float("nan")


@dataclass
class EvalResult:
    tag: str
    folds: list
    extra: dict = field(default_factory=dict)

    @property
    def n_held(self):
        return sum(f.n_held for f in self.folds)

    @property
    def cv_mse(self):
        """Pooled over all held cells (the count-weighted mean of fold MSEs)."""
        n = self.n_held
        return sum(f.sse for f in self.folds) / n if n else float("nan")

    @property
    def coverage95(self):
        if not self.folds or not all(f.has_interval for f in self.folds):
            return float("nan")
        return sum(f.hits for f in self.folds) / self.n_held


def _run_fold(args):
    panel, folds, fold, predictor = args
    held = folds.held(fold)
    train_mask = panel.mask & ~held
    train = panel.with_mask(train_mask)
    point, lo, hi = predictor(train, held, fold)
    truth = panel.y[held]
    err = np.asarray(point, dtype=float) - truth
    has_int = lo is not None and hi is not None
    hits = int(np.sum((np.asarray(lo) <= truth) & (truth <= np.asarray(hi)))) if has_int else 0
    return FoldResult(fold, np.flatnonzero(held), np.flatnonzero(train_mask),
                      float(np.sum(err * err)), hits, has_int)


def run_cv(panel: PanelData, predictor, folds: FoldAssignment, threads=1, tag=None) -> EvalResult:
    """Refit per fold and score held-out cells on the log scale.

    ``predictor`` is a callable, a :class:`ModelSpec` (wrapped in a
    :class:`BayesPredictor` with default sampler settings) or ``"baseline"``.
    Folds run in separate processes when ``threads > 1``; results do not
    depend on the thread count.  A failing fold aborts the run with
    :class:`FoldFailed` carrying the folds completed before it.
    """
    if isinstance(predictor, ModelSpec):
        predictor = BayesPredictor(predictor)
    elif predictor == "baseline":
        predictor = BaselinePredictor()
    tag = tag or getattr(predictor, "tag", "model")
    jobs = [(panel, folds, f, predictor) for f in range(1, folds.k + 1)]
    done = []
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
            futures = [ex.submit(_run_fold, j) for j in jobs]
            for f, fut in zip(range(1, folds.k + 1), futures):
                try:
                    done.append(fut.result())
                except KPError as exc:
                    raise FoldFailed(f"fold {f}: {exc.code}: {exc}", EvalResult(tag, done)) from exc
    else:
        for f, job in zip(range(1, folds.k + 1), jobs):
            try:
                done.append(_run_fold(job))
            except KPError as exc:
                raise FoldFailed(f"fold {f}: {exc.code}: {exc}", EvalResult(tag, done)) from exc
    return EvalResult(tag, done)


def run_ablation(panel, which, folds, sampler_config=None, prior=None, seed=0, threads=1):
    """CV of the model with one dependence component pinned at zero."""
    model = ModelSpec.ablation(which, prior or PriorSpec())
    pred = BayesPredictor(model, sampler_config or SamplerConfig(), seed)
    return run_cv(panel, pred, folds, threads, tag=which)


def prior_sensitivity(panel, priors, folds, sampler_config=None, seed=0, threads=1):
    """One CV run per prior, plus posterior means of the rho parameters.

    The rho means come from a fit to the full panel under each prior.
    """
    if not priors:
        raise ValueError("need at least one prior")
    cfg = sampler_config or SamplerConfig()
    rows = []
    for prior in priors:
        model = ModelSpec(prior=prior, tag=str(prior))
        res = run_cv(panel, BayesPredictor(model, cfg, seed), folds, threads, tag=str(prior))
        post = sample_posterior(panel, model, replace(cfg, seed=fold_seed(seed, 0), threads=threads))
        res.extra["rho_mean"] = post.draws[:, RHO].mean(axis=0)
        res.extra["max_rhat"] = post.meta.get("max_rhat")
        rows.append(res)
    return rows


# --------------------------------------------------------------------------
# report


def write_eval_report(results, path):
    """One row per (model, fold) and a pooled row per model."""
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for res in results:
            for f in res.folds:
                w.writerow([res.tag, f.fold, f.n_held, repr(f.mse), repr(f.coverage)])
            w.writerow([res.tag, "pooled", res.n_held, repr(res.cv_mse), repr(res.coverage95)])


def read_eval_report(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc
    if not rows or rows[0] != EVAL_HEADER:
        raise IoError(f"{path}: unexpected header")
    return [{"model": r[0], "fold": r[1], "n_held": int(r[2]), "mse": float(r[3]),
             "coverage95": float(r[4])} for r in rows[1:]]


__all__ = [
    "FoldAssignment", "make_folds", "BaselinePrediction", "baseline_regional_median",
    "BaselinePredictor", "BayesPredictor", "FoldResult", "EvalResult", "run_cv",
    "run_ablation", "prior_sensitivity", "write_eval_report", "read_eval_report",
]
