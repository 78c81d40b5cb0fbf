"""Log posterior and adaptive random-walk Metropolis sampling.

The sampler works on the flat 33-vector (see :data:`gmrf.PARAM_NAMES`).
Parameters can be pinned to fixed values, which is how the ablation
variants and the conjugate check are expressed.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from . import kernels
from .errors import AllProposalsInvalid, IoError, MalformedRow, NonConvergence
from .gmrf import GAMMA, MU, N_PARAMS, PAIRS, PARAM_NAMES, RHO, S, TAU, StructuralParams
from .panel import N_POP, N_REGION, PanelData

RHAT_THRESHOLD = 1.01


@dataclass(frozen=True)
class PriorSpec:
    family: str = "laplace"
    scale: float = 0.1

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in ("laplace", "normal"):
            raise ValueError(f"prior family must be laplace or normal, got {self.family!r}")
        if not self.scale > 0:
            raise ValueError("prior scale must be positive")
        object.__setattr__(self, "family", fam)

    @classmethod
    def parse(cls, text):
        """``"laplace:0.5"`` or ``"normal:0.1"``."""
        fam, _, scale = text.partition(":")
        return cls(fam.strip(), float(scale) if scale else 0.1)

    def __str__(self):
        return f"{self.family}:{self.scale:g}"


ABLATIONS = {
    "no_cross_pop": RHO,
    "no_country": TAU,
    "no_time": GAMMA,
}


@dataclass(frozen=True)
class ModelSpec:
    """Prior plus any parameters pinned to fixed values."""

    prior: PriorSpec = field(default_factory=PriorSpec)
    fixed: tuple = ()  # ((index, value), ...)
    tag: str = "full"

    @classmethod
    def ablation(cls, which, prior=None):
        prior = prior or PriorSpec()
        if which == "full":
            return cls(prior)
        if which not in ABLATIONS:
            raise ValueError(f"unknown ablation {which!r}; expected one of {sorted(ABLATIONS)}")
        sl = ABLATIONS[which]
        return cls(prior, tuple((j, 0.0) for j in range(sl.start, sl.stop)), which)

    def free_mask(self):
        m = np.ones(N_PARAMS, dtype=bool)
        for j, _ in self.fixed:
            m[j] = False
        return m

    def apply_fixed(self, theta):
        theta = np.array(theta, dtype=float)
        for j, v in self.fixed:
            theta[j] = v
        return theta


@dataclass
class SamplerConfig:
    chains: int = 12
    draws: int = 1000          # retained per chain
    warmup: int | None = None  # retained-draw units; defaults to ``draws``
    thin: int = 10
    seed: int | None = None
    target_accept: float = 0.234
    init_sd: float = 0.05
    init_jitter: float = 0.05
    max_init_tries: int = 200
    threads: int = 1

    def n_warmup(self):
        return self.draws if self.warmup is None else self.warmup


# --------------------------------------------------------------------------
# model arrays


@dataclass(frozen=True)
class Design:
    """Panel arrays in the layout the kernels expect."""

    y: np.ndarray       # (N, B) observed values, 0 where missing
    mask: np.ndarray    # (N, B)
    perm: np.ndarray    # (N, B) observed positions first, then missing
    n_obs: np.ndarray   # (N,)
    region: np.ndarray  # (N,)
    n_years: int

    @classmethod
    def from_panel(cls, panel: PanelData):
        mask = panel.mask_matrix().copy()
        y = np.where(mask, panel.y_matrix(), 0.0)
        n_obs = mask.sum(axis=1).astype(np.int64)
        # stable sort puts True (observed) first while keeping ascending positions
        perm = np.argsort(~mask, axis=1, kind="stable").astype(np.int64)
        return cls(y, mask, perm, n_obs, panel.region.astype(np.int64), panel.n_years)

    def mean(self, mu):
        return np.repeat(np.asarray(mu).reshape(N_REGION, N_POP)[self.region], self.n_years, axis=1)


def sigma_from_theta(theta, n_years):
    """Country covariance for a parameter vector, or None if not PD-valid."""
    sigma, ok = kernels.country_sigma(theta[S], theta[GAMMA], theta[RHO], theta[TAU], n_years)
    return sigma if ok else None


def _support_ok(theta):
    return bool(np.all(theta[S] > 0) and np.all(theta[TAU] >= 0) and np.all(np.isfinite(theta)))


def loglik_theta(theta, design: Design):
    if not _support_ok(theta):
        return -np.inf
    sigma = sigma_from_theta(theta, design.n_years)
    if sigma is None:
        return -np.inf
    resid = design.y - design.mean(theta[MU])
    return float(np.sum(kernels.loglik_by_country(sigma, resid, design.perm, design.n_obs)))


def log_likelihood(params: StructuralParams, panel: PanelData):
    """Observed-cell log-likelihood summed over countries; -inf if not PD."""
    return loglik_theta(params.to_vector(), Design.from_panel(panel))


def log_prior_theta(theta, prior: PriorSpec):
    b = prior.scale
    if prior.family == "laplace":
        return float(-N_PARAMS * math.log(2 * b) - np.abs(theta).sum() / b)
    return float(-0.5 * N_PARAMS * math.log(2 * math.pi * b * b) - 0.5 * np.sum(theta * theta) / (b * b))


def log_prior(params: StructuralParams, prior: PriorSpec = PriorSpec()):
    """Independent location-0 priors over all 33 parameters."""
    return log_prior_theta(params.to_vector(), prior)


def log_posterior_theta(theta, design, prior, free=None):
    if free is not None and not _support_free(theta, free):
        return -np.inf
    ll = loglik_theta(theta, design)
    if not np.isfinite(ll):
        return -np.inf
    return ll + log_prior_theta(theta, prior)


def _support_free(theta, free):
    # sampled tau must stay strictly positive; a pinned tau may sit at 0
    tau_free = free[TAU]
    return bool(np.all(theta[TAU][tau_free] > 0))


# --------------------------------------------------------------------------
# initialization


def initial_theta(panel: PanelData, model: ModelSpec = ModelSpec()):
    """Regional means at observed medians; variances and precisions 1; couplings 0."""
    y = panel.y_matrix()
    m = panel.mask_matrix()
    T = panel.n_years
    mu = np.zeros((N_REGION, N_POP))
    for k in range(N_POP):
        cols = slice(k * T, (k + 1) * T)
        allk = y[:, cols][m[:, cols]]
        fallback = float(np.median(allk)) if allk.size else 0.0
        for r in range(N_REGION):
            rows = panel.region == r
            vals = y[rows][:, cols][m[rows][:, cols]]
            mu[r, k] = float(np.median(vals)) if vals.size else fallback
    theta = np.concatenate([mu.ravel(), np.ones(N_POP), np.ones(N_POP), np.zeros(N_POP), np.zeros(N_POP)])
    return model.apply_fixed(theta)


# --------------------------------------------------------------------------
# sampler


@dataclass
class PosteriorDraws:
    draws: np.ndarray        # (D, 33)
    chain: np.ndarray        # (D,)
    iteration: np.ndarray    # (D,)
    log_density: np.ndarray  # (D,)
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.draws.shape[0]

    @property
    def n_chains(self):
        return int(len(np.unique(self.chain)))

    def params(self, d, allow_zero_tau=True):
        return StructuralParams.from_vector(self.draws[d], allow_zero_tau=allow_zero_tau)

    def by_chain(self):
        """Draws reshaped to (chains, per_chain, 33); chains must be equal length."""
        ids = np.unique(self.chain)
        per = [self.draws[self.chain == c] for c in ids]
        n = min(len(p) for p in per)
        return np.stack([p[:n] for p in per])

    def thinned(self, every):
        sel = np.arange(0, self.n_draws, max(1, int(every)))
        return PosteriorDraws(self.draws[sel], self.chain[sel], self.iteration[sel],
                              self.log_density[sel], dict(self.meta))


def _window_schedule(n_warm):
    """Ends of covariance-adaptation windows (Stan-like doubling windows)."""
    start = max(1, int(0.15 * n_warm))
    end = n_warm - max(1, int(0.1 * n_warm))
    ends = []
    w = 25 * max(1, n_warm // 2000)
    pos = start
    while pos + w < end:
        nxt = pos + w
        if nxt + 2 * w >= end:
            nxt = end
        ends.append(nxt)
        pos = nxt
        w *= 2
    if not ends and end > start:
        ends.append(end)
    return start, set(ends)


class _Coords:
    """Sampler coordinates for the covariance block.

    Free ``s`` and ``tau`` move on the log scale, free ``gamma`` as a ratio to
    ``s`` and free ``rho`` relative to ``sqrt(s_a s_b)``.  The map is
    triangular (``s`` first), so the log-Jacobian is a sum of diagonal terms.
    Fixed parameters keep their natural values.
    """

    def __init__(self, model):
        self.model = model
        self.free = model.free_mask()

    def to_internal(self, theta):
        phi = np.array(theta, dtype=float)
        f = self.free
        s = theta[S]
        for k in range(N_POP):
            if f[TAU.start + k]:
                phi[TAU.start + k] = math.log(theta[TAU.start + k])
            if f[S.start + k]:
                phi[S.start + k] = math.log(s[k])
            if f[GAMMA.start + k]:
                phi[GAMMA.start + k] = theta[GAMMA.start + k] / s[k]
        for p, (a, b) in enumerate(PAIRS):
            if f[RHO.start + p]:
                phi[RHO.start + p] = theta[RHO.start + p] / math.sqrt(s[a] * s[b])
        return phi

    def to_natural(self, phi):
        """(theta, log|d theta / d phi|)."""
        theta = np.array(phi, dtype=float)
        f = self.free
        logj = 0.0
        for k in range(N_POP):
            j = TAU.start + k
            if f[j]:
                theta[j] = math.exp(phi[j])
                logj += phi[j]
            j = S.start + k
            if f[j]:
                theta[j] = math.exp(phi[j])
                logj += phi[j]
        s = theta[S]
        for k in range(N_POP):
            j = GAMMA.start + k
            if f[j]:
                theta[j] = phi[j] * s[k]
                logj += math.log(s[k])
        for p, (a, b) in enumerate(PAIRS):
            j = RHO.start + p
            if f[j]:
                theta[j] = phi[j] * math.sqrt(s[a] * s[b])
                logj += 0.5 * (math.log(s[a]) + math.log(s[b]))
        return theta, logj


class _Block:
    """One random-walk block with its own proposal covariance and scale."""

    def __init__(self, idx, init_sd, region=None):
        self.idx = idx
        self.region = region
        d = len(idx)
        self.d = d
        self.chol = np.eye(d) * init_sd
        self.base = math.log(2.38 / math.sqrt(d))
        self.log_lam = self.base
        self.rm_t = 0
        self._reset_window()

    def _reset_window(self):
        self.n = 0
        self.mean = np.zeros(self.d)
        self.m2 = np.zeros((self.d, self.d))

    def step(self, z):
        return math.exp(self.log_lam) * (self.chol @ z)

    def adapt_scale(self, acc_prob, target):
        self.rm_t += 1
        self.log_lam += (self.rm_t ** -0.6) * (acc_prob - target)

    def record(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, x - self.mean)

    def close_window(self):
        if self.n > 2:
            emp = self.m2 / (self.n - 1)
            shrink = self.n / (self.n + 5.0)
            cov = shrink * emp + (1 - shrink) * 1e-3 * np.eye(self.d)
            try:
                self.chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                self.chol = np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-8)))
            self.log_lam = self.base
            self.rm_t = 0
        self._reset_window()


def _make_blocks(model, init_sd, design):
    free = model.free_mask()
    blocks = []
    for r in range(N_REGION):
        idx = np.flatnonzero(free[r * N_POP:(r + 1) * N_POP]) + r * N_POP
        if len(idx):
            blocks.append(_Block(idx, init_sd, region=r))
    cov_idx = np.flatnonzero(free[N_REGION * N_POP:]) + N_REGION * N_POP
    if len(cov_idx):
        blocks.append(_Block(cov_idx, init_sd))
    return blocks


class _Target:
    """Log posterior with per-country likelihood terms cached between moves."""

    def __init__(self, design, model):
        self.design = design
        self.prior = model.prior
        self.coords = _Coords(model)
        self.rows = [np.flatnonzero(design.region == r) for r in range(N_REGION)]
        self.sub = [(design.y[r], design.perm[r], design.n_obs[r]) for r in self.rows]
        self.T = design.n_years

    def full(self, phi):
        """Evaluate at internal coordinates ``phi``.

        Returns (theta, log posterior, log Jacobian, per-country loglik, sigma);
        the last two are None when the point is outside the support.
        """
        try:
            theta, logj = self.coords.to_natural(phi)
        except (OverflowError, ValueError):
            return None, -np.inf, 0.0, None, None
        if not _support_ok(theta):
            return theta, -np.inf, logj, None, None
        sigma = sigma_from_theta(theta, self.T)
        if sigma is None:
            return theta, -np.inf, logj, None, None
        d = self.design
        ll = kernels.loglik_by_country(sigma, d.y - d.mean(theta[MU]), d.perm, d.n_obs)
        total = float(np.sum(ll))
        if not np.isfinite(total):
            return theta, -np.inf, logj, None, None
        return theta, total + log_prior_theta(theta, self.prior), logj, ll, sigma

    def region(self, theta, r, sigma):
        y, perm, n_obs = self.sub[r]
        mu = np.repeat(theta[r * N_POP:(r + 1) * N_POP], self.T)
        return kernels.loglik_by_country(sigma, y - mu, perm, n_obs)


def _run_chain(args):
    design, model, cfg, chain_id, theta0 = args
    rng = np.random.default_rng([int(cfg.seed), int(chain_id)])
    free = model.free_mask()
    fidx = np.flatnonzero(free)
    target = _Target(design, model)
    coords = target.coords
    phi0 = coords.to_internal(theta0)

    phi = None
    for _ in range(cfg.max_init_tries):
        cand = phi0.copy()
        cand[fidx] += cfg.init_jitter * rng.standard_normal(len(fidx))
        theta, lp, logj, ll, sigma = target.full(cand)
        if np.isfinite(lp):
            phi = cand
            break
    if phi is None:
        raise AllProposalsInvalid(f"chain {chain_id}: no PD-valid start in {cfg.max_init_tries} tries")
    lprior = log_prior_theta(theta, model.prior)

    blocks = _make_blocks(model, cfg.init_sd, design)
    thin = int(cfg.thin)
    n_warm = int(cfg.n_warmup()) * thin
    n_keep = int(cfg.draws) * thin
    goal = cfg.target_accept
    win_start, win_ends = _window_schedule(n_warm)

    out = np.empty((cfg.draws, N_PARAMS))
    out_lp = np.empty(cfg.draws)
    out_it = np.empty(cfg.draws, dtype=np.int64)
    accepted = np.zeros(len(blocks))
    kept = 0

    for it in range(n_warm + n_keep):
        warm = it < n_warm
        for bi, blk in enumerate(blocks):
            z = rng.standard_normal(blk.d)
            u = rng.random()
            step = blk.step(z)
            if blk.region is not None:
                # regional means are identical in both coordinate systems
                prop = theta.copy()
                prop[blk.idx] += step
                rows = target.rows[blk.region]
                ll_new = target.region(prop, blk.region, sigma)
                lprior_new = log_prior_theta(prop, model.prior)
                log_a = float(np.sum(ll_new) - np.sum(ll[rows])) + lprior_new - lprior
                if not np.isfinite(log_a):
                    log_a = -np.inf
                acc_prob = 1.0 if log_a >= 0 else math.exp(log_a)
                if u < acc_prob:
                    theta = prop
                    phi = phi.copy()
                    phi[blk.idx] = prop[blk.idx]
                    ll = ll.copy()
                    ll[rows] = ll_new
                    lprior = lprior_new
                    accepted[bi] += not warm
            else:
                pphi = phi.copy()
                pphi[blk.idx] += step
                th_new, lp_new, logj_new, ll_new, sigma_new = target.full(pphi)
                cur = float(np.sum(ll)) + lprior + logj
                log_a = lp_new + logj_new - cur if np.isfinite(lp_new) else -np.inf
                acc_prob = 1.0 if log_a >= 0 else math.exp(log_a)
                if u < acc_prob:
                    phi, theta, ll, sigma, logj = pphi, th_new, ll_new, sigma_new, logj_new
                    lprior = log_prior_theta(theta, model.prior)
                    accepted[bi] += not warm
            if warm:
                blk.adapt_scale(acc_prob, goal)
                if it >= win_start:
                    blk.record(phi[blk.idx])
                if (it + 1) in win_ends:
                    blk.close_window()
        if not warm and (it - n_warm + 1) % thin == 0:
            out[kept] = theta
            out_lp[kept] = float(np.sum(ll)) + lprior
            out_it[kept] = it - n_warm + 1
            kept += 1

    info = {"accept_rate": (accepted / max(n_keep, 1)).tolist()}
    return out, out_lp, out_it, info


def sample_posterior(panel: PanelData, model: ModelSpec | PriorSpec = ModelSpec(),
                     config: SamplerConfig = SamplerConfig(), theta0=None) -> PosteriorDraws:
    """Run independent adaptive Metropolis chains and pool post-warmup draws."""
    if isinstance(model, PriorSpec):
        model = ModelSpec(model)
    cfg = SamplerConfig(**asdict(config))
    if cfg.seed is None:
        cfg.seed = int(np.random.SeedSequence().entropy % (2 ** 32))
    if panel.n_observed == 0:
        raise ValueError("panel has no observed cells")
    design = Design.from_panel(panel)
    start = initial_theta(panel, model) if theta0 is None else model.apply_fixed(theta0)
    jobs = [(design, model, cfg, c, start) for c in range(cfg.chains)]
    if cfg.threads > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, cfg.chains)) as ex:
            results = list(ex.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]

    draws = np.concatenate([r[0] for r in results])
    lp = np.concatenate([r[1] for r in results])
    its = np.concatenate([r[2] for r in results])
    chain = np.repeat(np.arange(cfg.chains), cfg.draws)
    meta = {
        "seed": cfg.seed, "chains": cfg.chains, "draws": cfg.draws, "warmup": cfg.n_warmup(),
        "thin": cfg.thin, "prior": str(model.prior), "model": model.tag,
        "fixed": [[int(j), float(v)] for j, v in model.fixed],
        "accept_rate": [r[3]["accept_rate"] for r in results],
        "backend": kernels.BACKEND,
    }
    post = PosteriorDraws(draws, chain, its, lp, meta)

    if cfg.chains >= 2 and cfg.draws >= 4:
        from .diagnostics import diagnostics

        rep = diagnostics(post)
        meta["max_rhat"] = float(np.nanmax(rep.rhat[model.free_mask()])) if model.free_mask().any() else 1.0
        if meta["max_rhat"] > RHAT_THRESHOLD:
            warnings.warn(f"max split R-hat {meta['max_rhat']:.4f} exceeds {RHAT_THRESHOLD}",
                          NonConvergence, stacklevel=2)
    return post


# --------------------------------------------------------------------------
# draws file


DRAWS_HEADER = ["chain", "iteration", *PARAM_NAMES, "log_density"]


def write_draws(post: PosteriorDraws, path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DRAWS_HEADER)
            for c, it, row, lp in zip(post.chain, post.iteration, post.draws, post.log_density):
                w.writerow([int(c), int(it), *(repr(float(v)) for v in row), repr(float(lp))])
    except OSError as exc:
        raise IoError(f"cannot write draws to {path}: {exc}") from exc


def read_draws(path, meta=None) -> PosteriorDraws:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read draws file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DRAWS_HEADER:
            raise MalformedRow(1, f"{path}: unexpected draws header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(DRAWS_HEADER):
                raise MalformedRow(lineno, f"{path}: expected {len(DRAWS_HEADER)} fields")
            rows.append(row)
    arr = np.array(rows, dtype=float).reshape(-1, len(DRAWS_HEADER))
    return PosteriorDraws(arr[:, 2:-1].copy(), arr[:, 0].astype(np.int64),
                          arr[:, 1].astype(np.int64), arr[:, -1].copy(), dict(meta or {}))
