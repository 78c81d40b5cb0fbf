"""Hot loops over countries.

Each kernel exists twice: a loop version compiled with numba and a numpy
version that batches countries sharing an observation count.  Both consume
identical inputs, including pre-drawn standard normals, so the two paths
agree to rounding.  :mod:`kpgmrf._accel` picks which one is exported.

Shared layout: ``resid`` is (N, B) data minus mean, ``perm`` is (N, B) with
each country's observed positions first (ascending) followed by its missing
positions (ascending), and ``n_obs`` counts the observed ones.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# loop versions (compiled)


@njit
def _chol_inplace(a, n):
    for j in range(n):
        s = a[j, j]
        for p in range(j):
            s -= a[j, p] * a[j, p]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        a[j, j] = d
        for i in range(j + 1, n):
            s = a[i, j]
            for p in range(j):
                s -= a[i, p] * a[j, p]
            a[i, j] = s / d
    return True


@njit
def _forward_inplace(L, x, n):
    for i in range(n):
        s = x[i]
        for p in range(i):
            s -= L[i, p] * x[p]
        x[i] = s / L[i, i]


@njit
def _loglik_loops(sigma, resid, perm, n_obs):
    """Per-country observed-cell log-density; all -inf if any block fails."""
    N, B = resid.shape
    a = np.empty((B, B))
    w = np.empty(B)
    out = np.zeros(N)
    for i in range(N):
        n = n_obs[i]
        if n == 0:
            continue
        for r in range(n):
            pr = perm[i, r]
            w[r] = resid[i, pr]
            for c in range(r + 1):
                a[r, c] = sigma[pr, perm[i, c]]
        if not _chol_inplace(a, n):
            out[:] = -np.inf
            return out
        _forward_inplace(a, w, n)
        ll = -0.5 * n * LOG_2PI
        for r in range(n):
            ll -= math.log(a[r, r]) + 0.5 * w[r] * w[r]
        out[i] = ll
    return out


@njit
def _conditional_loops(sigma, resid, perm, n_obs, z):
    """Draw missing cells given observed ones, per country.

    Returns (dev, cmean, status); ``dev`` holds draw-minus-mean at missing
    positions, ``cmean`` the conditional mean minus mean there.  ``status`` is
    0, or i+1 for a failed observed-block factorization in country i, or
    -(i+1) for a failed conditional-covariance factorization.
    """
    N, B = resid.shape
    dev = np.zeros((N, B))
    cmean = np.zeros((N, B))
    loo = np.empty((B, B))
    wmat = np.empty((B, B))
    cc = np.empty((B, B))
    a = np.empty(B)
    for i in range(N):
        no = n_obs[i]
        nm = B - no
        if nm == 0:
            continue
        for r in range(no):
            a[r] = resid[i, perm[i, r]]
            for c in range(r + 1):
                loo[r, c] = sigma[perm[i, r], perm[i, c]]
        if no > 0:
            if not _chol_inplace(loo, no):
                return dev, cmean, i + 1
            _forward_inplace(loo, a, no)
        # W = L_oo^-1 Sigma_om, column by column
        for m in range(nm):
            pm = perm[i, no + m]
            for r in range(no):
                s = sigma[perm[i, r], pm]
                for p in range(r):
                    s -= loo[r, p] * wmat[p, m]
                wmat[r, m] = s / loo[r, r]
        for m in range(nm):
            s = 0.0
            for r in range(no):
                s += wmat[r, m] * a[r]
            cmean[i, perm[i, no + m]] = s
            for m2 in range(m + 1):
                t = sigma[perm[i, no + m], perm[i, no + m2]]
                for r in range(no):
                    t -= wmat[r, m] * wmat[r, m2]
                cc[m, m2] = t
        if not _chol_inplace(cc, nm):
            return dev, cmean, -(i + 1)
        for m in range(nm):
            s = cmean[i, perm[i, no + m]]
            for p in range(m + 1):
                s += cc[m, p] * z[i, p]
            dev[i, perm[i, no + m]] = s
    return dev, cmean, 0


@njit
def _gibbs_loops(q, tau, n_years, resid, mask, b, eps, noise_b, noise_e):
    """Alternating random-effect / single-site error sweeps, in place.

    Returns b_k + eps at every position of the final state.
    """
    sweeps = noise_b.shape[0]
    N, B = resid.shape
    P = tau.shape[0]
    out = np.empty((N, B))
    for i in range(N):
        for sw in range(sweeps):
            for k in range(P):
                if tau[k] <= 0.0:
                    b[i, k] = 0.0
                    continue
                n = 0
                acc = 0.0
                for t in range(n_years):
                    j = k * n_years + t
                    if mask[i, j]:
                        n += 1
                        acc += resid[i, j] - eps[i, j]
                v = 1.0 / (1.0 / tau[k] + n)
                b[i, k] = v * acc + math.sqrt(v) * noise_b[sw, i, k]
            for j in range(B):
                s = 0.0
                for l in range(B):
                    if l != j:
                        s += q[j, l] * eps[i, l]
                eps[i, j] = -s / q[j, j] + noise_e[sw, i, j] / math.sqrt(q[j, j])
        for k in range(P):
            for t in range(n_years):
                j = k * n_years + t
                out[i, j] = b[i, k] + eps[i, j]
    return out


@njit
def _sigma_loops(s, gamma, rho, tau, n_years):
    """Q^-1 + Omega for one country; ok=False if Q is not PD."""
    T = n_years
    B = 3 * T
    q = np.zeros((B, B))
    for k in range(3):
        for t in range(T):
            j = k * T + t
            q[j, j] = s[k]
            if t > 0:
                q[j, j - 1] = gamma[k]
    for p in range(3):
        a = 0 if p < 2 else 1
        c = 1 if p == 0 else 2
        for t in range(T):
            q[c * T + t, a * T + t] = rho[p]
    if not _chol_inplace(q, B):
        return q, False
    # invert the lower factor in place of a fresh buffer
    li = np.zeros((B, B))
    for j in range(B):
        li[j, j] = 1.0 / q[j, j]
        for i in range(j + 1, B):
            acc = 0.0
            for p in range(j, i):
                acc += q[i, p] * li[p, j]
            li[i, j] = -acc / q[i, i]
    sigma = np.empty((B, B))
    for i in range(B):
        for j in range(i + 1):
            acc = 0.0
            for p in range(i, B):
                acc += li[p, i] * li[p, j]
            sigma[i, j] = acc
            sigma[j, i] = acc
    for k in range(3):
        for t in range(T):
            for u in range(T):
                sigma[k * T + t, k * T + u] += tau[k]
    return sigma, True


# --------------------------------------------------------------------------
# numpy versions


def _groups(n_obs):
    order = np.argsort(n_obs, kind="stable")
    counts = n_obs[order]
    edges = np.flatnonzero(np.diff(counts)) + 1
    return [(int(n_obs[g[0]]), g) for g in np.split(order, edges) if len(g)]


def _loglik_numpy(sigma, resid, perm, n_obs):
    out = np.zeros(len(n_obs))
    for n, idx in _groups(n_obs):
        if n == 0:
            continue
        po = perm[idx, :n]
        s_oo = sigma[po[:, :, None], po[:, None, :]]
        r = np.take_along_axis(resid[idx], po, axis=1)
        try:
            L = np.linalg.cholesky(s_oo)
        except np.linalg.LinAlgError:
            out[:] = -np.inf
            return out
        w = np.linalg.solve(L, r[:, :, None])[:, :, 0]
        logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        out[idx] = -0.5 * n * LOG_2PI - logdet - 0.5 * np.sum(w * w, axis=1)
    return out


def _conditional_numpy(sigma, resid, perm, n_obs, z):
    N, B = resid.shape
    dev = np.zeros((N, B))
    cmean = np.zeros((N, B))
    for no, idx in _groups(n_obs):
        nm = B - no
        if nm == 0:
            continue
        po = perm[idx, :no]
        pm = perm[idx, no:]
        s_mm = sigma[pm[:, :, None], pm[:, None, :]]
        if no > 0:
            s_oo = sigma[po[:, :, None], po[:, None, :]]
            s_om = sigma[po[:, :, None], pm[:, None, :]]
            try:
                L = np.linalg.cholesky(s_oo)
            except np.linalg.LinAlgError:
                bad = _first_failure(s_oo)
                return dev, cmean, int(idx[bad]) + 1
            W = np.linalg.solve(L, s_om)
            a = np.linalg.solve(L, np.take_along_axis(resid[idx], po, axis=1)[:, :, None])
            cm = np.matmul(W.transpose(0, 2, 1), a)[:, :, 0]
            cc = s_mm - np.matmul(W.transpose(0, 2, 1), W)
        else:
            cm = np.zeros((len(idx), nm))
            cc = s_mm
        try:
            Lc = np.linalg.cholesky(cc)
        except np.linalg.LinAlgError:
            bad = _first_failure(cc)
            return dev, cmean, -(int(idx[bad]) + 1)
        d = cm + np.matmul(Lc, z[idx, :nm, None])[:, :, 0]
        rows = idx[:, None]
        cmean[rows, pm] = cm
        dev[rows, pm] = d
    return dev, cmean, 0


def _first_failure(stack):
    for g, m in enumerate(stack):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            return g
    return 0


def _gibbs_numpy(q, tau, n_years, resid, mask, b, eps, noise_b, noise_e):
    sweeps = noise_b.shape[0]
    N, B = resid.shape
    P = tau.shape[0]
    qd = np.diag(q).copy()
    qoff = q - np.diag(qd)
    m3 = mask.reshape(N, P, n_years)
    r3 = np.where(mask, resid, 0.0).reshape(N, P, n_years)
    n_ik = m3.sum(axis=2)
    pos = tau > 0
    inv_tau = np.where(pos, 1.0 / np.where(pos, tau, 1.0), 0.0)
    v = np.where(pos, 1.0 / (inv_tau + n_ik), 0.0)
    for sw in range(sweeps):
        acc = (r3 - np.where(m3, eps.reshape(N, P, n_years), 0.0)).sum(axis=2)
        b[:] = np.where(pos, v * acc + np.sqrt(v) * noise_b[sw], 0.0)
        for j in range(B):
            s = eps @ qoff[j]
            eps[:, j] = -s / qd[j] + noise_e[sw, :, j] / np.sqrt(qd[j])
    return np.repeat(b, n_years, axis=1) + eps


def _sigma_numpy(s, gamma, rho, tau, n_years):
    T = n_years
    eye = np.eye(T)
    off = np.eye(T, k=1) + np.eye(T, k=-1)
    q = np.zeros((3 * T, 3 * T))
    for k in range(3):
        q[k * T:(k + 1) * T, k * T:(k + 1) * T] = s[k] * eye + gamma[k] * off
    for p, (a, c) in enumerate(((0, 1), (0, 2), (1, 2))):
        q[a * T:(a + 1) * T, c * T:(c + 1) * T] = rho[p] * eye
        q[c * T:(c + 1) * T, a * T:(a + 1) * T] = rho[p] * eye
    try:
        L = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        return q, False
    li = np.linalg.solve(L, np.eye(3 * T))
    sigma = li.T @ li
    sigma = 0.5 * (sigma + sigma.T)
    for k in range(3):
        sigma[k * T:(k + 1) * T, k * T:(k + 1) * T] += tau[k]
    return sigma, True


loglik_loops = _loglik_loops
conditional_loops = _conditional_loops
gibbs_loops = _gibbs_loops

if USE_NUMBA:
    loglik_by_country = loglik_loops
    country_sigma = _sigma_loops
    conditional_draw = conditional_loops
    gibbs_sweeps = gibbs_loops
else:
    loglik_by_country = _loglik_numpy
    country_sigma = _sigma_numpy
    conditional_draw = _conditional_numpy
    gibbs_sweeps = _gibbs_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
