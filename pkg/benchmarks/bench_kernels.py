"""Compiled loop kernels versus numpy kernels on a full-size synthetic panel.

    python3 benchmarks/bench_kernels.py [--countries 199] [--repeat 20]

Both paths get identical inputs; the script checks they agree and prints
the median time per call.
"""

import argparse
import time

import numpy as np

from kpgmrf import kernels
from kpgmrf.gmrf import build_country_precision
from kpgmrf.posterior import Design
from kpgmrf.simulate import ScenarioSpec, default_truth, simulate_panel


def _time(fn, repeat):
    fn()  # warm up (and compile)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--countries", type=int, default=199)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    p = default_truth()
    panel, _ = simulate_panel(ScenarioSpec(n_countries=args.countries, params=p, seed=args.seed))
    d = Design.from_panel(panel)
    th = p.to_vector()
    resid = d.y - d.mean(th[:21])
    s, g, r, t = th[24:27], th[27:30], th[30:33], th[21:24]
    sigma, _ = kernels._sigma_numpy(s, g, r, t, d.n_years)
    q = build_country_precision(p)
    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal(resid.shape)
    nb = rng.standard_normal((10, resid.shape[0], 3))
    ne = rng.standard_normal((10, *resid.shape))

    def gibbs(fn):
        return lambda: fn(q, t, d.n_years, resid, d.mask, np.zeros((resid.shape[0], 3)),
                          np.zeros_like(resid), nb, ne)

    cases = [
        ("country_sigma", lambda: kernels._sigma_loops(s, g, r, t, d.n_years),
         lambda: kernels._sigma_numpy(s, g, r, t, d.n_years)),
        ("loglik", lambda: kernels._loglik_loops(sigma, resid, d.perm, d.n_obs),
         lambda: kernels._loglik_numpy(sigma, resid, d.perm, d.n_obs)),
        ("conditional", lambda: kernels._conditional_loops(sigma, resid, d.perm, d.n_obs, z),
         lambda: kernels._conditional_numpy(sigma, resid, d.perm, d.n_obs, z)),
        ("gibbs_10_sweeps", gibbs(kernels._gibbs_loops), gibbs(kernels._gibbs_numpy)),
    ]
    print(f"N={args.countries} countries, {panel.n_observed} observed cells, median of {args.repeat}")
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, fa, fb in cases:
        a, b = fa(), fb()
        a0 = a[0] if isinstance(a, tuple) else a
        b0 = b[0] if isinstance(b, tuple) else b
        ok = np.allclose(a0, b0, rtol=1e-8, atol=1e-10)
        ta, tb = _time(fa, args.repeat), _time(fb, args.repeat)
        print(f"{name:<16}{ta * 1e3:>10.3f}{tb * 1e3:>10.3f}{tb / ta:>9.2f}  {ok}")


if __name__ == "__main__":
    main()
