import warnings

import numpy as np
import pytest

from kpgmrf.errors import ConfigError, NonConvergence, NotPositiveDefinite
from kpgmrf.gmrf import StructuralParams, implied_correlations
from kpgmrf.posterior import ModelSpec, PriorSpec, SamplerConfig, log_likelihood
from kpgmrf.simulate import (DEFAULT_PROFILE, DENSE_PROFILE, ScenarioSpec, default_truth,
                             load_scenario, recovery_experiment, simulate_panel,
                             strong_temporal_truth, write_scenario)

NONE = {p: (1.0, 0.0, 0.0) for p in ("MSM", "FSW", "PWID")}


def _unit():
    return StructuralParams(np.zeros((7, 3)), np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3),
                            allow_zero_tau=True)


def test_unit_variance_monte_carlo():
    n = 10000
    _, truth = simulate_panel(ScenarioSpec(n_countries=n, params=_unit(), profile=NONE, seed=1))
    v = truth.reshape(n, 33).var(axis=0, ddof=1)
    se = np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(v - 1) < 3 * se)


def test_empty_profile_returns_truth():
    panel, truth = simulate_panel(ScenarioSpec(n_countries=5, profile=NONE, seed=2))
    assert panel.n_observed == 0
    assert truth.shape == (165,) and np.all(np.isfinite(truth))


def test_observed_equals_truth_and_deterministic():
    spec = ScenarioSpec(n_countries=30, seed=3)
    a, ta = simulate_panel(spec)
    b, tb = simulate_panel(spec)
    assert np.array_equal(a.y[a.mask], ta[a.mask])
    assert np.array_equal(ta, tb) and np.array_equal(a.mask, b.mask)
    assert np.all(np.isnan(a.y[~a.mask]))


def test_category_counts_follow_profile():
    spec = ScenarioSpec(n_countries=40, profile=dict(DEFAULT_PROFILE), seed=4)
    panel, _ = simulate_panel(spec)
    cnt = panel.obs_count()
    for k, pop in enumerate(("MSM", "FSW", "PWID")):
        c = cnt[:, k]
        got = ((c == 0).sum(), ((c >= 1) & (c <= 4)).sum(), (c >= 5).sum())
        want = np.round(np.array(DEFAULT_PROFILE[pop]) * 40)
        assert np.abs(np.array(got) - want).max() <= 1
        assert sum(got) == 40


def test_lag1_autocorrelation_matches_implied():
    # zero means so that pooling countries across regions adds no spread
    p = default_truth().replace(mu=np.zeros((7, 3)))
    n = 8000
    _, truth = simulate_panel(ScenarioSpec(n_countries=n, params=p, profile=NONE, seed=5))
    y = truth.reshape(n, 3, 11)
    c = implied_correlations(p)
    for k in range(3):
        emp = np.corrcoef(y[:, k, 5], y[:, k, 6])[0, 1]
        # sd of a sample correlation is about (1 - r^2) / sqrt(n)
        assert abs(emp - c[k, k]) < 4 * (1 - c[k, k] ** 2) / np.sqrt(n)
    emp = np.corrcoef(y[:, 0, 5], y[:, 1, 5])[0, 1]
    assert abs(emp - c[0, 1]) < 4 / np.sqrt(n)


def test_truth_beats_perturbed_params():
    p = default_truth()
    wins = 0
    for seed in range(10):
        panel, _ = simulate_panel(ScenarioSpec(n_countries=20, params=p, seed=seed))
        bad = p.replace(mu=p.mu + 0.4, s=p.s * 1.5)
        wins += log_likelihood(p, panel) > log_likelihood(bad, panel)
    assert wins >= 9


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(profile={"MSM": (0.5, 0.2, 0.2)})
    with pytest.raises(ValueError):
        ScenarioSpec(region_rule="alphabetical")
    bad = StructuralParams(np.zeros((7, 3)), np.ones(3), np.ones(3), np.full(3, 0.6), np.zeros(3))
    with pytest.raises(NotPositiveDefinite):
        simulate_panel(ScenarioSpec(n_countries=2, params=bad))


def test_table_region_rule_covers_regions():
    panel, _ = simulate_panel(ScenarioSpec(n_countries=14, region_rule="table", seed=0))
    assert sorted(set(panel.region.tolist())) == list(range(7))
    assert len(panel.countries[0]) == 3


def test_named_truths_are_valid():
    for p in (default_truth(), strong_temporal_truth()):
        simulate_panel(ScenarioSpec(n_countries=3, params=p, profile=DENSE_PROFILE))
    c = implied_correlations(strong_temporal_truth())
    assert np.all(np.diag(c) > 0.85)


def test_scenario_file_round_trip(tmp_path):
    spec = ScenarioSpec(n_countries=12, params=strong_temporal_truth(), profile=dict(DENSE_PROFILE),
                        seed=8, region_rule="table")
    path = tmp_path / "s.ini"
    write_scenario(spec, path)
    back = load_scenario(path)
    assert back.n_countries == 12 and back.seed == 8 and back.region_rule == "table"
    assert np.array_equal(back.params.to_vector(), spec.params.to_vector())
    assert back.profile == spec.profile
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.ini")
    (tmp_path / "b.ini").write_text("[params]\nnot_a_param = 1\n")
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "b.ini")


def test_one_country_recovery_smoke():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        rep = recovery_experiment(ScenarioSpec(n_countries=1, profile=DENSE_PROFILE, seed=3),
                                  SamplerConfig(chains=2, draws=20, thin=1, seed=1))
    assert len(list(rep.rows())) == 33
    assert 0 <= rep.coverage <= 1


def test_zero_couplings_shrink_rho():
    # regional means at the prior location; with means near -3 the sparse
    # prior pulls them toward 0 and the shared residual loads onto rho
    p = default_truth().replace(rho=np.zeros(3), mu=np.zeros((7, 3)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        rep = recovery_experiment(ScenarioSpec(n_countries=20, params=p, seed=6),
                                  SamplerConfig(chains=2, draws=400, thin=5, seed=2),
                                  ModelSpec(PriorSpec("laplace", 0.1)))
    assert np.all(np.abs(rep.mean[30:33]) < 0.1)
