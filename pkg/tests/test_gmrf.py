import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpgmrf.errors import NonPositiveDiagonal, NotPositiveDefinite
from kpgmrf.gmrf import (PARAM_NAMES, StructuralParams, build_country_covariance,
                         build_country_precision, build_cross_block, build_mean,
                         build_temporal_block, covariance_matrix, implied_correlations,
                         mid_position)

from conftest import make_panel
from oracles import global_covariance, global_mean, random_valid_theta


def _params(s=(1, 1, 1), gamma=(0, 0, 0), rho=(0, 0, 0), tau=(0, 0, 0), mu=None):
    mu = np.zeros((7, 3)) if mu is None else mu
    return StructuralParams(mu, np.asarray(tau, float), np.asarray(s, float),
                            np.asarray(gamma, float), np.asarray(rho, float), allow_zero_tau=True)


def test_param_layout():
    assert len(PARAM_NAMES) == 33
    assert PARAM_NAMES[0] == "mu_ESA_MSM" and PARAM_NAMES[21] == "tau_MSM"
    assert PARAM_NAMES[30:] == ("rho_MSM_FSW", "rho_MSM_PWID", "rho_FSW_PWID")


def test_tau_must_be_positive_on_public_path():
    with pytest.raises(ValueError):
        StructuralParams(np.zeros((7, 3)), np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3))


def test_temporal_block_examples():
    np.testing.assert_array_equal(build_temporal_block(1, 0, 3), np.eye(3))
    np.testing.assert_array_equal(build_temporal_block(2, -1, 2), [[2, -1], [-1, 2]])
    with pytest.raises(NonPositiveDiagonal):
        build_temporal_block(0, 0.1, 3)


def test_temporal_block_minors_s1_gamma06():
    # determinants by direct computation; they follow D_n = D_{n-1} - 0.36 D_{n-2}
    # and turn negative at order 5, so this block is not positive definite
    frozen = [1.0, 0.64, 0.28, 0.0496, -0.0512, -0.069056, -0.050624, -0.02576384,
              -0.0075392, 0.0017357824, 0.0044498944]
    m = build_temporal_block(1, 0.6, 11)
    minors = [np.linalg.det(m[:k, :k]) for k in range(1, 12)]
    np.testing.assert_allclose(minors, frozen, rtol=1e-9, atol=1e-12)
    assert minors[1] == pytest.approx(0.64)
    with pytest.raises(NotPositiveDefinite):
        build_country_precision(_params(gamma=(0.6, 0.6, 0.6)))


def test_cross_block_examples():
    np.testing.assert_array_equal(build_cross_block(0, 11), np.zeros((11, 11)))
    np.testing.assert_array_equal(build_cross_block(0.0026, 2), np.diag([0.0026, 0.0026]))
    np.testing.assert_array_equal(build_cross_block(-0.3, 1), [[-0.3]])


def test_precision_single_year_layout():
    q = build_country_precision(_params(s=(1.5, 2, 3), rho=(0.1, -0.2, 0.3)), n_years=1)
    np.testing.assert_array_equal(q, [[1.5, 0.1, -0.2], [0.1, 2, 0.3], [-0.2, 0.3, 3]])


def test_precision_diagonal_when_uncoupled():
    q = build_country_precision(_params(s=(1, 2, 3)))
    np.testing.assert_array_equal(q, np.diag(np.repeat([1.0, 2.0, 3.0], 11)))


def _usmani_inverse(a, b, n):
    # closed-form inverse of a symmetric tridiagonal Toeplitz matrix
    th = [0.0, 1.0]  # theta_{-1}, theta_0
    for _ in range(n):
        th.append(a * th[-1] - b * b * th[-2])
    theta = lambda k: th[k + 1]
    inv = np.empty((n, n))
    for i in range(1, n + 1):
        for j in range(i, n + 1):
            inv[i - 1, j - 1] = inv[j - 1, i - 1] = (-b) ** (j - i) * theta(i - 1) * theta(n - j) / theta(n)
    return inv


def test_precision_inverse_matches_toeplitz_formula():
    p = _params(gamma=(0.45, 0.45, 0.45))
    q = build_country_precision(p)
    np.linalg.cholesky(q)
    cov = covariance_matrix(p)
    blk = _usmani_inverse(1.0, 0.45, 11)
    for k in range(3):
        np.testing.assert_allclose(cov[k * 11:(k + 1) * 11, k * 11:(k + 1) * 11], blk, atol=1e-12)
    np.testing.assert_allclose(cov[:11, 11:], 0, atol=0)


def test_covariance_identity_and_tau_examples():
    np.testing.assert_allclose(build_country_covariance(_params()).sigma, np.eye(33), atol=1e-15)
    sig = build_country_covariance(_params(tau=(0.5, 0, 0))).sigma
    msm = sig[:11, :11]
    np.testing.assert_allclose(np.diag(msm), 1.5)
    np.testing.assert_allclose(msm[~np.eye(11, dtype=bool)], 0.5)
    np.testing.assert_allclose(sig[11:, 11:], np.eye(22), atol=1e-15)


def test_covariance_matches_dense_global_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(5):
        th = random_valid_theta(rng)
        p = StructuralParams.from_vector(th)
        g = global_covariance(p.s, p.gamma, p.rho, p.tau, 3)
        cc = build_country_covariance(p)
        for i in range(3):
            np.testing.assert_allclose(cc.sigma, g[33 * i:33 * (i + 1), 33 * i:33 * (i + 1)],
                                       rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(g[:33, 33:], 0)
        rel = np.linalg.norm(cc.chol @ cc.chol.T - cc.sigma) / np.linalg.norm(cc.sigma)
        assert rel < 1e-10


def test_symmetry_exact():
    rng = np.random.default_rng(5)
    p = StructuralParams.from_vector(random_valid_theta(rng))
    q = build_country_precision(p)
    s = build_country_covariance(p).sigma
    assert np.array_equal(q, q.T) and np.array_equal(s, s.T)


def test_zero_rho_factorizes_by_population():
    rng = np.random.default_rng(6)
    th = random_valid_theta(rng)
    th[30:] = 0
    s = build_country_covariance(StructuralParams.from_vector(th)).sigma
    for a in range(3):
        for b in range(3):
            if a != b:
                assert np.all(s[a * 11:(a + 1) * 11, b * 11:(b + 1) * 11] == 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0))
def test_scale_divides_precision_part(c):
    rng = np.random.default_rng(8)
    p = StructuralParams.from_vector(random_valid_theta(rng))
    base = covariance_matrix(p) - covariance_matrix(p.replace(s=p.s * 1e9, gamma=p.gamma * 1e9,
                                                               rho=p.rho * 1e9))
    scaled = p.replace(s=p.s * c, gamma=p.gamma * c, rho=p.rho * c)
    np.testing.assert_allclose((covariance_matrix(scaled) - (covariance_matrix(p) - base)) * c,
                               base, rtol=1e-7, atol=1e-9)


def test_pd_propagates_with_nonnegative_tau():
    rng = np.random.default_rng(9)
    for _ in range(20):
        th = random_valid_theta(rng)
        th[21:24] = rng.choice([0.0, 0.3, 5.0], 3)
        build_country_covariance(StructuralParams.from_vector(th, allow_zero_tau=True))


def test_build_mean():
    mu = np.arange(21, dtype=float).reshape(7, 3)
    p = _params(mu=mu)
    panel = make_panel(np.full((2, 3, 11), np.nan), [2, 5])
    m = build_mean(p, panel)
    np.testing.assert_array_equal(m, global_mean(mu, [2, 5]))
    mr = m.reshape(2, 3, 11)
    assert np.all(mr[:, :, 0] == mr[:, :, 10])
    assert not np.array_equal(mr[0], mr[1])
    one = build_mean(_params(mu=np.full((7, 3), -2.5)), make_panel(np.full((3, 3, 11), np.nan), [1, 1, 1]))
    assert np.all(one == -2.5)


def test_implied_correlations_examples():
    c0 = implied_correlations(_params())
    np.testing.assert_allclose(c0, 0, atol=1e-15)
    tau = 0.7
    c = implied_correlations(_params(tau=(tau, 0, 0)))
    assert c[0, 0] == pytest.approx(tau / (1 + tau), rel=1e-12)
    assert mid_position(11) == 5


def test_implied_correlations_match_covariance_entries():
    rng = np.random.default_rng(10)
    p = StructuralParams.from_vector(random_valid_theta(rng))
    s = covariance_matrix(p)
    c = implied_correlations(p)
    d = np.sqrt(np.diag(s))
    assert c[1, 1] == pytest.approx(s[16, 17] / (d[16] * d[17]), rel=1e-12)
    assert c[0, 2] == pytest.approx(s[5, 27] / (d[5] * d[27]), rel=1e-12)
    assert np.array_equal(c, c.T)
