import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate, stats

from hierprior import (
    BetaCase,
    BetaPriorSpec,
    DegenerateSpectrumError,
    ModelData,
    ModelError,
    VPriorParams,
    eigendecompose,
    log_beta_prior_density,
    log_v_prior_density,
    named_v_prior,
    sample_haar_orthogonal,
    sample_inverse_wishart,
)
from hierprior.core import (
    log_hd_prior_density,
    log_inverse_wishart_kernel,
    log_vandermonde,
    sample_haar_batch,
    sample_wishart,
)


def random_spd(k, rng, scale=1.0):
    Z = rng.standard_normal((k, k))
    return scale * (Z @ Z.T) + 0.1 * np.eye(k)


@pytest.mark.parametrize("k", [2, 3, 7])
def test_named_prior_exponents(k):
    half = Fraction(k + 1, 2)
    rb = Fraction(2 * k - 1, 2 * k)
    expected = {
        "Constant": (0, 0, 1),
        "NonhierJeffreys": (half, half, 1),
        "HierJeffreys": (0, half, 1),
        "NonhierReference": (1, 1, 0),
        "HierReferenceA": (0, 1, 0),
        "HierReferenceB": (rb, rb, 0),
    }
    for name, triple in expected.items():
        p = named_v_prior(name, k)
        assert (p.a1, p.a2, p.l) == triple
        assert p.exact


def test_named_prior_rejects_unknown():
    with pytest.raises(ModelError):
        named_v_prior("Flat", 3)
    with pytest.raises(ModelError):
        named_v_prior("Constant", 1)


def test_l_out_of_range():
    with pytest.raises(ModelError):
        VPriorParams(0, 1, 2)


def test_eigendecompose_round_trip(rng):
    for k in (2, 3, 5):
        V = random_spd(k, rng)
        e = eigendecompose(V)
        assert np.all(np.diff(e.d) < 0)
        np.testing.assert_allclose(e.H @ e.H.T, np.eye(k), atol=1e-12)
        np.testing.assert_allclose(e.reconstruct(), V, atol=1e-12)
        # row convention: H V H^t = D
        np.testing.assert_allclose(e.H @ V @ e.H.T, np.diag(e.d), atol=1e-11)
        for row in e.H:
            assert row[np.flatnonzero(np.abs(row) > 1e-14)[0]] > 0


def test_eigendecompose_ties_and_non_pd():
    with pytest.raises(DegenerateSpectrumError):
        eigendecompose(2 * np.eye(3))
    with pytest.raises(ModelError):
        eigendecompose(np.diag([1.0, -1.0]))
    with pytest.raises(ModelError):
        eigendecompose(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_v_density_is_hd_density_minus_jacobian(rng):
    for name in ("Constant", "HierJeffreys", "HierReferenceA", "HierReferenceB"):
        p = named_v_prior(name, 3)
        V = random_spd(3, rng)
        d = np.linalg.eigvalsh(V)[::-1]
        assert log_v_prior_density(V, p) == pytest.approx(
            log_hd_prior_density(d, p) - log_vandermonde(d), abs=1e-10)


def test_reference_density_direct_form(rng):
    V = random_spd(3, rng)
    d = np.linalg.eigvalsh(V)[::-1]
    gaps = [d[0] - d[1], d[0] - d[2], d[1] - d[2]]
    direct_a = -np.linalg.slogdet(np.eye(3) + V)[1] - np.sum(np.log(gaps))
    assert log_v_prior_density(V, named_v_prior("HierReferenceA", 3)) == pytest.approx(direct_a)
    direct_b = -(5 / 6) * np.linalg.slogdet(V)[1] - np.sum(np.log(gaps))
    assert log_v_prior_density(V, named_v_prior("HierReferenceB", 3)) == pytest.approx(direct_b)


def test_jeffreys_density_direct_form(rng):
    V = random_spd(2, rng)
    direct = -1.5 * np.linalg.slogdet(np.eye(2) + V)[1]
    assert log_v_prior_density(V, named_v_prior("HierJeffreys", 2)) == pytest.approx(direct)
    # l = 1 priors stay finite at ties
    assert np.isfinite(log_v_prior_density(np.eye(2), named_v_prior("HierJeffreys", 2)))
    with pytest.raises(DegenerateSpectrumError):
        log_v_prior_density(np.eye(2), named_v_prior("HierReferenceA", 2))


def test_beta_t_marginal_matches_lambda_integral():
    k, b, c = 3, 0.5, 0.5
    spec = BetaPriorSpec(BetaCase.HIERARCHICAL, np.zeros(k), np.eye(k), b, c)
    betas = [np.zeros(k), np.array([1.0, -2.0, 0.5]), np.array([4.0, 0.0, 0.0])]

    def by_quad(beta):
        q = float(beta @ beta)
        f = lambda t: math.exp(-0.5 * q / t - 0.5 * k * math.log(t) - b * math.log(t) - c / t)
        return math.log(integrate.quad(f, 0, np.inf, limit=200)[0])

    quad = [by_quad(x) for x in betas]
    closed = [log_beta_prior_density(x, spec) for x in betas]
    np.testing.assert_allclose(np.diff(quad), np.diff(closed), atol=1e-7)


def test_normal_beta_density():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    spec = BetaPriorSpec(BetaCase.NORMAL, np.array([1.0, -1.0]), A)
    beta = np.array([0.2, 0.4])
    ref = stats.multivariate_normal(mean=[1.0, -1.0], cov=A).logpdf(beta)
    assert log_beta_prior_density(beta, spec) == pytest.approx(ref, abs=1e-12)
    lam = 2.5
    hspec = BetaPriorSpec(BetaCase.HIERARCHICAL, np.array([1.0, -1.0]), A)
    ref = stats.multivariate_normal(mean=[1.0, -1.0], cov=lam * A).logpdf(beta)
    assert log_beta_prior_density(beta, hspec, lam) == pytest.approx(ref, abs=1e-12)


def test_beta_spec_validation():
    with pytest.raises(ModelError):
        BetaPriorSpec(BetaCase.NORMAL)
    with pytest.raises(ModelError):
        BetaPriorSpec(BetaCase.NORMAL, np.zeros(2), -np.eye(2))
    with pytest.raises(ModelError):
        BetaPriorSpec(BetaCase.HIERARCHICAL, np.zeros(2), np.eye(2), b=-1)
    assert BetaPriorSpec(BetaCase.NORMAL, None, 3 * np.eye(4)).A_scalar() == 3.0
    assert BetaPriorSpec(BetaCase.NORMAL, None, np.diag([1.0, 2.0])).A_scalar() is None
    assert BetaCase.from_any(2) is BetaCase.NORMAL
    assert BetaCase.from_any("Case3") is BetaCase.HIERARCHICAL


def test_model_data_validation():
    with pytest.raises(ModelError):
        ModelData(np.zeros((3, 1)))
    with pytest.raises(ModelError):
        ModelData(np.array([[1.0, np.nan]]))
    with pytest.raises(ModelError):
        ModelData(np.zeros(3))
    d = ModelData([[1, 2], [3, 4], [5, 6]])
    assert (d.m, d.k) == (3, 2)
    with pytest.raises(ValueError):
        d.x[0, 0] = 1.0


def test_haar_moments(rng):
    k, n = 3, 20000
    Q = sample_haar_batch(n, k, rng)
    np.testing.assert_allclose(np.einsum("nij,nkj->nik", Q, Q), np.broadcast_to(np.eye(k), Q.shape),
                               atol=1e-12)
    # E[Q] = 0, E[Q_ij^2] = 1/k, and both determinant signs equally likely
    assert np.abs(Q.mean(axis=0)).max() < 4 / math.sqrt(k * n)
    np.testing.assert_allclose((Q ** 2).mean(axis=0), 1 / k, atol=0.01)
    assert abs(np.mean(np.linalg.det(Q) > 0) - 0.5) < 0.02
    # first column uniform on the sphere: its first coordinate has a known law
    u = Q[:, 0, 0]
    assert stats.kstest((u + 1) / 2, stats.beta((k - 1) / 2, (k - 1) / 2).cdf).pvalue > 1e-3
    single = sample_haar_orthogonal(4, rng)
    np.testing.assert_allclose(single @ single.T, np.eye(4), atol=1e-12)


def test_wishart_mean(rng):
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    W = np.array([sample_wishart(7.0, S, rng) for _ in range(20000)])
    np.testing.assert_allclose(W.mean(axis=0), 7.0 * S, rtol=0.03, atol=0.05)


def test_inverse_wishart_mean(rng):
    S = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 3.0]])
    df = 10.0
    V = np.array([sample_inverse_wishart(df, S, rng) for _ in range(40000)])
    np.testing.assert_allclose(V.mean(axis=0), S / (df - 4), rtol=0.03, atol=0.005)


def test_inverse_wishart_one_dimensional_law(rng):
    df, psi = 5.0, 3.0
    v = np.array([sample_inverse_wishart(df, [[psi]], rng)[0, 0] for _ in range(20000)])
    ref = stats.invgamma(df / 2, scale=psi / 2)
    assert stats.kstest(v, ref.cdf).pvalue > 1e-3


def test_inverse_wishart_kernel_matches_scipy(rng):
    S = random_spd(3, rng)
    df = 6.0
    A, B = random_spd(3, rng), random_spd(3, rng)
    ours = log_inverse_wishart_kernel(A, df, S) - log_inverse_wishart_kernel(B, df, S)
    ref = stats.invwishart(df=df, scale=S)
    assert ours == pytest.approx(ref.logpdf(A) - ref.logpdf(B), abs=1e-9)


def test_wishart_rejects_small_df(rng):
    with pytest.raises(ModelError):
        sample_wishart(1.0, np.eye(3), rng)
    with pytest.raises(ModelError):
        sample_inverse_wishart(1.5, np.eye(3), rng)
