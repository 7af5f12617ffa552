import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import logsumexp

from hierprior import (
    BetaCase,
    BetaPriorSpec,
    HyperpriorSpec,
    ModelError,
    VPriorParams,
    named_v_prior,
)
from hierprior.core import sample_haar_batch
from hierprior.oracle import (
    Evidence,
    IntegrationConfig,
    lemma33_f,
    tail_integral_slope,
    log_marginal_mc,
    mbar_estimate,
    munder_estimate,
    ordered_region_integral,
    propriety_probe,
    sample_sphere,
    sphere_averages,
)


def spec_of(vprior, case, k=2, A=None, b=0.5):
    if case == 1:
        return HyperpriorSpec(vprior, BetaPriorSpec(BetaCase.FLAT))
    A = np.eye(k) if A is None else np.asarray(A, float)
    c = {2: BetaCase.NORMAL, 3: BetaCase.HIERARCHICAL}[case]
    return HyperpriorSpec(vprior, BetaPriorSpec(c, np.zeros(k), A, b, 0.5))


# -- an independent k = 2 integrator ---------------------------------------
# m(x) = (1/pi) int_0^pi dphi (1/2) int int pi(H, D) L(H, D) dd1 dd2 over the
# unordered quadrant, with H the rotation by phi; L has beta and theta
# integrated out.

PHI = np.linspace(0, np.pi, 64, endpoint=False)


def _rot(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, s], [-s, c]])  # rows are eigenvectors


def _log_trapz(logf, u):
    h = u[1] - u[0]
    w = np.full(u.size, h)
    w[0] = w[-1] = h / 2
    return logsumexp(logf + np.log(w), axis=-1)


def grid_log_marginal(x, a1, a2, l, case, A=None, lam_b=0.5, lam_c=0.5):
    x = np.asarray(x, float)
    m = x.shape[0]
    xbar = x.mean(0)
    R = x - xbar
    u = np.linspace(-30, 25, 1101)
    d = np.exp(u)
    vals = []
    for phi in PHI:
        H = _rot(phi)
        y = np.sum((R @ H.T) ** 2, axis=0)  # per eigen-direction
        z = H @ xbar
        D1, D2 = np.meshgrid(d, d, indexing="ij")
        U1, U2 = np.meshgrid(u, u, indexing="ij")
        logf = (-(a2 - a1) * (np.log1p(D1) + np.log1p(D2)) - a1 * (U1 + U2)
                - (m - 1) / 2 * (np.log1p(D1) + np.log1p(D2))
                - 0.5 * (y[0] / (1 + D1) + y[1] / (1 + D2)) + U1 + U2)
        if l:
            with np.errstate(divide="ignore"):
                logf = logf + l * np.log(np.abs(D1 - D2))
        if case == 2:
            HAH = H @ A @ H.T
            M11, M22, M12 = 1 + D1 + m * HAH[0, 0], 1 + D2 + m * HAH[1, 1], m * HAH[0, 1]
            det = M11 * M22 - M12 ** 2
            quad = (M22 * z[0] ** 2 - 2 * M12 * z[0] * z[1] + M11 * z[1] ** 2) / det
            logf = logf - 0.5 * np.log(det) - 0.5 * m * quad
        inner = _log_trapz(_log_trapz(logf, u), u)
        vals.append(inner - math.log(2))
    return logsumexp(vals) - math.log(len(PHI))


def separable_case3_log_marginal(x, a1, a2, alpha=1.0, b=0.5, c=0.5):
    """l = 0, A = alpha I: one-dimensional eigenvalue integrals at each (phi, lambda)."""
    x = np.asarray(x, float)
    m = x.shape[0]
    xbar = x.mean(0)
    R = x - xbar
    u = np.linspace(-40, 30, 2801)
    d = np.exp(u)
    t = np.linspace(-25, 25, 1001)
    lam = np.exp(t)
    vals = []
    for phi in PHI:
        H = _rot(phi)
        y = np.sum((R @ H.T) ** 2, axis=0)
        z2 = (H @ xbar) ** 2
        s = 1 + d[None, :] + m * alpha * lam[:, None]
        per_j = []
        for j in range(2):
            logf = (-(a2 - a1) * np.log1p(d) - a1 * u - (m - 1) / 2 * np.log1p(d)
                    - 0.5 * y[j] / (1 + d) + u)[None, :] - 0.5 * np.log(s) - 0.5 * m * z2[j] / s
            per_j.append(_log_trapz(logf, u))
        lam_part = per_j[0] + per_j[1] - b * t - c / lam + t
        vals.append(_log_trapz(lam_part, t) - math.log(2))
    return logsumexp(vals) - math.log(len(PHI))


def assert_close(est, ref, n_se=3.0, floor=2e-3):
    assert abs(est.estimate - ref) <= n_se * est.std_error + floor, (est, ref)


DATA = np.array([[1.0, -0.5], [2.5, 1.0], [-0.7, 0.3], [0.4, 2.2]])


def test_tied_data_matches_product_quadrature():
    x = np.array([[0.3, -1.2], [0.3, -1.2]])
    for name in ("HierReferenceA", "HierReferenceB"):
        p = named_v_prior(name, 2)
        a1, a2 = float(p.a1), float(p.a2)
        one, _ = integrate.quad(lambda d: d ** (-a1) * (1 + d) ** (-(a2 - a1) - 0.5), 0, np.inf,
                                epsabs=0, epsrel=1e-12, limit=400)
        ref = 2 * math.log(one) - math.log(2)
        est = log_marginal_mc(x, spec_of(p, 1), rng=np.random.default_rng(0))
        assert abs(est.estimate - ref) <= 3 * est.std_error + 1e-9, (name, est, ref)


def test_case1_separable_against_grid():
    p = named_v_prior("HierReferenceA", 2)
    ref = grid_log_marginal(DATA, 0.0, 1.0, 0, 1)
    est = log_marginal_mc(DATA, spec_of(p, 1), IntegrationConfig(n_haar=512), np.random.default_rng(1))
    assert_close(est, ref)


def test_case1_eigen_repulsion_against_grid():
    # l = 1 takes the tensor-product path
    p = named_v_prior("HierJeffreys", 2)
    ref = grid_log_marginal(DATA, 0.0, 1.5, 1, 1)
    est = log_marginal_mc(DATA, spec_of(p, 1), IntegrationConfig(n_haar=256), np.random.default_rng(2))
    assert_close(est, ref)


def test_case2_general_A_against_grid():
    A = np.array([[1.0, 0.4], [0.4, 3.0]])
    p = named_v_prior("HierReferenceA", 2)
    ref = grid_log_marginal(DATA, 0.0, 1.0, 0, 2, A=A)
    est = log_marginal_mc(DATA, spec_of(p, 2, A=A), IntegrationConfig(n_haar=256),
                          np.random.default_rng(3))
    assert_close(est, ref)


def test_case3_against_grid():
    p = named_v_prior("HierReferenceA", 2)
    ref = separable_case3_log_marginal(DATA + 1.5, 0.0, 1.0)
    est = log_marginal_mc(DATA + 1.5, spec_of(p, 3), IntegrationConfig(n_haar=512),
                          np.random.default_rng(4))
    assert_close(est, ref)


def test_doubled_spread_lowers_marginal():
    p = spec_of(named_v_prior("HierReferenceA", 2), 1)
    haar = sample_haar_batch(128, 2, np.random.default_rng(5))
    x = DATA - DATA.mean(0)
    base = log_marginal_mc(x, p, haar=haar).estimate
    assert log_marginal_mc(2 * x, p, haar=haar).estimate < base


def test_small_A_continuity():
    p = named_v_prior("HierReferenceA", 2)
    haar = sample_haar_batch(128, 2, np.random.default_rng(6))
    a = log_marginal_mc(DATA, spec_of(p, 2, A=1e-6 * np.eye(2)), haar=haar)
    b = log_marginal_mc(DATA, spec_of(p, 2, A=1e-7 * np.eye(2)), haar=haar)
    assert abs(a.estimate - b.estimate) <= 3 * max(a.std_error, b.std_error) + 1e-6


def test_marginal_input_checks():
    with pytest.raises(ModelError, match="improper"):
        log_marginal_mc(DATA, spec_of(named_v_prior("Constant", 2), 1))
    with pytest.raises(ModelError):
        log_marginal_mc(DATA[:1], spec_of(named_v_prior("HierReferenceA", 2), 2))
    with pytest.raises(ModelError):
        log_marginal_mc(np.zeros((3, 5)), spec_of(named_v_prior("HierReferenceA", 5), 1))
    with pytest.raises(ModelError):
        IntegrationConfig(lambda_points=10)


def test_exponential_factor_and_determinant_bounds():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        m = int(rng.integers(1, 6))
        D = np.diag(np.exp(rng.normal(0, 2, k)))
        H = sample_haar_batch(1, k, rng)[0]
        G = rng.standard_normal((k, k))
        A = G @ G.T + 1e-3 * np.eye(k)
        rho = np.linalg.eigvalsh(A)
        I = np.eye(k)
        M = I + D + m * H @ A @ H.T
        dets = [np.linalg.det(I + D), np.linalg.det(I + D + m * rho[0] * I), np.linalg.det(M),
                np.linalg.det(I + D + m * rho[-1] * I), (1 + m * rho[-1]) ** k * np.linalg.det(I + D)]
        assert all(lo <= hi * (1 + 1e-10) for lo, hi in zip(dets, dets[1:]))
        v = rng.standard_normal(k) * 3
        q_hi = v @ np.linalg.solve(I + D + m * rho[-1] * I, v)
        q = v @ np.linalg.solve(M, v)
        q_lo = v @ np.linalg.solve(I + D + m * rho[0] * I, v)
        assert q_hi <= q * (1 + 1e-10) and q <= q_lo * (1 + 1e-10)
        h = rng.standard_normal((m, k))
        expo = -0.5 * sum(hi @ H.T @ np.linalg.solve(I + D + A, H @ hi) for hi in h)
        assert -0.5 * np.sum(h ** 2) <= expo + 1e-12 and expo <= 0


# -- propriety probe ---------------------------------------------------------

def test_probe_a1_one_diverges_at_zero():
    ev = propriety_probe(spec_of(VPriorParams(1, 2, 0), 1), 3, 2)
    assert ev.status is Evidence.DIVERGES and ev.end == "zero"


def test_probe_converges_for_reference_prior():
    ev = propriety_probe(spec_of(VPriorParams(0, 1, 0), 1), 2, 2)
    assert ev.status is Evidence.CONVERGES
    assert ev.growth_exponent < -0.05
    assert len(ev.partial_integrals) == 48


def test_probe_constant_prior_diverges_at_infinity():
    ev = propriety_probe(spec_of(named_v_prior("Constant", 3), 1, k=3), 6, 3)
    assert ev.status is Evidence.DIVERGES and ev.end == "infinity"


def test_probe_log_rate_divergence():
    # Constant prior, flat beta, m = 2k + 1: integrand ~ 1/d at infinity
    ev = propriety_probe(spec_of(named_v_prior("Constant", 2), 1), 5, 2)
    assert ev.status is Evidence.DIVERGES and abs(ev.growth_exponent) < 1e-3
    assert ev.to_record()["status"] == "Diverges"


def test_probe_lambda_end():
    ev = propriety_probe(spec_of(named_v_prior("HierReferenceA", 2), 3, b=0.0), 4, 2)
    assert ev.status is Evidence.DIVERGES and ev.end == "lambda"


# -- spherical averages ------------------------------------------------------

FAST = IntegrationConfig(n_haar=32, check_truncation=False)


def test_sphere_points_have_radius():
    pts = sample_sphere(50, 3, 2, 7.5, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(pts.reshape(50, -1), axis=1), 7.5)


def test_sphere_generator_matches_dirichlet_form():
    # squared coordinates over r^2 are Dirichlet(1/2, ..., 1/2)
    rng = np.random.default_rng(1)
    m, k, r, n = 2, 2, 5.0, 4000
    g = sample_sphere(n, m, k, r, rng).reshape(n, -1)
    w = rng.dirichlet(np.full(m * k, 0.5), size=n)
    alt = r * np.sqrt(w) * rng.choice([-1.0, 1.0], size=w.shape)
    from scipy.stats import ks_2samp
    assert ks_2samp(g[:, 0], alt[:, 0]).pvalue > 1e-3
    spec = spec_of(named_v_prior("HierReferenceA", 2), 2)
    haar = sample_haar_batch(32, 2, rng)
    L = np.array([log_marginal_mc(p.reshape(m, k), spec, FAST, haar=haar).estimate for p in alt[:200]])
    est, se = mbar_estimate(r, spec, m, k, 200, FAST, np.random.default_rng(2))
    alt_est = logsumexp(L) - math.log(L.size)
    e = np.exp(L - L.max())
    alt_se = e.std(ddof=1) / (math.sqrt(L.size) * e.mean())
    assert abs(est - alt_est) < 3 * math.hypot(se, alt_se) + 1e-3


def test_zero_radius_is_marginal_at_origin():
    spec = spec_of(named_v_prior("HierReferenceA", 2), 2)
    cfg = IntegrationConfig(n_haar=64)
    at0 = log_marginal_mc(np.zeros((2, 2)), spec, cfg, np.random.default_rng(3))
    est, se = mbar_estimate(0.0, spec, 2, 2, 8, cfg, np.random.default_rng(3))
    assert abs(est - at0.estimate) <= se + 1e-9
    est_u, se_u = munder_estimate(0.0, spec, 2, 2, 8, cfg, np.random.default_rng(3))
    assert abs(est_u + at0.estimate) <= se_u + 1e-9


def test_jensen_reciprocal_bound():
    spec = spec_of(named_v_prior("HierReferenceA", 2), 2)
    rng = np.random.default_rng(4)
    for r in (1.0, 4.0, 16.0):
        lbar, sbar, lund, sund = sphere_averages(r, spec, 2, 2, 32, FAST, rng)
        assert lbar + lund >= -3 * math.hypot(sbar, sund)


def test_sphere_se_scaling():
    # the per-point Haar error is shared by all sphere points and does not
    # shrink with n_sphere, so use enough rotations for the sphere term to dominate
    spec = spec_of(named_v_prior("HierReferenceA", 2), 2)
    cfg = IntegrationConfig(n_haar=1024, check_truncation=False)
    small = [mbar_estimate(6.0, spec, 2, 2, 64, cfg, np.random.default_rng(s))[1] for s in range(4)]
    big = [mbar_estimate(6.0, spec, 2, 2, 128, cfg, np.random.default_rng(100 + s))[1]
           for s in range(4)]
    ratio = np.mean(big) / np.mean(small)
    assert abs(ratio - 1 / math.sqrt(2)) <= 0.2 / math.sqrt(2)


@pytest.mark.parametrize("cfg", [IntegrationConfig(n_haar=32, check_truncation=False),
                                 IntegrationConfig(n_haar=32, quad_points=81, max_log_step=0.25,
                                                   check_truncation=False)])
def test_mbar_slope(cfg):
    spec = spec_of(VPriorParams(0, 1.5, 0), 2)
    rng = np.random.default_rng(5)
    rs = [4.0, 8.0, 16.0, 32.0]
    vals = [mbar_estimate(r, spec, 2, 2, 64, cfg, rng)[0] for r in rs]
    slope = np.polyfit(np.log(rs), vals, 1)[0]
    assert abs(slope - (-5.0)) <= 0.3


# -- one-dimensional bounding integral --------------------------------------

def test_tail_integral_at_zero():
    assert lemma33_f(0.0, 2.0, 0.0) == pytest.approx(1.0, rel=1e-9)
    # int d^-1/2 (1 + d)^-2 = B(1/2, 3/2) = pi / 2
    assert lemma33_f(0.0, 2.0, 0.5) == pytest.approx(math.pi / 2, rel=1e-8)


def test_tail_integral_nonincreasing():
    vals = [lemma33_f(v, 1.5, 0.2) for v in np.geomspace(1e-2, 1e6, 20)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("r,a", [(2, 0.5), (1.5, 0.9), (3, 0)])
def test_tail_integral_slope(r, a):
    assert tail_integral_slope(r, a) == pytest.approx(1 - r - a, abs=0.02)


def test_tail_integral_rejects_bad_parameters():
    with pytest.raises(ModelError):
        lemma33_f(1.0, 2.0, 1.0)
    with pytest.raises(ModelError):
        lemma33_f(1.0, 0.5, 0.2)


@pytest.mark.parametrize("k", [2, 3])
def test_ordered_region_times_k_factorial(k):
    rng = np.random.default_rng(k)
    nodes = np.exp(np.linspace(-4, 4, 17 if k == 2 else 11))
    logw = np.log(np.gradient(nodes))
    C = rng.standard_normal((k, k))
    C = C @ C.T

    def g(V):
        # rotation-sensitive, so per-H values differ; symmetric in D after averaging over H
        B = np.eye(k)[None] + V
        return np.exp(-0.5 * np.einsum("ij,nji->n", C, np.linalg.inv(B))) / np.linalg.det(B) ** 2

    haar = sample_haar_batch(400, k, rng)
    ordered, full = ordered_region_integral(g, k, nodes, logw, haar)
    scaled = math.factorial(k) * ordered
    se = math.sqrt(np.var(scaled, ddof=1) / scaled.size + np.var(full, ddof=1) / full.size)
    assert abs(scaled.mean() - full.mean()) <= 3 * se
