"""Numerical oracles for the marginal density m(x) and related integrals.

The marginal density is written in eigen-coordinates V = H^t D H, averaged
over Haar-distributed H by Monte Carlo and integrated over the eigenvalues
by a trapezoid rule in log d.  The ordering d_1 > ... > d_k is handled by
integrating over all of (0, inf)^k and dividing by k!.

Eigenvalue axes use the trapezoid rule in u = log d on [d_min, d_max] with
two power-law tail corrections: the integrand behaves like d^{-a1} near 0
and like d^{-q} near infinity, with q known from the prior exponents, so
the mass outside the grid is added to the end nodes in closed form.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

from .analysis import check_propriety
from .core import (
    BetaCase,
    HyperpriorSpec,
    ModelError,
    log_lambda_prior_density,
    log_v_prior_density,
    sample_haar_batch,
)


class InconclusiveIntegration(RuntimeError):
    """The estimate moved by more than its error bar when d_max was doubled."""


@dataclass(frozen=True)
class IntegrationConfig:
    n_haar: int = 64
    quad_points: int = 41
    d_max: float = 1e4
    d_min: float = 1e-6
    lambda_min: float = 1e-4
    lambda_max: float = 1e4
    lambda_points: int = 65
    #: largest trapezoid step in log d; grids are refined to respect it
    max_log_step: float = 0.5
    check_truncation: bool = True
    #: grid points per tensor-product evaluation chunk
    chunk: int = 200_000

    def __post_init__(self):
        if self.n_haar < 1:
            raise ModelError("n_haar must be >= 1")
        if self.quad_points < 8:
            raise ModelError("quad_points must be >= 8")
        if not self.d_max > 0 or not 0 < self.d_min < self.d_max:
            raise ModelError("need 0 < d_min < d_max")
        if self.lambda_points < 64:
            raise ModelError("lambda grid needs at least 64 nodes")


@dataclass(frozen=True)
class MarginalEstimate:
    """log m(x) with its uncertainty.

    ``std_error`` combines the Haar jackknife error and the quadrature
    error (difference to the rule on every other node).  Unpacks as
    ``(estimate, std_error)``.
    """

    estimate: float
    std_error: float
    jackknife_se: float = 0.0
    quad_error: float = 0.0
    per_haar: np.ndarray = field(default=None, repr=False, compare=False)

    def __iter__(self) -> Iterator[float]:
        yield self.estimate
        yield self.std_error


class Evidence(str, enum.Enum):
    CONVERGES = "Converges"
    DIVERGES = "Diverges"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class DivergenceEvidence:
    status: Evidence
    partial_integrals: tuple
    growth_exponent: float
    end: str = ""
    details: tuple = ()

    def to_record(self) -> dict:
        return {
            "status": self.status.value,
            "end": self.end,
            "growth_exponent": self.growth_exponent,
            "partial_integrals": list(self.partial_integrals),
            "details": [dict(d) for d in self.details],
        }


def log_marginal_integrand(V, lam, x, spec: HyperpriorSpec) -> float:
    """log of the integrand of m(x) over (V[, lambda]) with beta and theta integrated out.

    Case 1: |I+V|^{-(m-1)/2} exp(-tr((I+V)^{-1} S)/2) pi(V), S the scatter
    matrix about the row mean.  Cases 2 and 3 add the factor
    |I+V+m s A|^{-1/2} exp(-m (xbar-beta0)^t (I+V+m s A)^{-1} (xbar-beta0)/2)
    with s = 1 (Case 2) or s = lambda times pi(lambda) (Case 3).
    """
    x = np.atleast_2d(np.asarray(getattr(x, "x", x), dtype=float))
    V = np.asarray(V, dtype=float)
    m, k = x.shape
    xbar = x.mean(axis=0)
    R = x - xbar
    B = np.eye(k) + V
    sign, logdet = np.linalg.slogdet(B)
    if sign <= 0:
        return -np.inf
    S = R.T @ R
    out = -(m - 1) / 2 * logdet - 0.5 * float(np.trace(np.linalg.solve(B, S)))
    out += log_v_prior_density(V, spec.vprior)
    bp = spec.bprior
    if bp.case is BetaCase.FLAT:
        return out
    s = 1.0
    if bp.case is BetaCase.HIERARCHICAL:
        if lam is None or not lam > 0:
            raise ModelError("the hierarchical beta prior needs lambda > 0")
        s = float(lam)
        out += log_lambda_prior_density(s, float(bp.b), float(bp.c))
    M = B + m * s * bp.A
    sign, logdetM = np.linalg.slogdet(M)
    zc = xbar - bp.beta0
    out += -0.5 * logdetM - 0.5 * m * float(zc @ np.linalg.solve(M, zc))
    return out


# -- quadrature rules --------------------------------------------------------

def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def log_axis_rule(lo: float, hi: float, n: int, low_exp: float | None, high_exp: float | None):
    """Nodes and log-weights of the trapezoid rule in log x on [lo, hi].

    ``low_exp`` is the exponent a with f(x) ~ x^{-a} near 0 (a < 1) and
    ``high_exp`` the exponent q with f(x) ~ x^{-q} near infinity (q > 1);
    the omitted mass is folded into the end weights.  ``None`` means the
    integrand is negligible beyond that end.
    """
    u = np.linspace(math.log(lo), math.log(hi), n)
    h = u[1] - u[0]
    x = np.exp(u)
    w = h * x
    w[0] *= 0.5
    w[-1] *= 0.5
    if low_exp is not None:
        if low_exp >= 1:
            raise ModelError(f"integrand is not integrable at 0 (exponent {low_exp})")
        w[0] += lo / (1 - low_exp)
    if high_exp is not None:
        if high_exp <= 1:
            raise ModelError(f"integrand is not integrable at infinity (exponent {high_exp})")
        w[-1] += hi / (high_exp - 1)
    return x, np.log(w)


def _every_other(x: np.ndarray, logw: np.ndarray, lo_tail: float, hi_tail: float):
    """Coarse rule on nodes 0, 2, 4, ... with the same tail corrections."""
    xs = x[::2]
    u = np.log(xs)
    h = u[1] - u[0]
    w = h * xs
    w[0] *= 0.5
    w[-1] *= 0.5
    w[0] += lo_tail
    w[-1] += hi_tail
    return xs, np.log(w)


@dataclass
class _Axis:
    x: np.ndarray
    logw: np.ndarray
    x_coarse: np.ndarray
    logw_coarse: np.ndarray


def _make_axis(lo, hi, n, low_exp, high_exp, max_step) -> _Axis:
    width = math.log(hi) - math.log(lo)
    n = _odd(max(n, int(math.ceil(width / max_step)) + 1))
    x, logw = log_axis_rule(lo, hi, n, low_exp, high_exp)
    lo_tail = 0.0 if low_exp is None else lo / (1 - low_exp)
    hi_tail = 0.0 if high_exp is None else hi / (high_exp - 1)
    xc, lwc = _every_other(x, logw, lo_tail, hi_tail)
    return _Axis(x, logw, xc, lwc)


# -- the marginal integrand ------------------------------------------------

@dataclass(frozen=True)
class _Problem:
    """Data summaries entering the marginal integrand."""

    m: int
    k: int
    resid: np.ndarray  # m x k, x_i - xbar
    center: np.ndarray  # xbar - beta0
    case: BetaCase
    a1: float
    a2: float
    l: float
    A: np.ndarray | None
    alpha: float | None  # A = alpha I when not None
    b: float
    c: float

    @classmethod
    def build(cls, x: np.ndarray, spec: HyperpriorSpec) -> "_Problem":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, k = x.shape
        xbar = x.mean(axis=0)
        bp = spec.bprior
        beta0 = np.zeros(k) if bp.beta0 is None else bp.beta0
        return cls(
            m=m, k=k, resid=x - xbar, center=xbar - beta0, case=bp.case,
            a1=float(spec.vprior.a1), a2=float(spec.vprior.a2), l=float(spec.vprior.l),
            A=bp.A, alpha=bp.A_scalar(), b=float(bp.b), c=float(bp.c))

    @property
    def d_tail_exponent(self) -> float:
        q = self.a2 + (self.m - 1) / 2 - (self.k - 1) * self.l
        if self.case is not BetaCase.FLAT:
            q += 0.5
        return q

    @property
    def lambda_tail_exponent(self) -> float:
        return self.b + self.k / 2

    def data_scale(self) -> float:
        return float(np.sum(self.resid ** 2) + self.m * np.sum(self.center ** 2))

    @property
    def separable(self) -> bool:
        return self.l == 0 and (self.case is BetaCase.FLAT or self.alpha is not None)


def _log_gamma_k(k: int) -> float:
    return float(gammaln(k + 1))


def _separable_log_integrals(prob: _Problem, Hs: np.ndarray, d: np.ndarray, logw: np.ndarray,
                             lam: np.ndarray | None, loglamw: np.ndarray | None) -> np.ndarray:
    """log of the unordered D-integral for each H when l = 0 and A = alpha I."""
    m = prob.m
    # y2[h, j] = sum_i (H resid_i)_j^2 ; z2[h, j] = (H center)_j^2
    Z = np.einsum("hjl,il->hij", Hs, prob.resid)
    y2 = np.sum(Z ** 2, axis=1)
    z2 = np.einsum("hjl,l->hj", Hs, prob.center) ** 2
    logd = np.log(d)
    log1pd = np.log1p(d)
    base = (-(prob.a2 - prob.a1) - (m - 1) / 2) * log1pd - prob.a1 * logd + logw  # (n_d,)
    # Case 1 exponential term
    e1 = -0.5 * y2[:, :, None] / (1.0 + d)[None, None, :]  # (h, j, n_d)
    if prob.case is BetaCase.FLAT:
        per_j = logsumexp(base[None, None, :] + e1, axis=2)
        return per_j.sum(axis=1)
    alpha = prob.alpha
    if prob.case is BetaCase.NORMAL:
        s = 1.0 + d + m * alpha  # (n_d,)
        e2 = -0.5 * np.log(s)[None, None, :] - 0.5 * m * z2[:, :, None] / s[None, None, :]
        per_j = logsumexp(base[None, None, :] + e1 + e2, axis=2)
        return per_j.sum(axis=1)
    # Case 3: integrate each coordinate at every lambda, then over lambda
    s = 1.0 + d[None, :] + m * alpha * lam[:, None]  # (n_lam, n_d)
    e2 = (-0.5 * np.log(s))[None, None] - 0.5 * m * z2[:, :, None, None] / s[None, None]
    per_j = logsumexp(base[None, None, None, :] + e1[:, :, None, :] + e2, axis=3)  # (h, j, n_lam)
    loglam_prior = -prob.b * np.log(lam) - prob.c / lam + loglamw
    return logsumexp(per_j.sum(axis=1) + loglam_prior[None, :], axis=1)


def _tensor_log_integrals(prob: _Problem, Hs: np.ndarray, d: np.ndarray, logw: np.ndarray,
                          lam: np.ndarray | None, loglamw: np.ndarray | None,
                          chunk: int) -> np.ndarray:
    """General path: full tensor grid over the k eigenvalues (and lambda)."""
    k, m = prob.k, prob.m
    n = d.size
    idx = np.array(list(product(range(n), repeat=k)), dtype=np.intp)  # (N, k)
    D = d[idx]
    logW = logw[idx].sum(axis=1)
    logD = np.log(D)
    log1pD = np.log1p(D)
    prior = -(prob.a2 - prob.a1) * log1pD.sum(1) - prob.a1 * logD.sum(1)
    if prob.l != 0:
        iu = np.triu_indices(k, 1)
        gaps = np.abs(D[:, iu[0]] - D[:, iu[1]])
        with np.errstate(divide="ignore"):
            prior = prior + prob.l * np.log(gaps).sum(1)
    base = prior - (m - 1) / 2 * log1pD.sum(1) + logW  # (N,)
    out = np.empty(len(Hs))
    for h, H in enumerate(Hs):
        Z = prob.resid @ H.T  # rows H resid_i
        y2 = np.sum(Z ** 2, axis=0)
        e1 = -0.5 * (y2[None, :] / (1.0 + D)).sum(1)
        if prob.case is BetaCase.FLAT:
            out[h] = logsumexp(base + e1)
            continue
        zc = H @ prob.center
        B = H @ prob.A @ H.T
        if prob.case is BetaCase.NORMAL:
            svals = [1.0]
            lam_terms = np.zeros(1)
        else:
            svals = lam
            lam_terms = -prob.b * np.log(lam) - prob.c / lam + loglamw
        acc = []
        for s, lt in zip(svals, lam_terms):
            parts = []
            for start in range(0, D.shape[0], chunk):
                Dc = D[start:start + chunk]
                M = np.zeros((Dc.shape[0], k, k))
                M[:, np.arange(k), np.arange(k)] = 1.0 + Dc
                M += m * s * B[None]
                sign, logdet = np.linalg.slogdet(M)
                quad = np.einsum("i,nij,j->n", zc, np.linalg.inv(M), zc)
                parts.append(base[start:start + chunk] + e1[start:start + chunk]
                             - 0.5 * logdet - 0.5 * m * quad)
            acc.append(logsumexp(np.concatenate(parts)) + lt)
        out[h] = logsumexp(acc)
    return out


def _log_integrals(prob: _Problem, Hs, d_axis: _Axis, lam_axis: _Axis | None, cfg, coarse=False):
    d, logw = (d_axis.x_coarse, d_axis.logw_coarse) if coarse else (d_axis.x, d_axis.logw)
    lam = loglamw = None
    if lam_axis is not None:
        lam, loglamw = ((lam_axis.x_coarse, lam_axis.logw_coarse) if coarse
                        else (lam_axis.x, lam_axis.logw))
    if prob.separable:
        vals = _separable_log_integrals(prob, Hs, d, logw, lam, loglamw)
    else:
        vals = _tensor_log_integrals(prob, Hs, d, logw, lam, loglamw, cfg.chunk)
    return vals - _log_gamma_k(prob.k)


def _log_mean_exp(L: np.ndarray) -> float:
    return float(logsumexp(L) - math.log(L.size))


def _jackknife_se(L: np.ndarray) -> float:
    n = L.size
    if n < 2:
        return 0.0
    top = np.max(L)
    e = np.exp(L - top)
    total = e.sum()
    loo = np.log(np.maximum(total - e, 1e-300) / (n - 1)) + top
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def _axes(prob: _Problem, cfg: IntegrationConfig, d_max: float):
    d_hi = max(d_max, 1e3 * prob.data_scale())
    d_axis = _make_axis(cfg.d_min, d_hi, cfg.quad_points, prob.a1, prob.d_tail_exponent,
                        cfg.max_log_step)
    lam_axis = None
    if prob.case is BetaCase.HIERARCHICAL:
        lam_axis = _make_axis(cfg.lambda_min, cfg.lambda_max, cfg.lambda_points, None,
                              prob.lambda_tail_exponent, cfg.max_log_step)
    return d_axis, lam_axis


def _estimate(prob: _Problem, Hs: np.ndarray, cfg: IntegrationConfig, d_max: float):
    d_axis, lam_axis = _axes(prob, cfg, d_max)
    L = _log_integrals(prob, Hs, d_axis, lam_axis, cfg)
    Lc = _log_integrals(prob, Hs, d_axis, lam_axis, cfg, coarse=True)
    est = _log_mean_exp(L)
    quad_err = abs(est - _log_mean_exp(Lc))
    jk = _jackknife_se(L)
    return est, jk, quad_err, L


def _validate_marginal_inputs(x, spec: HyperpriorSpec) -> np.ndarray:
    x = np.atleast_2d(np.asarray(getattr(x, "x", x), dtype=float))
    m, k = x.shape
    if k > 4:
        raise ModelError("marginal evaluation is limited to k <= 4")
    if m < 2:
        raise ModelError("marginal evaluation needs m >= 2")
    spec.check_dimension(k)
    verdict = check_propriety(spec, m, k)
    if not verdict.proper:
        raise ModelError(f"posterior is improper: {verdict.rule}")
    return x


def log_marginal_mc(x, spec: HyperpriorSpec, cfg: IntegrationConfig | None = None,
                    rng: np.random.Generator | None = None,
                    haar: np.ndarray | None = None) -> MarginalEstimate:
    """Estimate log m(x) (up to the prior's dropped constants).

    Outer Monte Carlo over ``cfg.n_haar`` Haar rotations (or the supplied
    ``haar`` stack), inner quadrature over the eigenvalues and, for the
    hierarchical beta prior, over lambda.
    """
    cfg = cfg or IntegrationConfig()
    x = _validate_marginal_inputs(x, spec)
    prob = _Problem.build(x, spec)
    if haar is None:
        rng = rng if rng is not None else np.random.default_rng()
        haar = sample_haar_batch(cfg.n_haar, prob.k, rng)
    est, jk, qerr, L = _estimate(prob, haar, cfg, cfg.d_max)
    se = math.hypot(jk, qerr)
    if cfg.check_truncation:
        est2, jk2, qerr2, _ = _estimate(prob, haar, cfg, 2 * cfg.d_max)
        shift = abs(est2 - est)
        if shift > 3 * max(se, math.hypot(jk2, qerr2)) + 1e-9 * max(1.0, abs(est)):
            raise InconclusiveIntegration(
                f"log m(x) moved by {shift:.3g} when d_max doubled (se {se:.3g})")
    return MarginalEstimate(est, se, jk, qerr, L)


# -- spherical averages ---------------------------------------------------

def sample_sphere(n: int, m: int, k: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform on the radius-r sphere in R^{mk}, shaped (n, m, k)."""
    g = rng.standard_normal((n, m * k))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return (r * g).reshape(n, m, k)


def _sphere_log_marginals(r, spec, m, k, n_sphere, cfg, rng):
    cfg = cfg or IntegrationConfig()
    haar = sample_haar_batch(cfg.n_haar, k, rng)
    if r == 0:
        pts = np.zeros((1, m, k))
    else:
        pts = sample_sphere(n_sphere, m, k, r, rng)
    ests = [log_marginal_mc(p, spec, cfg, haar=haar) for p in pts]
    L = np.array([e.estimate for e in ests])
    point_se = float(np.mean([e.std_error for e in ests]))
    if r == 0:
        L = np.repeat(L, n_sphere)
    return L, point_se


def _log_mean_with_se(L: np.ndarray, point_se: float):
    est = _log_mean_exp(L)
    n = L.size
    e = np.exp(L - np.max(L))
    rel = float(np.std(e, ddof=1) / (math.sqrt(n) * np.mean(e))) if n > 1 else 0.0
    return est, math.hypot(rel, point_se)


def mbar_estimate(r: float, spec: HyperpriorSpec, m: int, k: int, n_sphere: int,
                  cfg: IntegrationConfig | None = None,
                  rng: np.random.Generator | None = None):
    """log of the average of m(x) over the radius-r sphere, with its standard error."""
    rng = rng if rng is not None else np.random.default_rng()
    L, pse = _sphere_log_marginals(r, spec, m, k, n_sphere, cfg, rng)
    return _log_mean_with_se(L, pse)


def munder_estimate(r: float, spec: HyperpriorSpec, m: int, k: int, n_sphere: int,
                    cfg: IntegrationConfig | None = None,
                    rng: np.random.Generator | None = None):
    """log of the average of 1/m(x) over the radius-r sphere, with its standard error."""
    rng = rng if rng is not None else np.random.default_rng()
    L, pse = _sphere_log_marginals(r, spec, m, k, n_sphere, cfg, rng)
    return _log_mean_with_se(-L, pse)


def sphere_averages(r, spec, m, k, n_sphere, cfg=None, rng=None):
    """(log mbar, se, log munder, se) from one shared set of sphere points."""
    rng = rng if rng is not None else np.random.default_rng()
    L, pse = _sphere_log_marginals(r, spec, m, k, n_sphere, cfg, rng)
    return (*_log_mean_with_se(L, pse), *_log_mean_with_se(-L, pse))


def _fit_slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


def brown_condition_trend(spec: HyperpriorSpec, m: int, k: int, r_grid: Sequence[float],
                          cfg: IntegrationConfig | None = None, n_sphere: int = 64,
                          rng: np.random.Generator | None = None,
                          tolerance: float = 0.1) -> dict:
    """Growth exponents of the two spherical-average integrands.

    The admissibility integrand is [r^{mk-1} mbar(r)]^{-1}; the
    inadmissibility integrand is r^{1-mk} munder(r).  A power r^e
    integrates to infinity iff e >= -1.  Fits within ``tolerance`` of -1
    are marked inconclusive.  Diagnostic only.
    """
    rng = rng if rng is not None else np.random.default_rng()
    verdict = check_propriety(spec, m, k)
    if not verdict.proper:
        raise ModelError(f"posterior is improper: {verdict.rule}")
    rows = []
    for r in r_grid:
        lbar, sbar, lund, sund = sphere_averages(r, spec, m, k, n_sphere, cfg, rng)
        rows.append({"r": float(r), "log_mbar": lbar, "se_mbar": sbar,
                     "log_munder": lund, "se_munder": sund})
    logr = np.log([row["r"] for row in rows])
    slope_bar = _fit_slope(logr, [row["log_mbar"] for row in rows])
    slope_under = _fit_slope(logr, [row["log_munder"] for row in rows])
    p = m * k
    e25 = -(p - 1) - slope_bar
    e26 = (1 - p) + slope_under
    return {
        "admissibility_exponent": e25,
        "inadmissibility_exponent": e26,
        "admissibility_integral_diverges": bool(e25 > -1 - tolerance),
        "admissibility_inconclusive": bool(abs(e25 + 1) < tolerance),
        "inadmissibility_integral_converges": bool(e26 < -1 - tolerance),
        "inadmissibility_inconclusive": bool(abs(e26 + 1) < tolerance),
        "slope_log_mbar": slope_bar,
        "slope_log_munder": slope_under,
        "grid": rows,
    }


# -- propriety probe ------------------------------------------------------

def _doubling_increments(f: Callable[[float], float], n_doublings: int, toward_zero: bool):
    """Integrals of f over [2^j, 2^{j+1}] (or [2^{-j-1}, 2^{-j}]), j = 0..n-1."""
    out = []
    for j in range(n_doublings):
        if toward_zero:
            lo, hi = 2.0 ** (-j - 1), 2.0 ** (-j)
        else:
            lo, hi = 2.0 ** j, 2.0 ** (j + 1)
        # substitute x = lo * e^t so the piece is O(1) in size
        val, _ = integrate.quad(lambda t: f(lo * math.exp(t)) * lo * math.exp(t), 0.0,
                                math.log(hi / lo), epsabs=0.0, epsrel=1e-10, limit=200)
        out.append(val)
    return np.array(out)


def _classify_growth(incr: np.ndarray, fit_last: int, power_tol: float, log_tol: float):
    """Slope of log increment per log 2 of truncation over the last doublings.

    Increments of a power-law tail x^e scale like 2^{j(e+1)}; e + 1 is the
    growth exponent.  Positive: power divergence.  Zero: logarithmic
    divergence (constant increments).  Negative: convergence.
    """
    j = np.arange(incr.size)[-fit_last:]
    tail = incr[-fit_last:]
    if np.any(tail <= 0) or not np.all(np.isfinite(tail)):
        return Evidence.INCONCLUSIVE, float("nan")
    s = _fit_slope(j, np.log2(tail))
    if s > power_tol:
        return Evidence.DIVERGES, s
    if s < -power_tol:
        return Evidence.CONVERGES, s
    if abs(s) < log_tol:
        return Evidence.DIVERGES, s
    return Evidence.INCONCLUSIVE, s


def propriety_probe(spec: HyperpriorSpec, m: int, k: int, n_doublings: int = 48,
                    fit_last: int = 8, power_tol: float = 0.05,
                    log_tol: float = 1e-3) -> DivergenceEvidence:
    """Numerically test the one-dimensional integrability criteria.

    Three ends are checked: d -> 0 with integrand d^{-a1}(1 + d)^{-p};
    d -> infinity with d^{(k-1)l - a1}(1 + d)^{-(a2 - a1 + p)}, where
    p = (m-1)/2 for a flat beta prior and m/2 otherwise; and, for the
    hierarchical beta prior, lambda -> infinity with
    lambda^{-b}(1 + lambda)^{-k/2}.  Partial integrals are accumulated at
    doubling truncations and classified from the growth of the increments.
    """
    v, bp = spec.vprior, spec.bprior
    a1, a2, l = float(v.a1), float(v.a2), float(v.l)
    p = (m - 1) / 2 if bp.case is BetaCase.FLAT else m / 2

    ends = {
        "zero": (lambda d: d ** (-a1) * (1 + d) ** (-p), True),
        "infinity": (lambda d: d ** ((k - 1) * l - a1) * (1 + d) ** (-(a2 - a1 + p)), False),
    }
    if bp.case is BetaCase.HIERARCHICAL:
        b = float(bp.b)
        ends["lambda"] = (lambda t: t ** (-b) * (1 + t) ** (-k / 2), False)

    details = []
    worst = None
    for name, (f, toward_zero) in ends.items():
        incr = _doubling_increments(f, n_doublings, toward_zero)
        status, s = _classify_growth(incr, fit_last, power_tol, log_tol)
        partial = tuple(float(x) for x in np.cumsum(incr))
        details.append({"end": name, "status": status.value, "growth_exponent": s})
        rank = {Evidence.DIVERGES: 2, Evidence.INCONCLUSIVE: 1, Evidence.CONVERGES: 0}[status]
        if worst is None or rank > worst[0]:
            worst = (rank, status, s, partial, name)
    _, status, s, partial, name = worst
    return DivergenceEvidence(status, partial, s, name, tuple(details))


# -- one-dimensional bounding integrals -----------------------------------

def lemma33_f(v: float, r: float, a: float, c1: float = 1.0, c2: float = 1.0) -> float:
    """f(v) = int_0^inf (c1 + d)^{-r} d^{-a} exp(-v / (2 (c2 + d))) dd.

    Behaves like min(C, v^{1 - r - a}) up to constants.
    """
    if not a < 1 or not r + a > 1:
        raise ModelError("need a < 1 and r + a > 1")
    if v < 0 or c1 <= 0 or c2 <= 0:
        raise ModelError("need v >= 0 and positive c1, c2")

    def g(d):
        return (c1 + d) ** (-r) * math.exp(-v / (2 * (c2 + d)))

    def g_log(t):
        # g(e^t) e^{t(1-a)} evaluated without forming e^t
        log_c1d = t + math.log1p(c1 * math.exp(-t)) if t > 0 else math.log(c1 + math.exp(t))
        inv = math.exp(-t) / (1 + c2 * math.exp(-t)) if t > 0 else 1 / (c2 + math.exp(t))
        return math.exp(-r * log_c1d - 0.5 * v * inv + t * (1 - a))

    opts = dict(epsabs=0.0, epsrel=1e-10, limit=500)
    # d^{-a} on (0, 1] handled by the algebraic weight
    head, _ = integrate.quad(g, 0.0, 1.0, weight="alg", wvar=(-a, 0.0), **opts)
    split = max(2.0, v)
    # log substitution on [1, split] and [split, inf)
    mid, _ = integrate.quad(g_log, 0.0, math.log(split), **opts)
    tail, _ = integrate.quad(g_log, math.log(split), np.inf, **opts)
    return head + mid + tail


def tail_integral_slope(r: float, a: float, v_grid=(1e2, 1e3, 1e4, 1e5), c1=1.0, c2=1.0) -> float:
    """Fitted log-log slope of :func:`lemma33_f` over ``v_grid``."""
    vals = [lemma33_f(v, r, a, c1, c2) for v in v_grid]
    return _fit_slope(np.log(v_grid), np.log(vals))


def ordered_region_integral(g: Callable[[np.ndarray], np.ndarray], k: int, d_nodes: np.ndarray,
                            d_logw: np.ndarray, haar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-H values of the ordered-region and unrestricted D-integrals of g(H^t D H).

    ``g`` maps a stack of matrices (N, k, k) to values (N,).  On the tensor
    grid the ordered region keeps one representative per permutation orbit
    of the nodes, weighted by 1 / prod(multiplicity!) so ties are split
    evenly between orderings.
    """
    n = d_nodes.size
    idx = np.array(list(product(range(n), repeat=k)), dtype=np.intp)
    D = d_nodes[idx]
    W = np.exp(d_logw[idx].sum(1))
    nonincreasing = np.all(D[:, :-1] >= D[:, 1:], axis=1)
    mult = np.ones(idx.shape[0])
    for row in range(idx.shape[0]):
        if nonincreasing[row]:
            _, counts = np.unique(idx[row], return_counts=True)
            mult[row] = 1.0 / np.prod([math.factorial(c) for c in counts])
    ordered_w = np.where(nonincreasing, W * mult, 0.0)
    ordered, full = [], []
    for H in haar:
        V = np.einsum("ji,nj,jl->nil", H, D, H)
        vals = g(V)
        ordered.append(float(np.sum(ordered_w * vals)))
        full.append(float(np.sum(W * vals)))
    return np.array(ordered), np.array(full)
