"""MCMC for the exchangeable normal hierarchical model.

Conditionals used by the Gibbs scan:

* theta_i | beta, V, x  ~ N(x_i - (I+V)^{-1}(x_i - beta), V (I+V)^{-1})
* beta | theta, V (, lambda)  normal, see :func:`sample_beta_full_conditional`
* 1/lambda | beta  ~ Gamma(b + k/2 - 1, rate c + q/2), q = (beta-beta0)^t A^{-1} (beta-beta0)
* V | theta, beta  ~ pi(V) |V|^{-m/2} exp(-tr(V^{-1} W)/2), W = sum (theta_i - beta)(theta_i - beta)^t

The V step depends on the prior: exact inverse-Wishart draws for the
constant prior, accept-reject for the hierarchical Jeffreys prior and
independence Metropolis-Hastings for the hierarchical reference priors,
all with inverse-Wishart(df = m, W) proposals.  Two marginalised schemes
draw V (and lambda) from p(V[, lambda] | x) and then beta and theta.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .analysis import check_propriety
from .core import (
    BetaCase,
    BetaPriorSpec,
    ChainState,
    DegenerateSpectrumError,
    HyperpriorSpec,
    ModelData,
    ModelError,
    TIE_RTOL,
    named_v_prior,
    sample_inverse_wishart,
)
from .oracle import log_marginal_integrand

log = logging.getLogger(__name__)

DEFAULT_ATTEMPT_CAP = 10 ** 6


class StuckSamplerError(RuntimeError):
    """An accept-reject sampler exhausted its attempt budget."""


class VUpdater(str, enum.Enum):
    CONSTANT_GIBBS = "ConstantGibbs"
    HIER_JEFFREYS_AR = "HierJeffreysAR"
    REFERENCE_MH_A = "ReferenceMH_A"
    REFERENCE_MH_B = "ReferenceMH_B"
    MARGINAL_REJECTION = "MarginalRejection"
    MARGINAL_HIT_RUN = "MarginalHitRun"

    @classmethod
    def parse(cls, value) -> "VUpdater":
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.replace("_", "").lower() == key or member.name.replace("_", "").lower() == key:
                return member
        raise ModelError(f"unknown V updater {value!r}")

    @property
    def is_mh(self) -> bool:
        return self in (VUpdater.REFERENCE_MH_A, VUpdater.REFERENCE_MH_B, VUpdater.MARGINAL_HIT_RUN)

    @property
    def marginal(self) -> bool:
        return self in (VUpdater.MARGINAL_REJECTION, VUpdater.MARGINAL_HIT_RUN)


@dataclass(frozen=True)
class SamplerPlan:
    v_updater: VUpdater
    mh_inner_iters: int = 10
    n_iter: int = 10_000
    n_burnin: int = 2_000
    thin: int = 1
    seed: int = 0
    step_scale: float = 3.0
    attempt_cap: int = DEFAULT_ATTEMPT_CAP

    def __post_init__(self):
        object.__setattr__(self, "v_updater", VUpdater.parse(self.v_updater))
        if self.mh_inner_iters < 1:
            raise ModelError("mh_inner_iters must be >= 1")
        if self.thin < 1:
            raise ModelError("thin must be >= 1")
        if not 0 <= self.n_burnin < self.n_iter:
            raise ModelError("need 0 <= n_burnin < n_iter")
        if not 0 <= self.seed < 2 ** 64:
            raise ModelError("seed must be a 64-bit unsigned integer")
        if not self.step_scale > 0:
            raise ModelError("step_scale must be positive")

    @property
    def n_saved(self) -> int:
        return (self.n_iter - self.n_burnin) // self.thin


@dataclass
class ChainOutput:
    """Saved draws, stored column-wise.

    ``v_attempt_counts[t]`` is the number of rejected V proposals (MH and
    hit-and-run plans) or proposals consumed (accept-reject plans) since
    the previous saved draw; ``v_move_counts[t]`` counts accepted moves
    over the same stretch.
    """

    theta: np.ndarray
    beta: np.ndarray
    V: np.ndarray
    lam: Optional[np.ndarray]
    v_attempt_counts: np.ndarray
    v_move_counts: np.ndarray
    acceptance_rate: float
    v_updater: VUpdater

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def draws(self) -> list[ChainState]:
        return list(self.iter_states())

    def iter_states(self) -> Iterator[ChainState]:
        for t in range(len(self)):
            lam = None if self.lam is None else float(self.lam[t])
            yield ChainState(self.theta[t], self.beta[t], self.V[t], lam)


# -- conjugate steps -----------------------------------------------------

def _sym_eig(V: np.ndarray):
    d, Q = np.linalg.eigh(V)
    if d[0] <= 0:
        raise ModelError("V is not positive definite")
    return d, Q


def theta_conditional_moments(state: ChainState, x: np.ndarray):
    """Mean (m x k) and common covariance of theta_i | beta, V, x."""
    d, Q = _sym_eig(state.V)
    shrink = Q @ np.diag(1.0 / (1.0 + d)) @ Q.T  # (I+V)^{-1}
    mean = x - (x - state.beta) @ shrink
    cov = Q @ np.diag(d / (1.0 + d)) @ Q.T
    return mean, cov


def sample_theta_full_conditional(state: ChainState, data, rng: np.random.Generator) -> np.ndarray:
    """Draw each row theta_i from N(Sigma*(x_i + V^{-1} beta), Sigma*), Sigma* = V (I+V)^{-1}."""
    x = np.asarray(getattr(data, "x", data), dtype=float)
    d, Q = _sym_eig(state.V)
    inv1p = 1.0 / (1.0 + d)
    # written via (I+V)^{-1} so that huge V does not need V^{-1}
    mean = x - ((x - state.beta) @ Q) * inv1p @ Q.T
    z = rng.standard_normal(x.shape)
    return mean + (z * np.sqrt(d * inv1p)) @ Q.T


def beta_conditional_moments(state: ChainState, m: int, spec: BetaPriorSpec):
    """Mean and covariance of beta | theta, V (, lambda)."""
    tbar = state.theta.mean(axis=0)
    if spec.case is BetaCase.FLAT:
        return tbar, state.V / m
    s = 1.0 if spec.case is BetaCase.NORMAL else float(state.lam)
    d, Q = _sym_eig(state.V)
    Vinv = Q @ np.diag(1.0 / d) @ Q.T
    Ainv = np.linalg.inv(spec.A) / s
    prec = m * Vinv + Ainv
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (m * Vinv @ tbar + Ainv @ spec.beta0)
    return mean, cov


def sample_beta_full_conditional(state: ChainState, data, spec, rng: np.random.Generator) -> np.ndarray:
    """Case 1: N(theta_bar, V/m).  Cases 2, 3: precision m V^{-1} + (s A)^{-1}."""
    bp = spec.bprior if isinstance(spec, HyperpriorSpec) else spec
    m = np.asarray(getattr(data, "x", data)).shape[0]
    if bp.case is BetaCase.HIERARCHICAL and (state.lam is None or not state.lam > 0):
        raise ModelError("Case 3 beta update needs the current lambda")
    mean, cov = beta_conditional_moments(state, m, bp)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError("beta conditional precision is singular") from exc
    return mean + L @ rng.standard_normal(mean.size)


def lambda_conditional_params(beta: np.ndarray, spec: BetaPriorSpec):
    """(shape, rate) of the Gamma law of 1/lambda given beta."""
    if spec.case is not BetaCase.HIERARCHICAL:
        raise ModelError("lambda only exists under the hierarchical beta prior")
    k = spec.A.shape[0]
    shape = float(spec.b) + k / 2 - 1
    if shape <= 0:
        raise ModelError(f"b + k/2 - 1 must be positive (b > 1 - k/2), got {shape}")
    r = np.asarray(beta, dtype=float) - spec.beta0
    rate = float(spec.c) + 0.5 * float(r @ np.linalg.solve(spec.A, r))
    return shape, rate


def sample_lambda_full_conditional(beta, spec, rng: np.random.Generator) -> float:
    bp = spec.bprior if isinstance(spec, HyperpriorSpec) else spec
    shape, rate = lambda_conditional_params(beta, bp)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


# -- V updates given theta, beta ---------------------------------------

def scatter_about(theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
    R = theta - beta
    return R.T @ R


def sample_v_constant_gibbs(state: ChainState, rng: np.random.Generator) -> np.ndarray:
    """Exact draw from |V|^{-m/2} exp(-tr(V^{-1} W)/2): inverse Wishart with df = m - k - 1."""
    m, k = state.theta.shape
    df = m - k - 1
    if df <= k - 1:
        raise ModelError(
            f"constant-prior V update needs m > 2k (m={m}, k={k}); a proper posterior "
            "needs m >= 2k + 2 with a flat beta prior and m >= 2k + 1 otherwise")
    return sample_inverse_wishart(df, scatter_about(state.theta, state.beta), rng)


def hier_jeffreys_acceptance(V: np.ndarray) -> float:
    """P = (|V| / |I + V|)^{(k+1)/2}."""
    V = np.atleast_2d(V)
    k = V.shape[0]
    d = np.linalg.eigvalsh(V)
    if not d[0] > 0:
        return 0.0  # numerically singular proposal
    return float(np.exp((k + 1) / 2 * np.sum(np.log(d) - np.log1p(d))))


def _check_proposal_df(m: int, k: int):
    if m <= k - 1:
        raise ModelError(f"inverse-Wishart(m, W) proposals need m > k - 1 (m={m}, k={k})")


def sample_v_hier_jeffreys_ar_from_scatter(W: np.ndarray, m: int, rng: np.random.Generator,
                                           cap: int = DEFAULT_ATTEMPT_CAP):
    """Accept-reject draw from |I+V|^{-(k+1)/2} |V|^{-m/2} exp(-tr(V^{-1} W)/2)."""
    W = np.atleast_2d(W)
    k = W.shape[0]
    _check_proposal_df(m, k)
    for attempt in range(1, cap + 1):
        V = sample_inverse_wishart(m, W, rng)
        if rng.random() < hier_jeffreys_acceptance(V):
            return V, attempt
    raise StuckSamplerError(f"no acceptance in {cap} proposals; acceptance is high only "
                            "when V or m is large")


def sample_v_hier_jeffreys_ar(state: ChainState, rng: np.random.Generator,
                              cap: int = DEFAULT_ATTEMPT_CAP):
    m = state.theta.shape[0]
    return sample_v_hier_jeffreys_ar_from_scatter(scatter_about(state.theta, state.beta), m, rng, cap)


def _log_gaps(d: np.ndarray) -> float:
    """sum_{i<j} log |d_i - d_j|; raises on a tie."""
    k = d.size
    iu = np.triu_indices(k, 1)
    gaps = np.abs(d[iu[0]] - d[iu[1]])
    if np.any(gaps <= TIE_RTOL * np.max(np.abs(d))):
        raise DegenerateSpectrumError("tied eigenvalues")
    return float(np.sum(np.log(gaps)))


def reference_log_weight(V: np.ndarray, variant: str) -> float:
    """log of target / proposal for the reference-prior MH step.

    With proposal density proportional to |V|^{-(m+k+1)/2} exp(-tr(V^{-1}W)/2)
    the ratio is pi(V) |V|^{(k+1)/2}:
    (a) |V|^{(k+1)/2} / (|I+V| prod(d_i - d_j)),
    (b) |V|^{(k - 1 + 1/k)/2} / prod(d_i - d_j).
    """
    d = np.linalg.eigvalsh(V)
    k = d.size
    logdet = float(np.sum(np.log(d)))
    gaps = _log_gaps(d)
    if variant == "A":
        return (k + 1) / 2 * logdet - float(np.sum(np.log1p(d))) - gaps
    if variant == "B":
        return (k - 1 + 1 / k) / 2 * logdet - gaps
    raise ModelError(f"unknown reference variant {variant!r}")


def reference_acceptance(V_current: np.ndarray, V_proposed: np.ndarray, variant: str) -> float:
    """min(1, w(V*) / w(V)) for the independence sampler."""
    diff = reference_log_weight(V_proposed, variant) - reference_log_weight(V_current, variant)
    return 1.0 if diff >= 0 else math.exp(diff)


def sample_v_reference_mh(state: ChainState, variant: str, inner_iters: int,
                          rng: np.random.Generator):
    """Run ``inner_iters`` independence-MH steps; return the last V and the rejection count."""
    variant = variant.upper()[-1]
    m, k = state.theta.shape
    _check_proposal_df(m, k)
    W = scatter_about(state.theta, state.beta)
    V = state.V
    try:
        w_cur = reference_log_weight(V, variant)
    except DegenerateSpectrumError:
        w_cur = -np.inf
    nonmoves = 0
    for _ in range(inner_iters):
        prop = sample_inverse_wishart(m, W, rng)
        try:
            w_new = reference_log_weight(prop, variant)
        except DegenerateSpectrumError:
            log.warning("reference MH proposal with tied eigenvalues rejected")
            nonmoves += 1
            continue
        if w_new >= w_cur or rng.random() < math.exp(w_new - w_cur):
            V, w_cur = prop, w_new
        else:
            nonmoves += 1
    return V, nonmoves


# -- marginalised schemes ------------------------------------------------

def sample_v_marginal_rejection_from_scatter(S: np.ndarray, m: int, rng: np.random.Generator,
                                             cap: int = DEFAULT_ATTEMPT_CAP):
    """Draw V from |I+V|^{-(m+k)/2} exp(-tr((I+V)^{-1} S)/2) on V > 0.

    B = I + V is proposed from inverse Wishart(df = m - 1, S), which has
    exactly that density in B; the draw is kept when B - I is positive
    definite.
    """
    S = np.atleast_2d(S)
    k = S.shape[0]
    df = m - 1
    if df <= k - 1:
        raise ModelError(f"marginal rejection needs m > k (m={m}, k={k})")
    if np.linalg.eigvalsh(S)[0] <= 0:
        raise ModelError("scatter matrix is singular; marginal rejection needs data in general position")
    eye = np.eye(k)
    for attempt in range(1, cap + 1):
        B = sample_inverse_wishart(df, S, rng)
        V = B - eye
        if np.linalg.eigvalsh(V)[0] > 0:
            return V, attempt
    raise StuckSamplerError(
        f"no acceptance in {cap} proposals; the sampler has reasonable acceptance probability "
        "only if V is large or m is large")


def sample_v_marginal_rejection(data, rng: np.random.Generator, cap: int = DEFAULT_ATTEMPT_CAP):
    x = np.asarray(getattr(data, "x", data), dtype=float)
    R = x - x.mean(axis=0)
    return sample_v_marginal_rejection_from_scatter(R.T @ R, x.shape[0], rng, cap)


def beta_given_v_moments(V: np.ndarray, lam, x: np.ndarray, spec: BetaPriorSpec):
    """Mean and covariance of beta | V (, lambda), x with theta integrated out."""
    m, k = x.shape
    xbar = x.mean(axis=0)
    if spec.case is BetaCase.FLAT:
        return xbar, (np.eye(k) + V) / m
    s = 1.0 if spec.case is BetaCase.NORMAL else float(lam)
    Binv = np.linalg.inv(np.eye(k) + V)
    Ainv = np.linalg.inv(spec.A) / s
    cov = np.linalg.inv(m * Binv + Ainv)
    cov = 0.5 * (cov + cov.T)
    return cov @ (m * Binv @ xbar + Ainv @ spec.beta0), cov


def _sym_from_coords(v: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`_coords_from_sym` (last coordinate excluded)."""
    S = np.zeros((k, k))
    S[np.diag_indices(k)] = v[:k]
    iu = np.triu_indices(k, 1)
    S[iu] = v[k:] / math.sqrt(2)
    S[(iu[1], iu[0])] = S[iu]
    return S


def _coords_from_sym(S: np.ndarray) -> np.ndarray:
    """Diagonal, then sqrt(2) times the upper triangle: an isometry for the Frobenius norm."""
    k = S.shape[0]
    iu = np.triu_indices(k, 1)
    return np.concatenate([np.diag(S), math.sqrt(2) * S[iu]])


def log_expm_jacobian(s: np.ndarray) -> float:
    """log Jacobian of S -> exp(S) on symmetric matrices, from the eigenvalues s of S.

    J = prod exp(s_i) * prod_{i<j} (exp(s_i) - exp(s_j)) / (s_i - s_j).
    """
    s = np.sort(np.asarray(s, dtype=float))[::-1]
    out = float(np.sum(s))
    iu = np.triu_indices(s.size, 1)
    hi, lo = s[iu[0]], s[iu[1]]
    delta = hi - lo
    small = delta < 1e-8
    # log((e^hi - e^lo)/delta) = lo + log(expm1(delta)/delta)
    safe = np.where(small, 1.0, delta)
    term = np.where(small, delta / 2, safe + np.log(-np.expm1(-safe)) - np.log(safe))
    return out + float(np.sum(lo + term))


def _hitrun_log_target(vec: np.ndarray, k: int, x: np.ndarray, spec: HyperpriorSpec):
    S = _sym_from_coords(vec[:-1], k)
    s, Q = np.linalg.eigh(S)
    V = (Q * np.exp(s)) @ Q.T
    V = 0.5 * (V + V.T)
    lam = math.exp(vec[-1])
    try:
        val = log_marginal_integrand(V, lam, x, spec)
    except DegenerateSpectrumError:
        return -np.inf, V, lam
    val += log_expm_jacobian(s) + vec[-1]
    if not np.isfinite(val):
        return -np.inf, V, lam
    return val, V, lam


def _hitrun_start(x: np.ndarray) -> tuple[np.ndarray, float]:
    m, k = x.shape
    R = x - x.mean(axis=0)
    level = max(1.0, float(np.trace(R.T @ R)) / (m * k))
    # slightly spread eigenvalues so the start has no tie
    V0 = np.diag(level * (1.0 + 0.1 * np.arange(k)))
    return V0, 1.0


class _HitRun:
    """Random-direction Metropolis walk on (log-matrix of V, log lambda)."""

    def __init__(self, x, spec, step_scale, rng, V0=None, lam0=None):
        self.x, self.spec, self.step, self.rng = x, spec, step_scale, rng
        self.k = x.shape[1]
        if V0 is None:
            V0, lam0 = _hitrun_start(x)
        d, Q = np.linalg.eigh(V0)
        S0 = (Q * np.log(d)) @ Q.T
        self.vec = np.concatenate([_coords_from_sym(S0), [math.log(lam0)]])
        self.logp, self.V, self.lam = _hitrun_log_target(self.vec, self.k, x, spec)
        if not np.isfinite(self.logp):
            raise ModelError("hit-and-run start point has zero target density")
        self.accepted = 0
        self.steps = 0

    def step_once(self) -> bool:
        u = self.rng.standard_normal(self.vec.size)
        u /= np.linalg.norm(u)
        prop = self.vec + self.step * self.rng.standard_normal() * u
        logp, V, lam = _hitrun_log_target(prop, self.k, self.x, self.spec)
        self.steps += 1
        if np.isfinite(logp) and math.log(self.rng.random()) < logp - self.logp:
            self.vec, self.logp, self.V, self.lam = prop, logp, V, lam
            self.accepted += 1
            return True
        return False


def _check_hitrun_inputs(x, spec):
    if spec.bprior.case is not BetaCase.HIERARCHICAL:
        raise ModelError("the hit-and-run sampler targets the hierarchical beta prior (Case 3)")
    k = x.shape[1]
    if not _matches(spec, ("HierReferenceA", "HierReferenceB"), k):
        raise ModelError("the hit-and-run sampler is set up for the hierarchical reference priors")
    if x.shape[0] < 2:
        raise ModelError("the hit-and-run sampler needs m >= 2")


def sample_v_lambda_marginal_hitrun(data, spec: HyperpriorSpec, step_scale: float, n_steps: int,
                                    rng: np.random.Generator, V0=None, lam0=None):
    """Visited (V, lambda) states of ``n_steps`` random-direction Metropolis steps.

    The walk moves in (diag S, sqrt(2) offdiag S, log lambda) with V = exp(S);
    the target is the marginal integrand times the exp-map Jacobian and lambda.
    Returns the list of states and the acceptance rate.
    """
    x = np.asarray(getattr(data, "x", data), dtype=float)
    _check_hitrun_inputs(x, spec)
    walker = _HitRun(x, spec, step_scale, rng, V0, lam0)
    out = []
    for _ in range(n_steps):
        walker.step_once()
        out.append((walker.V.copy(), walker.lam))
    return out, walker.accepted / max(1, walker.steps)


# -- chain orchestration ------------------------------------------------

def _matches(spec: HyperpriorSpec, names, k: int) -> bool:
    v = spec.vprior
    for name in names:
        ref = named_v_prior(name, k)
        if all(abs(float(a) - float(b)) < 1e-12
               for a, b in ((v.a1, ref.a1), (v.a2, ref.a2), (v.l, ref.l))):
            return True
    return False


_PLAN_PRIORS = {
    VUpdater.CONSTANT_GIBBS: ("Constant",),
    VUpdater.HIER_JEFFREYS_AR: ("HierJeffreys",),
    VUpdater.REFERENCE_MH_A: ("HierReferenceA",),
    VUpdater.REFERENCE_MH_B: ("HierReferenceB",),
    VUpdater.MARGINAL_REJECTION: ("HierJeffreys",),
    VUpdater.MARGINAL_HIT_RUN: ("HierReferenceA", "HierReferenceB"),
}


def check_plan_compatible(plan: SamplerPlan, spec: HyperpriorSpec, m: int, k: int) -> None:
    upd = plan.v_updater
    if not _matches(spec, _PLAN_PRIORS[upd], k):
        raise ModelError(f"plan {upd.value} requires a {' or '.join(_PLAN_PRIORS[upd])} V prior")
    case = spec.bprior.case
    if upd is VUpdater.MARGINAL_REJECTION and case is not BetaCase.FLAT:
        raise ModelError("plan MarginalRejection requires the flat beta prior (Case 1)")
    if upd is VUpdater.MARGINAL_HIT_RUN and case is not BetaCase.HIERARCHICAL:
        raise ModelError("plan MarginalHitRun requires the hierarchical beta prior (Case 3)")
    if upd in (VUpdater.HIER_JEFFREYS_AR, VUpdater.REFERENCE_MH_A, VUpdater.REFERENCE_MH_B):
        _check_proposal_df(m, k)
    if upd is VUpdater.CONSTANT_GIBBS and m - k - 1 <= k - 1:
        raise ModelError(f"plan ConstantGibbs needs m > 2k (m={m}, k={k})")
    if upd is VUpdater.MARGINAL_REJECTION and m <= k:
        raise ModelError(f"plan MarginalRejection needs m > k (m={m}, k={k})")


def initial_state(x: np.ndarray, spec: HyperpriorSpec) -> ChainState:
    m, k = x.shape
    xbar = x.mean(axis=0)
    R = x - xbar
    V0 = R.T @ R / m + np.eye(k)
    lam = 1.0 if spec.bprior.case is BetaCase.HIERARCHICAL else None
    return ChainState(x.copy(), xbar.copy(), V0, lam)


def run_chain(data, spec: HyperpriorSpec, plan: SamplerPlan,
              rng: np.random.Generator | None = None, check: bool = True) -> ChainOutput:
    """Systematic-scan sampler; see the module docstring for the conditionals."""
    x = np.asarray(getattr(data, "x", data), dtype=float)
    if not isinstance(data, ModelData):
        ModelData(x)
    m, k = x.shape
    spec.check_dimension(k)
    if check:
        verdict = check_propriety(spec, m, k)
        if not verdict.proper:
            raise ModelError(f"posterior is improper: {verdict.rule}")
    check_plan_compatible(plan, spec, m, k)
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    bp = spec.bprior
    upd = plan.v_updater
    has_lam = bp.case is BetaCase.HIERARCHICAL
    n = plan.n_saved

    thetas = np.empty((n, m, k))
    betas = np.empty((n, k))
    Vs = np.empty((n, k, k))
    lams = np.empty(n) if has_lam else None
    attempts = np.zeros(n, dtype=np.int64)
    moves = np.zeros(n, dtype=np.int64)

    state = initial_state(x, spec)
    S = (x - x.mean(0)).T @ (x - x.mean(0))
    walker = _HitRun(x, spec, plan.step_scale, rng) if upd is VUpdater.MARGINAL_HIT_RUN else None
    pending_attempts = pending_moves = 0
    total_tries = total_moves = 0
    saved = 0

    for it in range(plan.n_iter):
        if upd.marginal:
            if upd is VUpdater.MARGINAL_REJECTION:
                V, tries = sample_v_marginal_rejection_from_scatter(S, m, rng, plan.attempt_cap)
                a, mv, tr = tries, 1, tries
            else:
                moved = walker.step_once()
                V, state.lam = walker.V, walker.lam
                a, mv, tr = int(not moved), int(moved), 1
            state.V = V
            mean, cov = beta_given_v_moments(V, state.lam, x, bp)
            state.beta = mean + np.linalg.cholesky(cov) @ rng.standard_normal(k)
            state.theta = sample_theta_full_conditional(state, x, rng)
        else:
            state.theta = sample_theta_full_conditional(state, x, rng)
            state.beta = sample_beta_full_conditional(state, x, bp, rng)
            if has_lam:
                state.lam = sample_lambda_full_conditional(state.beta, bp, rng)
            if upd is VUpdater.CONSTANT_GIBBS:
                state.V = sample_v_constant_gibbs(state, rng)
                a, mv, tr = 0, 1, 1
            elif upd is VUpdater.HIER_JEFFREYS_AR:
                state.V, tries = sample_v_hier_jeffreys_ar(state, rng, plan.attempt_cap)
                a, mv, tr = tries, 1, tries
            else:
                variant = "A" if upd is VUpdater.REFERENCE_MH_A else "B"
                state.V, rej = sample_v_reference_mh(state, variant, plan.mh_inner_iters, rng)
                a, mv, tr = rej, plan.mh_inner_iters - rej, plan.mh_inner_iters

        if it < plan.n_burnin:
            continue
        total_tries += tr
        total_moves += mv
        pending_attempts += a
        pending_moves += mv
        if (it - plan.n_burnin + 1) % plan.thin == 0 and saved < n:
            thetas[saved] = state.theta
            betas[saved] = state.beta
            Vs[saved] = state.V
            if has_lam:
                lams[saved] = state.lam
            attempts[saved] = pending_attempts
            moves[saved] = pending_moves
            pending_attempts = pending_moves = 0
            saved += 1

    rate = total_moves / total_tries if total_tries else float("nan")
    return ChainOutput(thetas, betas, Vs, lams, attempts, moves, rate, upd)


def nonmove_statistics(output: ChainOutput) -> float:
    """Average number of rejected proposals per accepted move."""
    if not output.v_updater.is_mh:
        raise ModelError(f"nonmove statistics need a Metropolis plan, got {output.v_updater.value}")
    total_moves = int(np.sum(output.v_move_counts))
    total_rej = int(np.sum(output.v_attempt_counts))
    if total_moves == 0:
        return float("inf")
    return total_rej / total_moves


# -- persistence ------------------------------------------------------------

def chain_columns(m: int, k: int) -> list[str]:
    cols = [f"theta_{i + 1}_{j + 1}" for i in range(m) for j in range(k)]
    cols += [f"beta_{j + 1}" for j in range(k)]
    cols += [f"v_{i + 1}_{j + 1}" for i in range(k) for j in range(k)]
    return cols + ["lambda", "attempts", "moves"]


def write_chain_csv(output: ChainOutput, path) -> None:
    n, m, k = output.theta.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# v_updater={output.v_updater.value} acceptance_rate={output.acceptance_rate!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(chain_columns(m, k))
        for t in range(n):
            row = [repr(float(v)) for v in output.theta[t].ravel()]
            row += [repr(float(v)) for v in output.beta[t]]
            row += [repr(float(v)) for v in output.V[t].ravel()]
            row.append("" if output.lam is None else repr(float(output.lam[t])))
            row += [str(int(output.v_attempt_counts[t])), str(int(output.v_move_counts[t]))]
            w.writerow(row)


def read_chain_csv(path) -> ChainOutput:
    with open(path, newline="") as fh:
        meta_line = fh.readline().lstrip("#").split()
        meta = dict(item.split("=", 1) for item in meta_line)
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    k = sum(1 for h in header if h.startswith("beta_"))
    m = sum(1 for h in header if h.startswith("theta_")) // k
    n = len(rows)
    nt, nb, nv = m * k, k, k * k
    theta = np.empty((n, m, k))
    beta = np.empty((n, k))
    V = np.empty((n, k, k))
    lam_vals = []
    att = np.empty(n, dtype=np.int64)
    mov = np.empty(n, dtype=np.int64)
    for t, row in enumerate(rows):
        vals = row
        theta[t] = np.array([float(v) for v in vals[:nt]]).reshape(m, k)
        beta[t] = [float(v) for v in vals[nt:nt + nb]]
        V[t] = np.array([float(v) for v in vals[nt + nb:nt + nb + nv]]).reshape(k, k)
        lam_vals.append(vals[nt + nb + nv])
        att[t] = int(vals[nt + nb + nv + 1])
        mov[t] = int(vals[nt + nb + nv + 2])
    lam = None if all(v == "" for v in lam_vals) else np.array([float(v) for v in lam_vals])
    return ChainOutput(theta, beta, V, lam, att, mov, float(meta["acceptance_rate"]),
                       VUpdater.parse(meta["v_updater"]))


__all__ = [
    "ChainOutput", "SamplerPlan", "StuckSamplerError", "VUpdater",
    "beta_conditional_moments", "beta_given_v_moments", "check_plan_compatible",
    "hier_jeffreys_acceptance", "initial_state", "lambda_conditional_params",
    "log_expm_jacobian", "nonmove_statistics", "read_chain_csv", "reference_acceptance",
    "reference_log_weight", "run_chain", "sample_beta_full_conditional",
    "sample_lambda_full_conditional", "sample_theta_full_conditional",
    "sample_v_constant_gibbs", "sample_v_hier_jeffreys_ar",
    "sample_v_hier_jeffreys_ar_from_scatter", "sample_v_lambda_marginal_hitrun",
    "sample_v_marginal_rejection", "sample_v_marginal_rejection_from_scatter",
    "sample_v_reference_mh", "theta_conditional_moments", "write_chain_csv",
]
