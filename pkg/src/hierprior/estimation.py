"""Posterior-mean estimation, quadratic loss and frequentist risk by simulation."""

from __future__ import annotations

import inspect
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .analysis import check_propriety
from .core import BetaCase, HyperpriorSpec, ModelError
from .samplers import ChainOutput, SamplerPlan, VUpdater, _matches, run_chain


class EstimatorFailure(RuntimeError):
    """An estimator raised inside a risk replicate."""

    def __init__(self, replicate: int, cause: BaseException):
        super().__init__(f"estimator failed on replicate {replicate}: {cause}")
        self.replicate = replicate


@dataclass(frozen=True)
class RiskReport:
    estimator_name: str
    theta_true: np.ndarray
    Q: np.ndarray
    risk_estimate: float
    std_error: float
    n_rep: int

    def __post_init__(self):
        if self.risk_estimate < 0:
            raise ModelError("risk estimate must be non-negative")

    def to_record(self) -> dict:
        return {
            "estimator_name": self.estimator_name,
            "theta_true": self.theta_true.tolist(),
            "Q": self.Q.tolist(),
            "risk_estimate": self.risk_estimate,
            "std_error": self.std_error,
            "n_rep": self.n_rep,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RiskReport":
        return cls(rec["estimator_name"], np.array(rec["theta_true"], dtype=float),
                   np.array(rec["Q"], dtype=float), float(rec["risk_estimate"]),
                   float(rec["std_error"]), int(rec["n_rep"]))

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RiskReport":
        return cls.from_record(json.loads(text))


def posterior_mean(output: ChainOutput, x=None, rao_blackwell: bool = False) -> np.ndarray:
    """Average of the theta draws.

    With ``rao_blackwell`` the draws are replaced by their conditional means
    x_i - (I + V)^{-1}(x_i - beta), which needs the data ``x``.
    """
    if len(output) == 0:
        raise ModelError("cannot average an empty chain")
    if not rao_blackwell:
        return output.theta.mean(axis=0)
    if x is None:
        raise ModelError("the conditional-mean average needs the data x")
    return _conditional_means(output, np.asarray(getattr(x, "x", x), dtype=float)).mean(axis=0)


def _conditional_means(output: ChainOutput, x: np.ndarray) -> np.ndarray:
    k = x.shape[1]
    B = output.V + np.eye(k)[None]
    resid = x[None] - output.beta[:, None, :]  # (n, m, k)
    # (I+V)^{-1} is symmetric, so rows times it equal solve on the transpose
    shrunk = np.linalg.solve(B, np.transpose(resid, (0, 2, 1)))
    return x[None] - np.transpose(shrunk, (0, 2, 1))


def batch_means_se(values: np.ndarray, n_batches: int = 20) -> np.ndarray:
    """Batch-means standard error of the mean along axis 0."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    n_batches = min(n_batches, n)
    if n_batches < 2:
        return np.full(values.shape[1:], np.nan)
    size = n // n_batches
    trimmed = values[: size * n_batches].reshape(n_batches, size, *values.shape[1:])
    means = trimmed.mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


def posterior_mean_se(output: ChainOutput, x=None, rao_blackwell: bool = False,
                      n_batches: int = 20) -> np.ndarray:
    vals = output.theta if not rao_blackwell else _conditional_means(
        output, np.asarray(getattr(x, "x", x), dtype=float))
    return batch_means_se(vals, n_batches)


def quadratic_loss(theta, delta, Q=None) -> float:
    """(theta - delta)^t Q (theta - delta) on the flattened mk-vectors."""
    t = np.asarray(theta, dtype=float).ravel()
    d = np.asarray(delta, dtype=float).ravel()
    if t.shape != d.shape:
        raise ModelError(f"theta and delta sizes differ: {t.size} vs {d.size}")
    r = t - d
    if Q is None:
        return float(r @ r)
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (r.size, r.size):
        raise ModelError(f"Q must be {r.size} x {r.size}, got {Q.shape}")
    return max(0.0, float(r @ Q @ r))


def _as_two_arg(estimator: Callable) -> Callable:
    try:
        n_params = len(inspect.signature(estimator).parameters)
    except (TypeError, ValueError):
        n_params = 2
    if n_params >= 2:
        return estimator
    return lambda x, rng: estimator(x)


def _child_seeds(rng, n: int) -> list[np.random.SeedSequence]:
    if isinstance(rng, np.random.Generator):
        root = np.random.SeedSequence(int(rng.integers(0, 2 ** 63)))
    else:
        root = np.random.SeedSequence(rng)
    return root.spawn(n)


def frequentist_risk_mc(theta_true, estimator: Callable, Q=None, n_rep: int = 1000, rng=None,
                        name: str = "estimator") -> RiskReport:
    """Mean quadratic loss of ``estimator`` over X ~ N(theta_true, I).

    ``estimator`` is called as estimator(x) or estimator(x, rng); replicate
    j uses its own random stream, so results do not depend on evaluation order.
    """
    if n_rep < 2:
        raise ModelError("n_rep must be >= 2")
    theta = np.asarray(theta_true, dtype=float)
    p = theta.size
    Qm = np.eye(p) if Q is None else np.asarray(Q, dtype=float)
    est = _as_two_arg(estimator)
    losses = np.empty(n_rep)
    for j, seq in enumerate(_child_seeds(rng, n_rep)):
        g = np.random.default_rng(seq)
        x = theta + g.standard_normal(theta.shape)
        try:
            delta = est(x, g)
        except Exception as exc:  # noqa: BLE001 - reported with the replicate index
            raise EstimatorFailure(j, exc) from exc
        losses[j] = quadratic_loss(theta, delta, Qm)
    return RiskReport(name, theta, Qm, float(losses.mean()),
                      float(losses.std(ddof=1) / math.sqrt(n_rep)), n_rep)


def mle_estimator(x, rng=None) -> np.ndarray:
    return np.asarray(x, dtype=float).copy()


def default_plan(spec: HyperpriorSpec, m: int, k: int, **kw) -> SamplerPlan:
    """A sampler plan suited to ``spec``: the marginal walk under the reference
    priors with the hierarchical beta prior, the conjugate or accept-reject
    Gibbs steps otherwise."""
    case = spec.bprior.case
    if _matches(spec, ("HierReferenceA", "HierReferenceB"), k):
        if case is BetaCase.HIERARCHICAL:
            upd = VUpdater.MARGINAL_HIT_RUN
        elif _matches(spec, ("HierReferenceA",), k):
            upd = VUpdater.REFERENCE_MH_A
        else:
            upd = VUpdater.REFERENCE_MH_B
    elif _matches(spec, ("HierJeffreys",), k):
        upd = VUpdater.MARGINAL_REJECTION if case is BetaCase.FLAT else VUpdater.HIER_JEFFREYS_AR
    elif _matches(spec, ("Constant",), k):
        upd = VUpdater.CONSTANT_GIBBS
    else:
        raise ModelError("no sampler is available for this V prior")
    return SamplerPlan(upd, **kw)


@dataclass
class BayesEstimator:
    """Posterior mean under ``spec`` from one chain per call."""

    spec: HyperpriorSpec
    n_iter: int = 2000
    n_burnin: int = 500
    rao_blackwell: bool = True
    plan_overrides: dict = field(default_factory=dict)

    def __call__(self, x, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m, k = x.shape
        plan = default_plan(self.spec, m, k, n_iter=self.n_iter, n_burnin=self.n_burnin,
                            seed=int(rng.integers(0, 2 ** 63)), **self.plan_overrides)
        out = run_chain(x, self.spec, plan, rng=rng)
        return posterior_mean(out, x, self.rao_blackwell)


@dataclass(frozen=True)
class BoundednessPoint:
    r: float
    max_shift: float
    shifts: tuple
    n_failed: int


def boundedness_probe(spec: HyperpriorSpec, m: int, k: int, r_grid: Sequence[float], n_dir: int,
                      rng=None, n_iter: int = 20_000, n_burnin: int = 5_000
                      ) -> list[BoundednessPoint]:
    """max ||delta(x) - x|| over ``n_dir`` directions at each radius.

    The same directions are used at every radius.  delta comes from one
    chain per point (conditional-mean average); failed chains are counted
    and left out of the maximum.
    """
    if spec.vprior.l != 0:
        raise ModelError("the boundedness probe covers l = 0 priors only")
    verdict = check_propriety(spec, m, k)
    if not verdict.proper:
        raise ModelError(f"posterior is improper: {verdict.rule}")
    if list(r_grid) != sorted(r_grid):
        raise ModelError("r_grid must be increasing")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    u = rng.standard_normal((n_dir, m * k))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    est = BayesEstimator(spec, n_iter=n_iter, n_burnin=n_burnin)
    seeds = _child_seeds(rng, len(r_grid) * n_dir)
    points = []
    for ri, r in enumerate(r_grid):
        shifts, failed = [], 0
        for j in range(n_dir):
            x = (r * u[j]).reshape(m, k)
            g = np.random.default_rng(seeds[ri * n_dir + j])
            try:
                delta = est(x, g)
            except Exception:  # noqa: BLE001 - counted, never silently dropped
                failed += 1
                continue
            shifts.append(float(np.linalg.norm(delta - x)))
        points.append(BoundednessPoint(float(r), max(shifts) if shifts else float("nan"),
                                       tuple(shifts), failed))
    return points


def clustered_theta(m: int, k: int, scale2: float, rng) -> np.ndarray:
    """theta rows drawn i.i.d. N(0, scale2 * I)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return math.sqrt(scale2) * rng.standard_normal((m, k))


__all__ = [
    "BayesEstimator", "BoundednessPoint", "EstimatorFailure", "RiskReport",
    "batch_means_se", "boundedness_probe", "clustered_theta", "default_plan",
    "frequentist_risk_mc", "mle_estimator", "posterior_mean", "posterior_mean_se",
    "quadratic_loss",
]
