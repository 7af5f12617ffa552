"""Domain types, prior densities and random-matrix primitives.

The hierarchical model is

    X_i ~ N_k(theta_i, I),  theta_i ~ N_k(beta, V),  i = 1..m

with a hyperprior pi(beta) pi(V).  The V-priors considered are bounded
above and below by

    |I + V|^{-(a2 - a1)} |V|^{-a1} [prod_{i<j} (d_i - d_j)]^{-(1 - l)}

where d_1 > ... > d_k are the eigenvalues of V.  Every density here is
unnormalized; callers only ever use differences of log-densities.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np

Number = Union[int, float, Fraction]

#: eigenvalues closer than this fraction of the largest are treated as tied
TIE_RTOL = 1e-12


class ModelError(ValueError):
    """Rejected input: a value violates a documented precondition."""


class DegenerateSpectrumError(ModelError):
    """Coincident eigenvalues where distinct ones are required."""


class VPriorName(str, enum.Enum):
    CONSTANT = "Constant"
    NONHIER_JEFFREYS = "NonhierJeffreys"
    HIER_JEFFREYS = "HierJeffreys"
    NONHIER_REFERENCE = "NonhierReference"
    HIER_REFERENCE_A = "HierReferenceA"
    HIER_REFERENCE_B = "HierReferenceB"
    CUSTOM = "Custom"


class BetaCase(str, enum.Enum):
    FLAT = "Case1Flat"
    NORMAL = "Case2Normal"
    HIERARCHICAL = "Case3Hierarchical"

    @property
    def number(self) -> int:
        return {"Case1Flat": 1, "Case2Normal": 2, "Case3Hierarchical": 3}[self.value]

    @classmethod
    def from_any(cls, value) -> "BetaCase":
        if isinstance(value, cls):
            return value
        if isinstance(value, str) and value.strip().lower().startswith("case"):
            value = value.strip()[4:] if value.strip()[4:].isdigit() else value
        if isinstance(value, int) or (isinstance(value, str) and value.strip().isdigit()):
            if not 1 <= int(value) <= 3:
                raise ModelError(f"unknown beta-prior case {value!r}")
            return [cls.FLAT, cls.NORMAL, cls.HIERARCHICAL][int(value) - 1]
        for member in cls:
            if str(value).lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ModelError(f"unknown beta-prior case {value!r}")


def _parse_name(name) -> VPriorName:
    if isinstance(name, VPriorName):
        return name
    for member in VPriorName:
        if str(name).lower() in (member.value.lower(), member.name.lower()):
            return member
    raise ModelError(f"unknown V-prior name {name!r}")


@dataclass(frozen=True)
class ModelData:
    """The m x k observation matrix; row i is the block X_i."""

    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim != 2:
            raise ModelError(f"data must be a 2-d matrix, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ModelError("data must have at least one row")
        if x.shape[1] < 2:
            raise ModelError(f"k must be >= 2, got k={x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ModelError("data contains non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class VPriorParams:
    """Exponents (a1, a2, l) of a V-prior in the eigenvalue-product family.

    Named priors keep their exponents as exact ``Fraction`` values so the
    propriety and admissibility rules can be decided without rounding.
    """

    a1: Number
    a2: Number
    l: Number
    name: VPriorName = VPriorName.CUSTOM

    def __post_init__(self):
        if not 0 <= self.l <= 1:
            raise ModelError(f"l must lie in [0, 1], got {self.l}")
        object.__setattr__(self, "name", _parse_name(self.name))

    @property
    def exact(self) -> bool:
        return all(isinstance(v, (int, Fraction)) for v in (self.a1, self.a2, self.l))


@dataclass(frozen=True)
class BetaPriorSpec:
    """Prior on the hyper-mean beta (flat, normal, or normal scale mixture).

    For Case 3 the mixing density on lambda is lambda^(-b) exp(-c/lambda).
    """

    case: BetaCase = BetaCase.FLAT
    beta0: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    b: Number = Fraction(1, 2)
    c: Number = Fraction(1, 2)

    def __post_init__(self):
        case = BetaCase.from_any(self.case)
        object.__setattr__(self, "case", case)
        if case is BetaCase.FLAT:
            return
        if self.A is None:
            raise ModelError("Cases 2 and 3 need the matrix A")
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError(f"A must be square, got shape {A.shape}")
        if not np.allclose(A, A.T, atol=1e-10):
            raise ModelError("A must be symmetric")
        if np.linalg.eigvalsh(A)[0] <= 0:
            raise ModelError("A must be positive definite")
        beta0 = np.zeros(A.shape[0]) if self.beta0 is None else np.array(self.beta0, dtype=float)
        if beta0.shape != (A.shape[0],):
            raise ModelError("beta0 and A dimensions disagree")
        A.setflags(write=False)
        beta0.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "beta0", beta0)
        if case is BetaCase.HIERARCHICAL:
            if self.b < 0:
                raise ModelError(f"b must be >= 0, got {self.b}")
            if self.c <= 0:
                raise ModelError(f"c must be > 0, got {self.c}")

    @property
    def k(self) -> Optional[int]:
        return None if self.A is None else self.A.shape[0]

    def A_scalar(self) -> Optional[float]:
        """Return alpha if A == alpha * I, else None."""
        if self.A is None:
            return None
        alpha = self.A[0, 0]
        if np.allclose(self.A, alpha * np.eye(self.A.shape[0]), rtol=0, atol=1e-14 * abs(alpha)):
            return float(alpha)
        return None


@dataclass(frozen=True)
class HyperpriorSpec:
    vprior: VPriorParams
    bprior: BetaPriorSpec = field(default_factory=BetaPriorSpec)

    def check_dimension(self, k: int) -> None:
        if self.bprior.k is not None and self.bprior.k != k:
            raise ModelError(f"beta prior has dimension {self.bprior.k}, data has k={k}")


@dataclass(frozen=True)
class Eigendecomp:
    """V = H^t diag(d) H with the rows of H the eigenvectors."""

    H: np.ndarray
    d: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.H.T @ (self.d[:, None] * self.H)


@dataclass
class ChainState:
    theta: np.ndarray
    beta: np.ndarray
    V: np.ndarray
    lam: Optional[float] = None

    def copy(self) -> "ChainState":
        return ChainState(self.theta.copy(), self.beta.copy(), self.V.copy(), self.lam)


def named_v_prior(name, k: int) -> VPriorParams:
    """Exponents (a1, a2, l) of a named noninformative V-prior.

    >>> named_v_prior("HierJeffreys", 4)
    VPriorParams(a1=0, a2=Fraction(5, 2), l=1, name=<VPriorName.HIER_JEFFREYS: 'HierJeffreys'>)
    """
    if k < 2:
        raise ModelError(f"k must be >= 2, got {k}")
    name = _parse_name(name)
    half = Fraction(k + 1, 2)
    ref_b = Fraction(2 * k - 1, 2 * k)
    table = {
        VPriorName.CONSTANT: (0, 0, 1),
        VPriorName.NONHIER_JEFFREYS: (half, half, 1),
        VPriorName.HIER_JEFFREYS: (0, half, 1),
        VPriorName.NONHIER_REFERENCE: (1, 1, 0),
        VPriorName.HIER_REFERENCE_A: (0, 1, 0),
        VPriorName.HIER_REFERENCE_B: (ref_b, ref_b, 0),
    }
    if name not in table:
        raise ModelError("a Custom prior has no table values; build VPriorParams directly")
    a1, a2, l = table[name]
    return VPriorParams(a1, a2, l, name)


def _check_symmetric(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ModelError(f"expected a square matrix, got shape {V.shape}")
    scale = max(1.0, float(np.max(np.abs(V))))
    if np.max(np.abs(V - V.T)) > 1e-10 * scale:
        raise ModelError("matrix is not symmetric")
    return 0.5 * (V + V.T)


def has_ties(d: np.ndarray) -> bool:
    """True when two entries of the descending vector ``d`` are within tolerance."""
    if d.size < 2:
        return False
    return bool(np.min(d[:-1] - d[1:]) <= TIE_RTOL * abs(d[0]))


def eigendecompose(V) -> Eigendecomp:
    """Descending eigendecomposition V = H^t D H.

    Each eigenvector (row of H) has its first nonzero entry positive.
    Raises DegenerateSpectrumError when two eigenvalues coincide.
    """
    V = _check_symmetric(V)
    d, Q = np.linalg.eigh(V)
    if d[0] <= 0:
        raise ModelError("matrix is not positive definite")
    d = d[::-1].copy()
    H = Q[:, ::-1].T.copy()
    if has_ties(d):
        raise DegenerateSpectrumError(f"eigenvalues {d} are not distinct")
    for row in H:
        nz = np.flatnonzero(np.abs(row) > 1e-14)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return Eigendecomp(H, d)


def log_vandermonde(d: np.ndarray) -> float:
    """sum_{i<j} log(d_i - d_j) for descending ``d``."""
    d = np.asarray(d, dtype=float)
    iu = np.triu_indices(d.size, 1)
    return float(np.sum(np.log(d[iu[0]] - d[iu[1]])))


def log_hd_prior_density(d, params: VPriorParams) -> float:
    """Log density of the V-prior in eigen-coordinates (H, D).

    l * sum log(d_i - d_j) - (a2 - a1) sum log(1 + d_i) - a1 sum log d_i.
    ``d`` must be sorted in descending order.
    """
    d = np.asarray(d, dtype=float)
    a1, a2, l = float(params.a1), float(params.a2), float(params.l)
    out = -(a2 - a1) * np.sum(np.log1p(d)) - a1 * np.sum(np.log(d))
    if l != 0:
        out += l * log_vandermonde(d)
    return float(out)


def log_v_prior_density(V, params: VPriorParams) -> float:
    """Unnormalized log pi(V) with both family constants set to one."""
    V = _check_symmetric(V)
    d = np.linalg.eigvalsh(V)[::-1]
    if d[-1] <= 0:
        raise ModelError("V is not positive definite")
    a1, a2, l = float(params.a1), float(params.a2), float(params.l)
    out = -(a2 - a1) * np.sum(np.log1p(d)) - a1 * np.sum(np.log(d))
    if l < 1:
        if has_ties(d):
            raise DegenerateSpectrumError("prior density is unbounded at coincident eigenvalues")
        out -= (1 - l) * log_vandermonde(d)
    return float(out)


def log_beta_prior_density(beta, spec: BetaPriorSpec, lam: Optional[float] = None) -> float:
    """Unnormalized log pi(beta).

    Case 3 without ``lam`` returns the lambda-marginal, a multivariate t:
    -(k/2 + b - 1) log(1 + q / (2c)) with q = (beta - beta0)^t A^-1 (beta - beta0).
    """
    beta = np.asarray(beta, dtype=float)
    if spec.case is BetaCase.FLAT:
        return 0.0
    if beta.shape != spec.beta0.shape:
        raise ModelError("beta has the wrong dimension")
    k = beta.size
    r = beta - spec.beta0
    try:
        L = np.linalg.cholesky(spec.A)
    except np.linalg.LinAlgError as exc:
        raise ModelError("A is singular") from exc
    z = np.linalg.solve(L, r)
    q = float(z @ z)
    logdetA = 2.0 * float(np.sum(np.log(np.diag(L))))
    if spec.case is BetaCase.NORMAL:
        return -0.5 * q - 0.5 * logdetA - 0.5 * k * math.log(2 * math.pi)
    if lam is None:
        b, c = float(spec.b), float(spec.c)
        return -(k / 2 + b - 1) * math.log1p(q / (2 * c))
    if lam <= 0:
        raise ModelError("lambda must be positive")
    return -0.5 * q / lam - 0.5 * (logdetA + k * math.log(lam)) - 0.5 * k * math.log(2 * math.pi)


def log_lambda_prior_density(lam: float, b: float, c: float) -> float:
    """-b log(lambda) - c / lambda."""
    if not lam > 0:
        raise ModelError(f"lambda must be positive, got {lam}")
    return -b * math.log(lam) - c / lam


# -- random matrices -------------------------------------------------------

def sample_haar_orthogonal(k: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed k x k orthogonal matrix.

    QR of a standard Gaussian matrix, with each column of Q multiplied by
    the sign of the matching diagonal entry of R.
    """
    if k < 1:
        raise ModelError("k must be >= 1")
    Z = rng.standard_normal((k, k))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.diag(R))


def sample_haar_batch(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent Haar matrices stacked as an (n, k, k) array."""
    Z = rng.standard_normal((n, k, k))
    Q, R = np.linalg.qr(Z)
    signs = np.sign(np.diagonal(R, axis1=1, axis2=2))
    return Q * signs[:, None, :]


def _bartlett_factor(df: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Lower-triangular T with T T^t ~ Wishart(df, I)."""
    T = np.zeros((k, k))
    T[np.diag_indices(k)] = np.sqrt(rng.chisquare(df - np.arange(k)))
    il = np.tril_indices(k, -1)
    T[il] = rng.standard_normal(il[0].size)
    return T


def sample_wishart(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Wishart(df, scale) draw with mean df * scale, via the Bartlett factor."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    k = scale.shape[0]
    if df <= k - 1:
        raise ModelError(f"Wishart needs df > k - 1 = {k - 1}, got {df}")
    L = np.linalg.cholesky(scale)
    LT = L @ _bartlett_factor(df, k, rng)
    return LT @ LT.T


def sample_inverse_wishart(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw with density |V|^{-(df+k+1)/2} exp(-tr(V^-1 scale)/2).

    Built by inverting a Wishart(df, scale^-1) Bartlett draw.  Mean is
    scale / (df - k - 1) when df > k + 1.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    k = scale.shape[0]
    if df <= k - 1:
        raise ModelError(f"inverse Wishart needs df > k - 1 = {k - 1}, got {df}")
    # scale = C C^t  =>  scale^-1 = C^-t C^-1, Wishart(df, scale^-1) = C^-t T T^t C^-1
    try:
        C = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise ModelError("inverse-Wishart scale is not positive definite") from exc
    T = _bartlett_factor(df, k, rng)
    # V = (C^-t T T^t C^-1)^-1 = C T^-t T^-1 C^t
    M = np.linalg.solve(T, C.T).T  # C T^-t
    V = M @ M.T
    return 0.5 * (V + V.T)


def log_inverse_wishart_kernel(V, df: float, scale) -> float:
    """Unnormalized log density matching :func:`sample_inverse_wishart`."""
    V = np.atleast_2d(V)
    k = V.shape[0]
    sign, logdet = np.linalg.slogdet(V)
    if sign <= 0:
        return -np.inf
    return -(df + k + 1) / 2 * logdet - 0.5 * float(np.trace(np.linalg.solve(V, scale)))
