"""Closed-form decision rules: posterior propriety and admissibility.

Every verdict carries a human-readable ``rule`` naming the inequality that
decided it.  Inequalities are evaluated on exact rationals whenever all of
the inputs are ints or Fractions (the named priors), and in floating point
otherwise, in which case ``boundary`` flags a margin below 1e-9.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import (
    BetaCase,
    BetaPriorSpec,
    HyperpriorSpec,
    ModelError,
    named_v_prior,
)

BOUNDARY_MARGIN = 1e-9


class Propriety(str, enum.Enum):
    PROPER = "Proper"
    IMPROPER = "Improper"


class Admissibility(str, enum.Enum):
    ADMISSIBLE = "Admissible"
    INADMISSIBLE = "Inadmissible"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class ProprietyVerdict:
    status: Propriety
    rule: str
    boundary: bool = False

    def to_record(self) -> dict:
        return {"status": self.status.value, "rule": self.rule, "boundary": self.boundary}

    @classmethod
    def from_record(cls, rec: dict) -> "ProprietyVerdict":
        return cls(Propriety(rec["status"]), rec["rule"], bool(rec["boundary"]))

    @property
    def proper(self) -> bool:
        return self.status is Propriety.PROPER


@dataclass(frozen=True)
class AdmissibilityVerdict:
    status: Admissibility
    rule: str
    boundary: bool = False

    def to_record(self) -> dict:
        return {"status": self.status.value, "rule": self.rule, "boundary": self.boundary}

    @classmethod
    def from_record(cls, rec: dict) -> "AdmissibilityVerdict":
        return cls(Admissibility(rec["status"]), rec["rule"], bool(rec["boundary"]))


def _is_exact(*values) -> bool:
    return all(isinstance(v, (int, Fraction)) and not isinstance(v, bool) for v in values)


class _Cmp:
    """Strict/non-strict comparisons that remember how close the call was."""

    def __init__(self, exact: bool):
        self.exact = exact
        self.near = False

    def num(self, v):
        return Fraction(v) if self.exact else float(v)

    def _note(self, margin):
        if not self.exact and abs(margin) < BOUNDARY_MARGIN:
            self.near = True
        if self.exact and margin == 0:
            self.near = True

    def gt(self, lhs, rhs) -> bool:
        margin = self.num(lhs) - self.num(rhs)
        self._note(margin)
        return margin > 0

    def ge(self, lhs, rhs) -> bool:
        margin = self.num(lhs) - self.num(rhs)
        self._note(margin)
        return margin >= 0

    def lt(self, lhs, rhs) -> bool:
        return self.gt(rhs, lhs)


def propriety_threshold(case: BetaCase, m: int, k: int, l) -> Fraction | float:
    """The value a2 must strictly exceed for a proper posterior."""
    exact = _is_exact(l)
    F = Fraction if exact else float
    if case is BetaCase.FLAT:
        return F(3 - m) / 2 + (k - 1) * (F(l) if exact else float(l))
    return 1 - F(m) / 2 + (k - 1) * (F(l) if exact else float(l))


def check_propriety(spec: HyperpriorSpec, m: int, k: int) -> ProprietyVerdict:
    """Decide whether the posterior under ``spec`` is proper for m blocks of size k."""
    if m < 1:
        raise ModelError("m must be a positive integer")
    if k < 2:
        raise ModelError("k must be >= 2")
    v, bp = spec.vprior, spec.bprior
    case = bp.case
    values = [v.a1, v.a2, v.l] + ([bp.b] if case is BetaCase.HIERARCHICAL else [])
    cmp = _Cmp(_is_exact(*values))
    a1, a2, l = cmp.num(v.a1), cmp.num(v.a2), cmp.num(v.l)
    thresh = propriety_threshold(case, m, k, v.l)
    thresh = cmp.num(thresh)

    if case is BetaCase.FLAT:
        if m == 1:
            base = "one block, flat beta prior: marginal exists only if pi(V) itself is integrable"
        else:
            base = "flat beta prior"
        rule = f"{base}; proper iff a1 < 1 and a2 > (3 - m)/2 + (k - 1) l = {thresh}"
    else:
        label = "normal beta prior" if case is BetaCase.NORMAL else "hierarchical beta prior"
        rule = f"{label}; proper iff a1 < 1 and a2 > 1 - m/2 + (k - 1) l = {thresh}"
        if case is BetaCase.HIERARCHICAL:
            rule += f" and b > 1 - k/2 = {cmp.num(1) - cmp.num(k) / 2}"

    if not cmp.lt(a1, 1):
        return ProprietyVerdict(Propriety.IMPROPER, rule + f"; fails a1 < 1 (a1 = {a1})", cmp.near)
    if not cmp.gt(a2, thresh):
        return ProprietyVerdict(
            Propriety.IMPROPER, rule + f"; fails a2 > {thresh} (a2 = {a2})", cmp.near)
    if case is BetaCase.HIERARCHICAL:
        b = cmp.num(bp.b)
        if not cmp.gt(b, cmp.num(1) - cmp.num(k) / 2):
            return ProprietyVerdict(
                Propriety.IMPROPER, rule + f"; fails b > 1 - k/2 (b = {b})", cmp.near)
        if l == 1:
            rule += "; for l = 1 with a hierarchical beta prior this is a sufficient condition only"
    return ProprietyVerdict(Propriety.PROPER, rule, cmp.near)


def minimal_proper_m(spec: HyperpriorSpec, k: int, m_max: int = 10_000) -> int | None:
    """Smallest m giving a proper posterior, or None when no m works."""
    v = spec.vprior
    if not v.a1 < 1:
        return None
    if spec.bprior.case is BetaCase.HIERARCHICAL and not spec.bprior.b > 1 - k / 2:
        return None
    # a2 > c0 - m/2 + (k-1)l with c0 = 3/2 (flat) or 1; monotone in m
    for m in range(1, m_max + 1):
        if check_propriety(spec, m, k).proper:
            return m
    return None


def classify_admissibility(spec: HyperpriorSpec, m: int, k: int) -> AdmissibilityVerdict:
    """Admissibility of the posterior mean under quadratic loss.

    Only l = 0 priors are classified; anything outside the proven regions
    is Unknown, including regions where inadmissibility is merely suspected.
    """
    prop = check_propriety(spec, m, k)
    if not prop.proper:
        return AdmissibilityVerdict(
            Admissibility.UNKNOWN, "no posterior mean (improper posterior)", prop.boundary)
    v, bp = spec.vprior, spec.bprior
    if v.l != 0:
        return AdmissibilityVerdict(
            Admissibility.UNKNOWN, "only l = 0 priors are classified; l > 0 is not covered")
    case = bp.case
    values = [v.a1, v.a2] + ([bp.b] if case is BetaCase.HIERARCHICAL else [])
    cmp = _Cmp(_is_exact(*values))
    a2 = cmp.num(v.a2)
    one = cmp.num(1)
    inv_k = one / cmp.num(k)

    if case is BetaCase.FLAT:
        low, high = cmp.num(3 - m) / 2, cmp.num(3) / 2 - inv_k
        if k == 2 and cmp.gt(a2, 1):
            return AdmissibilityVerdict(
                Admissibility.ADMISSIBLE, "flat beta prior: admissible when k = 2 and a2 > 1",
                cmp.near)
        if cmp.gt(a2, low) and cmp.lt(a2, high):
            return AdmissibilityVerdict(
                Admissibility.INADMISSIBLE,
                f"flat beta prior: inadmissible when (3 - m)/2 < a2 < 3/2 - 1/k = {high}",
                cmp.near)
        return AdmissibilityVerdict(
            Admissibility.UNKNOWN,
            "flat beta prior: k = 2 with a2 = 1, and k >= 3 with a2 >= 3/2 - 1/k, are not "
            "covered (inadmissibility suspected, not proven)",
            cmp.near)

    if case is BetaCase.NORMAL:
        edge = one - inv_k
        if cmp.ge(a2, edge):
            return AdmissibilityVerdict(
                Admissibility.ADMISSIBLE, f"normal beta prior: admissible when a2 >= 1 - 1/k = {edge}",
                cmp.near)
        if cmp.gt(a2, cmp.num(2 - m) / 2) and cmp.lt(a2, edge):
            return AdmissibilityVerdict(
                Admissibility.INADMISSIBLE,
                f"normal beta prior: inadmissible when (2 - m)/2 < a2 < 1 - 1/k = {edge}",
                cmp.near)
        return AdmissibilityVerdict(Admissibility.UNKNOWN, "normal beta prior: outside both regions",
                                    cmp.near)

    b = cmp.num(bp.b)
    if m >= 2:
        if cmp.ge(a2, one - inv_k) and cmp.gt(b, 1):
            return AdmissibilityVerdict(
                Admissibility.ADMISSIBLE,
                "hierarchical beta prior: admissible when a2 >= 1 - 1/k and b > 1", cmp.near)
        if k >= 3 and cmp.ge(b, 0) and cmp.lt(b, 1) and cmp.gt(a2, one - b * inv_k):
            return AdmissibilityVerdict(
                Admissibility.ADMISSIBLE,
                "hierarchical beta prior: admissible when k >= 3, 0 <= b < 1 and a2 > 1 - b/k",
                cmp.near)
        if k == 2 and cmp.gt(b, 0) and cmp.lt(b, 1) and cmp.gt(a2, one - b / 2):
            return AdmissibilityVerdict(
                Admissibility.ADMISSIBLE,
                "hierarchical beta prior: admissible when k = 2, 0 < b < 1 and a2 > 1 - b/2",
                cmp.near)
    return AdmissibilityVerdict(
        Admissibility.UNKNOWN,
        "hierarchical beta prior: outside the proven admissible regions (no inadmissibility "
        "result exists for this prior family)",
        cmp.near)


def recommend_default(k: int) -> HyperpriorSpec:
    """Default hyperprior: t-type beta prior (b = c = 1/2, beta0 = 0, A = I)
    with pi(V) = 1 / (|I + V| prod (d_i - d_j))."""
    if k < 2:
        raise ModelError("k must be >= 2")
    bprior = BetaPriorSpec(BetaCase.HIERARCHICAL, np.zeros(k), np.eye(k),
                           Fraction(1, 2), Fraction(1, 2))
    return HyperpriorSpec(named_v_prior("HierReferenceA", k), bprior)


def verdict_records(spec: HyperpriorSpec, m: int, k: int) -> dict:
    prop = check_propriety(spec, m, k)
    adm = classify_admissibility(spec, m, k)
    out = {"propriety": prop.to_record(), "admissibility": adm.to_record()}
    if not prop.proper:
        m_min = minimal_proper_m(spec, k)
        out["advice"] = (
            f"m must be >= {m_min}" if m_min is not None
            else "no number of blocks gives a proper posterior for this prior")
        out["minimal_m"] = m_min
    return out


__all__ = [
    "Admissibility", "AdmissibilityVerdict", "Propriety", "ProprietyVerdict",
    "check_propriety", "classify_admissibility", "minimal_proper_m",
    "propriety_threshold", "recommend_default", "verdict_records",
]
