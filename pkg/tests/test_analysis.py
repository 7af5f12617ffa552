from fractions import Fraction

import numpy as np
import pytest

from conftest import frac, read_table
from hierprior import (
    Admissibility,
    BetaCase,
    BetaPriorSpec,
    HyperpriorSpec,
    ModelError,
    Propriety,
    ProprietyVerdict,
    VPriorParams,
    check_propriety,
    classify_admissibility,
    minimal_proper_m,
    named_v_prior,
    recommend_default,
    verdict_records,
)

CASES = {1: BetaCase.FLAT, 2: BetaCase.NORMAL, 3: BetaCase.HIERARCHICAL}


def make_spec(vprior, case: int, k: int, b=Fraction(1, 2)) -> HyperpriorSpec:
    if case == 1:
        return HyperpriorSpec(vprior, BetaPriorSpec(BetaCase.FLAT))
    return HyperpriorSpec(vprior, BetaPriorSpec(CASES[case], np.zeros(k), np.eye(k), b, Fraction(1, 2)))


def test_propriety_truth_table():
    rows = read_table("propriety_golden.csv")
    assert len(rows) == 990
    bad = []
    for r in rows:
        k, m, case = int(r["k"]), int(r["m"]), int(r["case"])
        spec = make_spec(named_v_prior(r["prior"], k), case, k)
        got = check_propriety(spec, m, k).proper
        if got != bool(int(r["proper"])):
            bad.append(r)
    assert bad == []


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_constant_prior_thresholds(k):
    flat = make_spec(named_v_prior("Constant", k), 1, k)
    normal = make_spec(named_v_prior("Constant", k), 2, k)
    assert minimal_proper_m(flat, k) == 2 * k + 2
    assert minimal_proper_m(normal, k) == 2 * k + 1


def test_nonhierarchical_priors_never_proper():
    for name in ("NonhierJeffreys", "NonhierReference"):
        spec = make_spec(named_v_prior(name, 3), 2, 3)
        assert minimal_proper_m(spec, 3) is None
        assert "a1 < 1" in check_propriety(spec, 50, 3).rule


def test_equality_is_improper_and_flagged():
    # Constant prior, flat beta: a2 = 0 equals the threshold at m = 2k + 1
    v = check_propriety(make_spec(named_v_prior("Constant", 3), 1, 3), 7, 3)
    assert v.status is Propriety.IMPROPER
    assert v.boundary


def test_float_boundary_flag():
    spec = make_spec(VPriorParams(0.0, 0.5 + 1e-12, 0.0), 1, 2)
    v = check_propriety(spec, 2, 2)
    assert v.proper and v.boundary
    assert not check_propriety(make_spec(VPriorParams(0.0, 0.7, 0.0), 1, 2), 2, 2).boundary


def test_hierarchical_b_condition():
    spec = make_spec(named_v_prior("HierReferenceA", 2), 3, 2, b=Fraction(0))
    v = check_propriety(spec, 3, 2)
    assert not v.proper and "b > 1 - k/2" in v.rule


def test_l_one_hierarchical_sufficient_only_note():
    v = check_propriety(make_spec(named_v_prior("HierJeffreys", 3), 3, 3), 5, 3)
    assert v.proper and "sufficient" in v.rule


def test_rejects_bad_dimensions():
    spec = make_spec(named_v_prior("HierReferenceA", 2), 1, 2)
    with pytest.raises(ModelError):
        check_propriety(spec, 0, 2)
    with pytest.raises(ModelError):
        check_propriety(spec, 3, 1)


def test_admissibility_grid():
    rows = read_table("admissibility_grid.csv")
    assert len(rows) == 200
    bad = []
    for r in rows:
        case, k, m = int(r["case"]), int(r["k"]), int(r["m"])
        vp = VPriorParams(frac(r["a1"]), frac(r["a2"]), 0)
        got = classify_admissibility(make_spec(vp, case, k, frac(r["b"])), m, k).status
        if got.value != r["expected"]:
            bad.append((r, got))
    assert bad == []


def test_admissibility_gap_is_unknown():
    # flat beta prior, k = 2, a2 = 1: between the two proven regions
    v = classify_admissibility(make_spec(VPriorParams(0, 1, 0), 1, 2), 3, 2)
    assert v.status is Admissibility.UNKNOWN


def test_recommended_prior_is_admissible():
    for k in range(2, 7):
        spec = recommend_default(k)
        assert spec.bprior.case is BetaCase.HIERARCHICAL
        assert spec.bprior.b == Fraction(1, 2) and spec.bprior.c == Fraction(1, 2)
        assert check_propriety(spec, 2, k).proper
        assert classify_admissibility(spec, 3, k).status is Admissibility.ADMISSIBLE


def test_boundary_prior_b_half_is_unknown():
    for k in (2, 3, 5):
        spec = make_spec(named_v_prior("HierReferenceB", k), 3, k)
        v = classify_admissibility(spec, 4, k)
        assert v.status is Admissibility.UNKNOWN and v.boundary


def test_l_positive_is_unknown():
    v = classify_admissibility(make_spec(named_v_prior("HierJeffreys", 3), 2, 3), 5, 3)
    assert v.status is Admissibility.UNKNOWN


def test_verdict_records_advice():
    rec = verdict_records(make_spec(named_v_prior("Constant", 3), 1, 3), 4, 3)
    assert rec["minimal_m"] == 8
    assert rec["advice"] == "m must be >= 8"
    assert ProprietyVerdict.from_record(rec["propriety"]).status is Propriety.IMPROPER


def test_float_priors_follow_same_rules():
    for a2 in np.linspace(-1, 3, 41):
        exact = check_propriety(make_spec(VPriorParams(0, Fraction(a2).limit_denominator(100), 0), 2, 3), 3, 3)
        approx = check_propriety(make_spec(VPriorParams(0.0, float(a2), 0.0), 2, 3), 3, 3)
        assert exact.status is approx.status
