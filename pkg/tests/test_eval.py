import itertools
import json
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oncoagent.errors import AnnotationError
from oncoagent.eval import (
    BOOL_HIERARCHY,
    CITATION_HIERARCHY,
    METRIC_ORDER,
    STATEMENT_HIERARCHY,
    RaterAnnotation,
    completeness_check,
    compute_metrics,
    load_annotations,
    majority_vote,
    numeric_vote,
    percent,
)

from .conftest import ANNOTATIONS
from .oracles import brute_majority

EXPECTED = {
    "tool_use": (32, 33, "97.0"),
    "completeness": (63, 67, "94.0"),
    "helpfulness": (33, 37, "89.2"),
    "correctness": (131, 140, "93.6"),
    "wrongness": (6, 140, "4.3"),
    "harmfulness": (3, 140, "2.1"),
    "citation_correct": (141, 171, "82.5"),
    "citation_irrelevant": (11, 171, "6.4"),
    "citation_wrong": (3, 171, "1.8"),
    "citation_unrated": (16, 171, "9.4"),
}


@pytest.fixture(scope="module")
def report():
    return compute_metrics(load_annotations(ANNOTATIONS))


@pytest.mark.parametrize("labels, want", [
    (["correct"] * 4, "correct"),
    (["correct", "correct", "correct", "wrong"], "correct"),
    (["correct", "correct", "wrong", "wrong"], "wrong"),
    (["correct", "correct", "harmful", "harmful"], "harmful"),
    (["wrong", "wrong", "harmful", "harmful"], "harmful"),
    (["correct", "correct", "wrong", "harmful"], "correct"),
    (["correct", "wrong", "harmful", "harmful"], "harmful"),
])
def test_statement_majority_examples(labels, want):
    assert majority_vote(labels, STATEMENT_HIERARCHY) == want


def test_citation_and_bool_ties():
    assert majority_vote(["correct", "irrelevant"] * 2, CITATION_HIERARCHY) == "irrelevant"
    assert majority_vote(["irrelevant", "wrong"] * 2, CITATION_HIERARCHY) == "wrong"
    assert majority_vote([True, False, True, False], BOOL_HIERARCHY) is False


def test_majority_rejects_unknown():
    with pytest.raises(ValueError):
        majority_vote(["fine"], STATEMENT_HIERARCHY)
    with pytest.raises(ValueError):
        majority_vote([], STATEMENT_HIERARCHY)
    with pytest.raises(ValueError):
        majority_vote([1, 0], BOOL_HIERARCHY)


@pytest.mark.parametrize("hierarchy", [STATEMENT_HIERARCHY, CITATION_HIERARCHY])
def test_majority_exhaustive_four_raters(hierarchy):
    for multiset in itertools.combinations_with_replacement(hierarchy, 4):
        want = brute_majority(multiset, hierarchy)
        assert {majority_vote(list(p), hierarchy) for p in itertools.permutations(multiset)} == {want}
    for h in hierarchy:
        assert majority_vote([h] * 4, hierarchy) == h


@given(st.lists(st.sampled_from(STATEMENT_HIERARCHY), min_size=1, max_size=9), st.randoms())
def test_majority_matches_oracle(labels, rnd):
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    assert majority_vote(shuffled, STATEMENT_HIERARCHY) == brute_majority(labels, STATEMENT_HIERARCHY)


def test_numeric_vote():
    assert numeric_vote([2, 2, 2, 3]) == 2
    assert numeric_vote([1, 1, 2, 2]) == 1
    assert numeric_vote([0, 1, 2, 2]) == 2


@pytest.mark.parametrize("frac, want", [(Fraction(32, 33), "97.0"), (Fraction(1, 8), "12.5"),
                                        (Fraction(1, 40), "2.5"), (Fraction(3, 140), "2.1"), (Fraction(0), "0.0")])
def test_percent_half_up(frac, want):
    assert percent(frac) == Decimal(want)


def test_fixture_metrics(report):
    for name, (num, den, pct) in EXPECTED.items():
        m = report.metrics[name]
        assert (m.numerator, m.denominator, str(m.percent)) == (num, den, pct), name
    assert list(report.to_json()["metrics"]) == list(METRIC_ORDER)
    assert report.metrics["tool_use"].ratio == Fraction(32, 33)


def test_fixture_cases_and_raters():
    anns = load_annotations(ANNOTATIONS)
    assert len({a.case_id for a in anns}) == 11
    assert {a.rater_id for a in anns} == {"rater1", "rater2", "rater3", "rater4"}


def test_rater_order_invariance(report):
    anns = load_annotations(ANNOTATIONS)
    assert compute_metrics(reversed(anns)).to_json() == report.to_json()


def test_per_case_sums_to_totals(report):
    for name in METRIC_ORDER:
        assert sum(ms[name].numerator for ms in report.per_case.values()) == report.metrics[name].numerator
        assert sum(ms[name].denominator for ms in report.per_case.values()) == report.metrics[name].denominator


def test_statement_partition(report):
    s = report.metrics
    assert s["correctness"].numerator + s["wrongness"].numerator + s["harmfulness"].numerator == s["correctness"].denominator
    cites = sum(s[k].numerator for k in METRIC_ORDER if k.startswith("citation_"))
    assert cites == s["citation_correct"].denominator


def ann(rater, **kw):
    return RaterAnnotation(rater, "c1", **kw)


def test_unanimous_set():
    anns = [ann(r, statement_labels=["correct", "wrong"], citation_labels=["correct"],
                tool_expectations=[{"tool": "calculator", "expected_count": 2, "actual_count": 3}]) for r in "abcd"]
    m = compute_metrics(anns).metrics
    assert (m["correctness"].numerator, m["wrongness"].numerator) == (1, 1)
    assert (m["tool_use"].numerator, m["tool_use"].denominator) == (2, 2)
    assert m["citation_unrated"].numerator == 0


def test_mismatched_item_count():
    anns = [ann("a", statement_labels=["correct", "wrong"]), ann("b", statement_labels=["correct"])]
    with pytest.raises(AnnotationError, match="statement"):
        compute_metrics(anns)


def test_mismatched_keys_and_provided():
    a = ann("a", helpfulness_labels=[{"subquestion": "Q1", "answered": True}])
    b = ann("b", helpfulness_labels=[{"subquestion": "Q2", "answered": True}])
    with pytest.raises(AnnotationError, match="index 0"):
        compute_metrics([a, b])
    with pytest.raises(AnnotationError):
        compute_metrics([ann("a", citations_provided=2), ann("b", citations_provided=3)])
    with pytest.raises(AnnotationError):
        compute_metrics([ann("a", citation_labels=["correct"] * 3, citations_provided=2)])


def test_bad_label_and_json(tmp_path):
    with pytest.raises(AnnotationError):
        compute_metrics([ann("a", statement_labels=["meh"])])
    (tmp_path / "r.json").write_text("{nope")
    with pytest.raises(AnnotationError, match="invalid JSON"):
        load_annotations(tmp_path)
    with pytest.raises(AnnotationError):
        compute_metrics([])


def test_load_list_file(tmp_path):
    (tmp_path / "all.json").write_text(json.dumps([{"rater_id": "a", "case_id": "c", "extra": 1}]))
    assert load_annotations(tmp_path / "all.json") == [RaterAnnotation("a", "c")]


def test_completeness_check():
    text = "Start  FOLFOX and\nbevacizumab; consider ENCORAFENIB."
    out = completeness_check(text, ["folfox and bevacizumab", "encorafenib", "RECIST",
                                    {"keyword": "MSI testing", "synonyms": ["encorafenib"]}])
    assert [o["covered"] for o in out] == [True, True, False, True]
    assert out[3]["keyword"] == "MSI testing"
    with pytest.raises(ValueError):
        completeness_check("x", [])


def test_render_table(report):
    table = report.render()
    assert "tool_use" in table and "32/33" in table and "97.0%" in table
    assert len(table.splitlines()) == len(METRIC_ORDER) + 2
