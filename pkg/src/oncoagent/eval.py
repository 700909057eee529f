"""Evaluation harness: per-item majority vote over raters, then aggregate ratios.

Ties resolve to the most adverse label among those tied for the top count.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .errors import AnnotationError

CITATION_HIERARCHY = ("correct", "irrelevant", "wrong")
STATEMENT_HIERARCHY = ("correct", "wrong", "harmful")
# booleans: True (answered / covered) is the favourable outcome
BOOL_HIERARCHY = (True, False)

METRIC_ORDER = (
    "tool_use",
    "completeness",
    "helpfulness",
    "correctness",
    "wrongness",
    "harmfulness",
    "citation_correct",
    "citation_irrelevant",
    "citation_wrong",
    "citation_unrated",
)


def majority_vote(labels: Sequence[Hashable], hierarchy: Sequence[Hashable]) -> Hashable:
    """Plurality label; a tie at the top goes to the tied label lowest in ``hierarchy``."""
    if not labels:
        raise ValueError("no labels to vote on")
    rank = {lab: i for i, lab in enumerate(hierarchy)}
    for lab in labels:
        if lab not in rank or type(lab) is not type(hierarchy[rank[lab]]):
            raise ValueError(f"label {lab!r} is not in hierarchy {list(hierarchy)}")
    counts = Counter(labels)
    top = max(counts.values())
    return max((lab for lab, c in counts.items() if c == top), key=rank.__getitem__)


def numeric_vote(values: Sequence[int]) -> int:
    """Majority for counts; ties resolve to the smallest (most adverse) tied value."""
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def percent(frac: Fraction, places: int = 1) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return (Decimal(frac.numerator) * 100 / Decimal(frac.denominator)).quantize(q, rounding=ROUND_HALF_UP)


@dataclass
class Metric:
    numerator: int
    denominator: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.numerator, self.denominator) if self.denominator else Fraction(0)

    @property
    def percent(self) -> Decimal:
        return percent(self.ratio)

    def to_json(self) -> dict:
        return {
            "numerator": self.numerator,
            "denominator": self.denominator,
            "ratio": float(self.ratio),
            "percent": float(self.percent),
        }


@dataclass
class RaterAnnotation:
    rater_id: str
    case_id: str
    tool_expectations: list[dict] = field(default_factory=list)
    statement_labels: list[str] = field(default_factory=list)
    citation_labels: list[str] = field(default_factory=list)
    helpfulness_labels: list[dict] = field(default_factory=list)
    completeness_keywords: list[dict] = field(default_factory=list)
    # citations present in the response; those beyond the labelled ones count as unrated
    citations_provided: int | None = None

    @classmethod
    def from_json(cls, data: dict) -> "RaterAnnotation":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class MetricsReport:
    metrics: dict[str, Metric]
    per_case: dict[str, dict[str, Metric]]
    majority: dict[str, dict[str, list]]

    def to_json(self) -> dict:
        return {
            "metrics": {k: self.metrics[k].to_json() for k in METRIC_ORDER},
            "per_case": {c: {k: m.to_json() for k, m in ms.items()} for c, ms in self.per_case.items()},
            "majority": self.majority,
        }

    def render(self) -> str:
        rows = [("metric", "count", "percent")]
        for k in METRIC_ORDER:
            m = self.metrics[k]
            rows.append((k, f"{m.numerator}/{m.denominator}", f"{m.percent}%"))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{w[0]}}  {r[1]:>{w[1]}}  {r[2]:>{w[2]}}" for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


def _check_same_length(case_id, name, lists):
    lengths = [len(x) for x in lists]
    if len(set(lengths)) > 1:
        first_bad = min(lengths)
        raise AnnotationError(
            f"case {case_id}: raters disagree on the number of {name} items "
            f"({sorted(set(lengths))}); item index {first_bad} is missing for some rater"
        )


def _check_same_key(case_id, name, lists, key):
    for i, items in enumerate(zip(*lists)):
        keys = {it[key] for it in items}
        if len(keys) > 1:
            raise AnnotationError(f"case {case_id}: {name} item index {i} differs across raters: {sorted(keys)}")


def compute_metrics(annotations: Iterable[RaterAnnotation]) -> MetricsReport:
    by_case: dict[str, list[RaterAnnotation]] = {}
    for a in annotations:
        by_case.setdefault(a.case_id, []).append(a)
    if not by_case:
        raise AnnotationError("no annotations")

    totals = {k: [0, 0] for k in METRIC_ORDER}
    per_case: dict[str, dict[str, Metric]] = {}
    majority: dict[str, dict[str, list]] = {}
    for case_id in sorted(by_case):
        raters = sorted(by_case[case_id], key=lambda a: a.rater_id)
        ids = [r.rater_id for r in raters]
        if len(set(ids)) != len(ids):
            raise AnnotationError(f"case {case_id}: duplicate rater ids")

        tools = [r.tool_expectations for r in raters]
        stmts = [r.statement_labels for r in raters]
        cites = [r.citation_labels for r in raters]
        helps = [r.helpfulness_labels for r in raters]
        kws = [r.completeness_keywords for r in raters]
        for name, lists in (("tool", tools), ("statement", stmts), ("citation", cites),
                            ("helpfulness", helps), ("completeness", kws)):
            _check_same_length(case_id, name, lists)
        _check_same_key(case_id, "tool", tools, "tool")
        _check_same_key(case_id, "helpfulness", helps, "subquestion")
        _check_same_key(case_id, "completeness", kws, "keyword")
        provided = {r.citations_provided for r in raters}
        if len(provided) > 1:
            raise AnnotationError(f"case {case_id}: raters disagree on citations_provided ({sorted(provided, key=str)})")
        n_cites = provided.pop()
        n_cites = len(cites[0]) if n_cites is None else int(n_cites)
        if n_cites < len(cites[0]):
            raise AnnotationError(f"case {case_id}: citations_provided ({n_cites}) is below the {len(cites[0])} labelled citations")

        try:
            tool_m = []
            tool_num = tool_den = 0
            for items in zip(*tools):
                expected = numeric_vote([int(it["expected_count"]) for it in items])
                actual = numeric_vote([int(it["actual_count"]) for it in items])
                tool_m.append({"tool": items[0]["tool"], "expected": expected, "actual": actual})
                tool_num += min(actual, expected)
                tool_den += expected
            stmt_m = [majority_vote(list(items), STATEMENT_HIERARCHY) for items in zip(*stmts)]
            cite_m = [majority_vote(list(items), CITATION_HIERARCHY) for items in zip(*cites)]
            help_m = [majority_vote([bool(it["answered"]) for it in items], BOOL_HIERARCHY) for items in zip(*helps)]
            kw_m = [majority_vote([bool(it["covered"]) for it in items], BOOL_HIERARCHY) for items in zip(*kws)]
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"case {case_id}: malformed annotation item ({exc})") from None
        except ValueError as exc:
            raise AnnotationError(f"case {case_id}: {exc}") from None

        sc, cc = Counter(stmt_m), Counter(cite_m)
        case_metrics = {
            "tool_use": Metric(tool_num, tool_den),
            "completeness": Metric(sum(kw_m), len(kw_m)),
            "helpfulness": Metric(sum(help_m), len(help_m)),
            "correctness": Metric(sc["correct"], len(stmt_m)),
            "wrongness": Metric(sc["wrong"], len(stmt_m)),
            "harmfulness": Metric(sc["harmful"], len(stmt_m)),
            "citation_correct": Metric(cc["correct"], n_cites),
            "citation_irrelevant": Metric(cc["irrelevant"], n_cites),
            "citation_wrong": Metric(cc["wrong"], n_cites),
            "citation_unrated": Metric(n_cites - len(cite_m), n_cites),
        }
        per_case[case_id] = case_metrics
        majority[case_id] = {"tools": tool_m, "statements": stmt_m, "citations": cite_m,
                             "helpfulness": help_m, "completeness": kw_m}
        for k, m in case_metrics.items():
            totals[k][0] += m.numerator
            totals[k][1] += m.denominator

    return MetricsReport({k: Metric(*v) for k, v in totals.items()}, per_case, majority)


def load_annotations(path) -> list[RaterAnnotation]:
    """Load one annotation file, or every ``*.json`` below a directory (sorted by path)."""
    path = Path(path)
    files = sorted(path.rglob("*.json")) if path.is_dir() else [path]
    out = []
    for f in files:
        try:
            data = json.loads(f.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{f}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        for item in data if isinstance(data, list) else [data]:
            out.append(RaterAnnotation.from_json(item))
    return out


def completeness_check(response_text: str, keywords: Sequence[str | dict]) -> list[dict]:
    """Case-insensitive containment of each keyword (or one of its synonyms) in the response."""
    if not keywords:
        raise ValueError("keywords must be non-empty")
    hay = " ".join(response_text.casefold().split())
    out = []
    for kw in keywords:
        if isinstance(kw, dict):
            name, variants = kw["keyword"], [kw["keyword"], *kw.get("synonyms", [])]
        else:
            name, variants = kw, [kw]
        covered = any(" ".join(v.casefold().split()) in hay for v in variants if v.strip())
        out.append({"keyword": name, "covered": covered})
    return out
