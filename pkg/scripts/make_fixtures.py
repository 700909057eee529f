"""Regenerate the binary and annotation fixtures under src/oncoagent/fixtures.

Deterministic: running it twice produces identical files. The rater annotations
are constructed so that the per-item majority vote (adverse tie-breaking) yields
the published evaluation counts while individual raters disagree in realistic
patterns (unanimous, 3-1 splits, 2-1-1 splits and 2-2 ties).
"""

from __future__ import annotations

import json
import random
import shutil
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1] / "src" / "oncoagent" / "fixtures"
CASE_DIR = ROOT / "cases" / "patient_x"
ANN_DIR = ROOT / "annotations"
RATERS = ("rater1", "rater2", "rater3", "rater4")
CASES = ("A", "B", "C", "D", "E", "F", "G", "T", "W", "X", "Z")

# majority-vote targets
STATEMENTS = {"correct": 131, "wrong": 6, "harmful": 3}
CITATIONS = {"correct": 141, "irrelevant": 11, "wrong": 3}
# 171 citations were provided in total; 141 + 11 + 3 = 155 carry a label, the rest are unrated
CITATIONS_PROVIDED = 171
HELPFUL = {True: 33, False: 4}
COMPLETE = {True: 63, False: 4}

# expected / actual tool invocations per case; one omission (case C) and one
# unrequired call (case E), so the capped ratio is 32/33
TOOLS = {
    "A": [("oncokb_lookup", 1, 1), ("pubmed_search", 1, 1), ("web_search", 1, 1)],
    "B": [("histo_classify", 2, 2), ("calculator", 1, 1)],
    "C": [("vision_report", 1, 0), ("pubmed_search", 1, 1), ("oncokb_lookup", 1, 1)],
    "D": [("segment_area", 2, 2), ("calculator", 1, 1)],
    "E": [("oncokb_lookup", 2, 2), ("web_search", 1, 1), ("pubmed_search", 0, 1)],
    "F": [("vision_report", 1, 1), ("histo_classify", 1, 1), ("pubmed_search", 1, 1)],
    "G": [("oncokb_lookup", 1, 1), ("histo_classify", 1, 1), ("web_search", 1, 1)],
    "T": [("pubmed_search", 1, 1)],
    "W": [("vision_report", 2, 2)],
    "X": [("segment_area", 2, 2), ("calculator", 1, 1), ("oncokb_lookup", 2, 2), ("pubmed_search", 1, 1),
          ("web_search", 1, 1), ("histo_classify", 1, 1)],
    "Z": [("histo_classify", 1, 1)],
}

KEYWORDS = ["FOLFOX and bevacizumab", "encorafenib", "cetuximab", "pembrolizumab", "RECIST", "MSI testing",
            "tumor board", "liver resection", "BRAF V600E", "ROS1 inhibitor", "maintenance", "neuropathy"]


def split_counts(totals: dict, rng: random.Random) -> dict[str, list]:
    """Distribute every label over the cases (each case gets at least one item)."""
    labels = [lab for lab, n in totals.items() for _ in range(n)]
    rng.shuffle(labels)
    n_items = len(labels)
    sizes = [1] * len(CASES)
    for _ in range(n_items - len(CASES)):
        sizes[rng.randrange(len(CASES))] += 1
    out, pos = {}, 0
    for case, size in zip(CASES, sizes):
        out[case] = labels[pos : pos + size]
        pos += size
    return out


def votes_for(target, hierarchy, rng: random.Random) -> list:
    """Four rater labels whose adverse-tie majority is ``target``."""
    rank = hierarchy.index(target)
    better = list(hierarchy[:rank])
    others = [h for h in hierarchy if h != target]
    patterns = ["unanimous", "three_one"]
    if better:
        patterns.append("tie")
    if len(others) >= 2:
        patterns.append("two_one_one")
    kind = rng.choice(patterns)
    if kind == "unanimous":
        votes = [target] * 4
    elif kind == "three_one":
        votes = [target] * 3 + [rng.choice(others)]
    elif kind == "tie":
        votes = [target] * 2 + [rng.choice(better)] * 2
    else:
        votes = [target] * 2 + others[:2]
    rng.shuffle(votes)
    return votes


def numeric_votes(value: int, rng: random.Random) -> list[int]:
    kind = rng.choice(["unanimous", "three_one", "tie_low"])
    if kind == "unanimous":
        votes = [value] * 4
    elif kind == "three_one":
        votes = [value] * 3 + [value + 1]
    else:
        votes = [value] * 2 + [value + 1] * 2  # tie resolves to the smaller count
    rng.shuffle(votes)
    return votes


def make_annotations(rng: random.Random) -> None:
    if ANN_DIR.exists():
        shutil.rmtree(ANN_DIR)
    stmts = split_counts(STATEMENTS, rng)
    cites = split_counts(CITATIONS, rng)
    helps = split_counts(HELPFUL, rng)
    comps = split_counts(COMPLETE, rng)
    unrated = {c: 0 for c in CASES}
    for _ in range(CITATIONS_PROVIDED - sum(CITATIONS.values())):
        unrated[rng.choice(CASES)] += 1
    for case in CASES:
        per_rater = {r: {"rater_id": r, "case_id": f"patient_{case.lower()}", "tool_expectations": [],
                         "statement_labels": [], "citation_labels": [], "helpfulness_labels": [],
                         "completeness_keywords": [],
                         "citations_provided": len(cites[case]) + unrated[case]} for r in RATERS}
        for tool, expected, actual in TOOLS[case]:
            ev, av = numeric_votes(expected, rng), numeric_votes(actual, rng)
            for r, e, a in zip(RATERS, ev, av):
                per_rater[r]["tool_expectations"].append({"tool": tool, "expected_count": e, "actual_count": a})
        for lab in stmts[case]:
            for r, v in zip(RATERS, votes_for(lab, ("correct", "wrong", "harmful"), rng)):
                per_rater[r]["statement_labels"].append(v)
        for lab in cites[case]:
            for r, v in zip(RATERS, votes_for(lab, ("correct", "irrelevant", "wrong"), rng)):
                per_rater[r]["citation_labels"].append(v)
        for i, lab in enumerate(helps[case], start=1):
            for r, v in zip(RATERS, votes_for(lab, (True, False), rng)):
                per_rater[r]["helpfulness_labels"].append({"subquestion": f"Q{i}", "answered": v})
        for i, lab in enumerate(comps[case]):
            kw = KEYWORDS[i % len(KEYWORDS)] + ("" if i < len(KEYWORDS) else f" ({i // len(KEYWORDS) + 1})")
            for r, v in zip(RATERS, votes_for(lab, (True, False), rng)):
                per_rater[r]["completeness_keywords"].append({"keyword": kw, "covered": v})
        out = ANN_DIR / f"patient_{case.lower()}"
        out.mkdir(parents=True, exist_ok=True)
        for r, data in per_rater.items():
            (out / f"{r}.json").write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def make_case_arrays(rng: np.random.Generator) -> None:
    CASE_DIR.mkdir(parents=True, exist_ok=True)
    for name in ("ct_t1", "ct_t2"):
        img = rng.normal(40.0, 12.0, size=(64, 64)).astype(np.float32)
        np.save(CASE_DIR / f"{name}.npy", img)
    # baseline lesion: 250 full pixels plus one pixel at 10% coverage
    m1 = np.zeros((64, 64), dtype=np.float64)
    m1[20:30, 20:45] = 1.0
    m1[30, 20] = 0.1
    # follow-up lesion: 31 x 31 block plus 12 pixels
    m2 = np.zeros((64, 64), dtype=np.float64)
    m2[10:41, 10:41] = 1.0
    m2[41, 10:22] = 1.0
    np.save(CASE_DIR / "mask_t1.npy", m1)
    np.save(CASE_DIR / "mask_t2.npy", m2)
    np.save(CASE_DIR / "patient_x_features.npy", rng.normal(size=(16, 64)).astype(np.float32))


def main() -> None:
    make_case_arrays(np.random.default_rng(7))
    make_annotations(random.Random(2024))
    print(f"fixtures written under {ROOT}")


if __name__ == "__main__":
    main()
