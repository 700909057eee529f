"""Acceptance suite: one test per criterion, each reported as PASS or FAIL in the summary.

Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import itertools
import json
import random
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from oncoagent.agent import AgentConfig, PatientCase, Providers, run_case, strip_timestamps
from oncoagent.cli import main
from oncoagent.corpus import (
    CuratedDocument,
    Section,
    SourceDocument,
    archive_jsonl,
    clean_text,
    ingest_directory,
    load_jsonl,
    normalize_structure,
)
from oncoagent.errors import CycleError, PlanError
from oncoagent.eval import CITATION_HIERARCHY, STATEMENT_HIERARCHY, majority_vote, percent
from oncoagent.index import Chunk, MockEmbedder, VectorIndex, build_index, chunk_document
from oncoagent.providers import ScriptedProvider
from oncoagent.retrieval import RetrievalConfig, Subquery, retrieve_context
from oncoagent.tools import (
    AttachmentResolver,
    Clients,
    ExecutionPlan,
    Registry,
    Tool,
    ToolCall,
    ToolSpec,
    build_registry,
    execute_plan,
    pubmed_search,
    validate_plan,
)

from .conftest import ANNOTATIONS, CASE_DIR, CASE_FILE, FIXTURES
from .oracles import brute_chunk_offsets, brute_majority, brute_pipeline, brute_search
from .test_index import doc_of

ROOT = Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------- metrics


@pytest.mark.criterion("Metrics reproduction on packaged annotations (exact counts, one-decimal percentages, < 1 s)")
def test_metrics_reproduction(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["eval", "compute", "--annotations", str(ANNOTATIONS), "--out", str(tmp_path / "m.json")]) == 0
    elapsed = time.perf_counter() - t0
    m = json.loads((tmp_path / "m.json").read_text())["metrics"]
    want = {
        "tool_use": (32, 33, 97.0),
        "completeness": (63, 67, 94.0),
        "helpfulness": (33, 37, 89.2),
        "correctness": (131, 140, 93.6),
        "wrongness": (6, 140, 4.3),
        "harmfulness": (3, 140, 2.1),
        "citation_correct": (141, 171, 82.5),
    }
    for name, (num, den, pct) in want.items():
        assert (m[name]["numerator"], m[name]["denominator"], m[name]["percent"]) == (num, den, pct), name
    assert (m["citation_irrelevant"]["numerator"], m["citation_irrelevant"]["denominator"]) == (11, 171)
    assert (m["citation_wrong"]["numerator"], m["citation_wrong"]["denominator"]) == (3, 171)
    # the tool-use ratio quoted at two decimals
    assert str(percent(Fraction(32, 33), 2)) == "96.97"
    assert elapsed < 1.0, f"{elapsed:.2f}s"


# ---------------------------------------------------------------- chunker


@pytest.mark.criterion("Chunker oracle on 200 randomized documents with full coverage (< 10 s)")
def test_chunker_oracle():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    for _ in range(200):
        n = rng.randint(1, 5000)
        chunks = chunk_document(doc_of(n), [512, 256, 128], 50)
        for w in (512, 256, 128):
            got = [(c.token_start, c.token_len) for c in chunks if c.window == w]
            assert got == brute_chunk_offsets(n, w, 50)
            covered = np.zeros(n, dtype=bool)
            for s, ln in got:
                covered[s : s + ln] = True
            assert covered.all()
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"{elapsed:.2f}s"


# ---------------------------------------------------------------- retrieval


@pytest.mark.criterion("Retrieval oracle: top-10 search and full pipeline on 1,000 vectors, 100 queries (< 30 s)")
def test_retrieval_oracle():
    t0 = time.perf_counter()
    rng = random.Random(99)
    vocab = [f"v{i}" for i in range(150)]
    texts, ids = [], []
    for i in range(1000):
        if i and rng.random() < 0.1:
            texts.append(texts[rng.randrange(len(texts))].upper())
        else:
            texts.append(" ".join(rng.choices(vocab, k=rng.randint(3, 12))))
        ids.append(f"d{i // 3}:w{(128, 256, 512)[i % 3]}:t{i}")
    emb = MockEmbedder(64)
    vectors = emb.embed(texts)
    idx = VectorIndex(64)
    idx.add([Chunk(c.split(":")[0], c, 128, 0, 1, t, {"doc_id": c.split(":")[0]}) for c, t in zip(ids, texts)], vectors)
    items = list(zip(ids, vectors.tolist()))
    by_id = dict(zip(ids, texts))
    cfg = RetrievalConfig(n=40, k=10)
    for _ in range(100):
        subs = [Subquery(" ".join(rng.choices(vocab, k=rng.randint(1, 5)))) for _ in range(rng.randint(1, 3))]
        qvecs = [emb.embed([s.text])[0].tolist() for s in subs]
        got = idx.search(np.array(qvecs[0]), 10)
        want = brute_search(items, qvecs[0], 10)
        assert [c for c, _ in got] == [c for c, _ in want]
        qc, per = retrieve_context(idx, subs, cfg, emb)
        want_per, want_merged = brute_pipeline(items, by_id, None, qvecs, 40, 10)
        assert [[p.chunk_id for p in lst] for lst in per] == want_per
        assert [p.chunk_id for p in qc.passages] == want_merged
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"{elapsed:.2f}s"


# ---------------------------------------------------------------- golden run


@pytest.fixture(scope="module")
def golden_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    for fmt in ("tei", "text"):
        assert main(["corpus", "ingest", "--in", str(FIXTURES / "corpus" / fmt), "--format", fmt,
                     "--out", str(root / f"{fmt}.jsonl")]) == 0
    (root / "corpus.jsonl").write_text((root / "tei.jsonl").read_text() + (root / "text.jsonl").read_text())
    assert main(["index", "build", "--offline", "--corpus", str(root / "corpus.jsonl"), "--out", str(root / "index.bin")]) == 0
    return root / "index.bin"


@pytest.mark.criterion("End-to-end golden run: exit 0, ratio 3.89, citations resolve, 3 identical transcripts (< 10 s)")
def test_golden_run(golden_index, tmp_path):
    canon = []
    for i in range(3):
        out = tmp_path / f"run{i}.json"
        t0 = time.perf_counter()
        rc = main(["agent", "run", "--offline", "--case", str(CASE_FILE), "--index", str(golden_index), "--out", str(out)])
        elapsed = time.perf_counter() - t0
        assert rc == 0
        assert elapsed < 10.0, f"{elapsed:.2f}s"
        t = json.loads(out.read_text())
        canon.append(json.dumps(strip_timestamps(t), sort_keys=True, ensure_ascii=False).encode("utf-8"))

    t = json.loads((tmp_path / "run0.json").read_text())
    ratio = next(r for r in t["tool_results"] if r["tool"] == "calculator")
    assert abs(ratio["output"]["result"] - 3.89) <= 0.01

    # provenance: citation number -> source entry -> stored chunk
    main_index = VectorIndex.load(golden_index)
    pubmed = pubmed_search(next(c["args"]["query"] for c in t["plan"] if c["tool"] == "pubmed_search"),
                           client=Clients.mock().pubmed, embedder=MockEmbedder(main_index.dimension))
    sources = t["sources"]
    cited = [c for s in t["cited_response"] for c in s["citations"]]
    assert cited
    for c in cited:
        src = sources[c - 1]
        assert src["number"] == c
        store = main_index if src["index"] == "main" else pubmed.index
        assert store.chunks[src["chunk_id"]].text == src["text"]

    assert canon[0] == canon[1] == canon[2]


# ---------------------------------------------------------------- plan policies


def _counting_registry(counter):
    def tick(n: int):
        counter.append(n)
        return n

    return Registry([Tool(ToolSpec("tick", "counts", {"n": {"type": "integer", "required": True}}), tick)])


@pytest.mark.criterion("Plan cap, refusal and cycle policies")
def test_plan_policies(golden_index, tmp_path):
    counter = []
    reg = _counting_registry(counter)
    with pytest.raises(PlanError):
        execute_plan(ExecutionPlan([ToolCall(f"c{i}", "tick", {"n": i}) for i in range(11)]), reg)
    assert counter == []  # rejected before any call ran

    out = tmp_path / "refused.json"
    rc = main(["agent", "run", "--offline", "--case", str(CASE_FILE), "--index", str(golden_index), "--out", str(out),
               "--script", str(CASE_DIR / "patient_x.refusal.script.json"), "--refusal-retries", "1"])
    assert rc == 1
    t = json.loads(out.read_text())
    assert t["status"] == "refused" and "refused" in t["error"]
    assert [r["status"] for r in t["tool_results"]].count("refused") == 1

    cyclic = ExecutionPlan([ToolCall("a", "tick", {"n": "$c"}), ToolCall("b", "tick", {"n": "$a"}),
                            ToolCall("c", "tick", {"n": "$b"})])
    with pytest.raises(CycleError) as exc:
        validate_plan(cyclic, reg)
    assert "cycle" in str(exc.value) and all(x in str(exc.value) for x in "abc")
    assert counter == []


# ---------------------------------------------------------------- self-check


@pytest.mark.criterion("Self-check bound: one unsupported pair gives exactly two generator calls")
def test_self_check_bound():
    script = json.loads((CASE_DIR / "patient_x.script.json").read_text())
    case = PatientCase.load(CASE_FILE)
    embedder = MockEmbedder(32)
    index = build_index(ingest_directory(FIXTURES / "corpus" / "tei", "tei"), embedder)
    for checker in (["supported", "unsupported", "supported", "supported"], "unsupported"):
        provider = ScriptedProvider(dict(script, citation_check=checker))
        resolver = AttachmentResolver(case.base_dir, [vars(a) for a in case.attachments])
        reg = build_registry(Clients.mock(), vision_provider=provider, embedder=embedder, resolver=resolver)
        res = run_case(case, reg, index, AgentConfig(), Providers(chat=provider, embedder=embedder))
        assert res.status == "ok"
        assert provider.log.count("cited_response") == 2


# ---------------------------------------------------------------- majority vote


@pytest.mark.criterion("Majority vote: permutation invariance, unanimity, adverse ties over all 4-label multisets (< 1 s)")
def test_majority_properties():
    t0 = time.perf_counter()
    assert majority_vote(["correct", "correct", "irrelevant", "irrelevant"], CITATION_HIERARCHY) == "irrelevant"
    for hierarchy in (STATEMENT_HIERARCHY, CITATION_HIERARCHY):
        for h in hierarchy:
            assert majority_vote([h] * 4, hierarchy) == h
        for ms in itertools.combinations_with_replacement(hierarchy, 4):
            want = brute_majority(ms, hierarchy)
            for perm in set(itertools.permutations(ms)):
                assert majority_vote(list(perm), hierarchy) == want
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"{elapsed:.2f}s"


# ---------------------------------------------------------------- corpus


@pytest.mark.criterion("Corpus round trips: jsonlines identity, clean_text idempotence, corpus examples")
def test_corpus_round_trips(tmp_path):
    rng = random.Random(31)
    alphabet = "abcdefgh ÄÖÜ é 中 .,;:!?\n#-"
    docs = [CuratedDocument(f"d{i}", {"source": "custom", "title": f"T{i}", "authors": [], "published": None, "url": None},
                            "".join(rng.choice(alphabet) for _ in range(rng.randrange(1, 300)))) for i in range(100)]
    archive_jsonl(docs, tmp_path / "a.jsonl")
    assert load_jsonl(tmp_path / "a.jsonl") == docs

    pieces = ["Intro", "see https://x.org/a.", "10.1.2.3 host", "tab\there", "ctl\x07char", "", "# h", "two\n\nlines"]
    for i in range(200):
        secs = [Section(rng.randint(1, 4), rng.choice(pieces) or "x",
                        [rng.choice(pieces) for _ in range(rng.randint(0, 3))]) for _ in range(rng.randint(1, 4))]
        text = normalize_structure(SourceDocument(f"s{i}", "Title", sections=secs)).text
        assert clean_text(text) == text

    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(ROOT / "tests" / "test_corpus.py")],
                          cwd=ROOT, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout[-2000:]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
