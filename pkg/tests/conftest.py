from __future__ import annotations

from pathlib import Path

import pytest

from oncoagent.corpus import archive_jsonl, ingest_directory
from oncoagent.index import MockEmbedder, build_index

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "oncoagent" / "fixtures"
CASE_DIR = FIXTURES / "cases" / "patient_x"
CASE_FILE = CASE_DIR / "patient_x.json"
ANNOTATIONS = FIXTURES / "annotations"


@pytest.fixture(scope="session")
def fixture_docs():
    return ingest_directory(FIXTURES / "corpus" / "tei", "tei") + ingest_directory(FIXTURES / "corpus" / "text", "text")


@pytest.fixture(scope="session")
def mock_embedder():
    return MockEmbedder(64)


@pytest.fixture(scope="session")
def fixture_index(fixture_docs, mock_embedder):
    return build_index(fixture_docs, mock_embedder)


@pytest.fixture(scope="session")
def built_index_file(tmp_path_factory, fixture_docs):
    """Corpus archived and indexed to disk with the offline embedder (CLI-compatible)."""
    root = tmp_path_factory.mktemp("golden")
    archive_jsonl(fixture_docs, root / "corpus.jsonl")
    build_index(fixture_docs, MockEmbedder(256)).persist(root / "index.bin")
    return root / "index.bin"


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.failed:
        _CRITERIA[name] = "FAIL"
    elif rep.when == "call" and rep.passed:
        _CRITERIA.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _CRITERIA.items():
        terminalreporter.write_line(f"{verdict}  {name}")
