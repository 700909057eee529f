"""Command-line entry point: ``oncoagent {corpus,index,agent,eval,tools} ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from ._io import atomic_write_text
from .agent import AgentConfig, PatientCase, Providers, replay_transcript, run_case, write_transcript
from .config import EngineConfig
from .corpus import archive_jsonl, ingest_directory, keyword_filter, load_jsonl
from .errors import OncoAgentError, ProviderError
from .eval import completeness_check, compute_metrics, load_annotations
from .index import HTTPEmbedder, MockEmbedder, VectorIndex, build_index, embed
from .providers import OfflineProvider, OpenAIChatProvider, ScriptedProvider
from .tools import AttachmentResolver, Clients, ExecutionPlan, RefusalDetector, build_registry, execute_plan
from .transport import Transport, set_default_transport

logger = logging.getLogger("oncoagent")


class OfflineTransport(Transport):
    """Installed as the default transport in offline mode; any network attempt is an error."""

    def __init__(self):
        super().__init__(retries=1)

    def request(self, method, url, **kw):
        raise ProviderError(f"network access disabled in offline mode ({method} {url})")


# --------------------------------------------------------------------------- wiring


def make_embedder(cfg: EngineConfig, offline: bool, dimension: int | None = None):
    if offline or cfg.embedding.provider == "mock":
        return MockEmbedder(dimension or cfg.embedding.mock_dimension)
    return HTTPEmbedder(cfg.embedding.url, cfg.embedding.model, dimension or cfg.embedding.dimension,
                        cfg.embedding.api_key_env)


def make_chat(cfg: EngineConfig, offline: bool, script: str | None = None):
    script = script or cfg.chat.script
    if script:
        chat = ScriptedProvider.from_file(script, model=cfg.chat.model, temperature=cfg.temperature)
        vision = chat
    elif offline:
        chat = OfflineProvider(temperature=cfg.temperature)
        vision = chat
    else:
        chat = OpenAIChatProvider(cfg.chat.model, cfg.chat.base_url, cfg.chat.api_key_env, temperature=cfg.temperature)
        vision = OpenAIChatProvider(cfg.chat.vision_model, cfg.chat.base_url, cfg.chat.api_key_env,
                                    temperature=cfg.temperature)
    return chat, vision


def make_clients(cfg: EngineConfig, offline: bool, mocks: str | None = None) -> Clients:
    if offline or mocks:
        return Clients.mock(mocks or cfg.tools.mocks)
    return Clients.remote(vars(cfg.tools))


def make_registry(cfg, clients, vision, embedder, case: PatientCase | None = None):
    resolver = AttachmentResolver(case.base_dir, [vars(a) for a in case.attachments]) if case else AttachmentResolver()
    return build_registry(
        clients,
        vision_provider=vision,
        embedder=embedder,
        resolver=resolver,
        is_refusal=RefusalDetector(cfg.agent.refusal_markers),
        framing=cfg.agent.framing,
        windows=cfg.index.windows,
        overlap=cfg.index.overlap,
        web_max_results=cfg.tools.web_max_results,
        pubmed_max_results=cfg.tools.pubmed_max_results,
    )


def _adjacent(case_path: Path, suffix: str) -> str | None:
    cand = case_path.with_name(case_path.stem + suffix)
    return str(cand) if cand.is_file() else None


# --------------------------------------------------------------------------- commands


def cmd_corpus_ingest(args, cfg):
    docs = ingest_directory(args.in_dir, args.format, args.source)
    if args.keywords:
        docs = keyword_filter(docs, _read_keywords(args.keywords))
    n = archive_jsonl(docs, args.out)
    print(f"wrote {n} documents to {args.out}")


def _read_keywords(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]


def cmd_corpus_filter(args, cfg):
    docs = keyword_filter(load_jsonl(args.corpus), _read_keywords(args.keywords))
    n = archive_jsonl(docs, args.out)
    print(f"kept {n} documents in {args.out}")


def cmd_index_build(args, cfg):
    windows = [int(w) for w in args.windows.split(",")] if args.windows else cfg.index.windows
    overlap = cfg.index.overlap if args.overlap is None else args.overlap
    embedder = make_embedder(cfg, args.offline)
    index = build_index(load_jsonl(args.corpus), embedder, windows, overlap, cfg.index.batch_size, cfg.index.workers)
    index.persist(args.out)
    print(f"indexed {len(index)} chunks (dimension {index.dimension}) into {args.out}")


def cmd_index_search(args, cfg):
    index = VectorIndex.load(args.index)
    embedder = make_embedder(cfg, args.offline, index.dimension)
    q = embed([args.query], embedder)[0]
    for cid, score in index.search(q, args.top_n):
        print(f"{score:.4f}  {cid}  {index.chunks[cid].text[:100]!r}")


def cmd_agent_run(args, cfg):
    case_path = Path(args.case)
    case = PatientCase.load(case_path)
    index = VectorIndex.load(args.index)
    script = args.script or (_adjacent(case_path, ".script.json") if args.offline and not cfg.chat.script else None)
    mocks = args.mocks or (_adjacent(case_path, ".mocks.json") if args.offline and not cfg.tools.mocks else None)
    embedder = make_embedder(cfg, args.offline, index.dimension)
    chat, vision = make_chat(cfg, args.offline, script)
    providers = Providers(chat=chat, embedder=embedder, vision=vision)
    registry = make_registry(cfg, make_clients(cfg, args.offline, mocks), providers.vision, embedder, case)
    refusal_retries = cfg.agent.refusal_retries if args.refusal_retries is None else args.refusal_retries
    agent_cfg = AgentConfig(
        retrieval=cfg.retrieval,
        max_calls=cfg.tools.max_calls,
        tool_workers=cfg.tools.workers,
        refusal_retries=refusal_retries,
        forced_plan=ExecutionPlan.load(args.plan, cfg.tools.max_calls) if args.plan else None,
    )
    result = run_case(case, registry, index, agent_cfg, providers)
    out = args.out or f"{case.case_id}.transcript.json"
    write_transcript(result.transcript, out)
    if result.status != "ok":
        print(f"run {result.status}: {result.transcript.get('error')} (transcript: {out})", file=sys.stderr)
        return 1
    print(result.text)
    print(f"\n(transcript: {out})", file=sys.stderr)
    return 0


def cmd_agent_replay(args, cfg):
    transcript = json.loads(Path(args.transcript).read_text(encoding="utf-8"))
    diffs = replay_transcript(transcript)
    if diffs:
        print("replay mismatch in: " + ", ".join(diffs), file=sys.stderr)
        return 1
    print(f"replay of {transcript['case']['case_id']} matches the recorded transcript")
    return 0


def cmd_eval_compute(args, cfg):
    report = compute_metrics(load_annotations(args.annotations))
    if args.out:
        atomic_write_text(args.out, json.dumps(report.to_json(), indent=2) + "\n")
    print(report.render())


def cmd_eval_completeness(args, cfg):
    keywords = json.loads(Path(args.keywords).read_text(encoding="utf-8"))
    res = completeness_check(Path(args.response).read_text(encoding="utf-8"), keywords)
    print(json.dumps(res, indent=2))


def cmd_tools_list(args, cfg):
    embedder = MockEmbedder(cfg.embedding.mock_dimension)
    registry = make_registry(cfg, Clients.mock(cfg.tools.mocks), OfflineProvider(), embedder)
    print(json.dumps(registry.specs_json(), indent=2))


def cmd_tools_run(args, cfg):
    case = PatientCase.load(args.case) if args.case else None
    embedder = make_embedder(cfg, args.offline)
    _, vision = make_chat(cfg, args.offline, args.script)
    registry = make_registry(cfg, make_clients(cfg, args.offline, args.mocks), vision, embedder, case)
    results = execute_plan(ExecutionPlan.load(args.plan, cfg.tools.max_calls), registry, cfg.tools.workers)
    print(json.dumps([r.to_json() for r in results], indent=2))
    return 0 if all(r.status == "ok" for r in results) else 1


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="engine configuration (TOML)")
    common.add_argument("--offline", action="store_true", help="use mocks for every external service")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oncoagent", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="ingest and filter documents").add_subparsers(dest="action", required=True)
    c = corpus.add_parser("ingest", parents=[common])
    c.add_argument("--in", dest="in_dir", required=True)
    c.add_argument("--format", choices=["tei", "jsonl", "text"], required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--source", default="custom")
    c.add_argument("--keywords", help="file with one keyword per line")
    c.set_defaults(func=cmd_corpus_ingest)
    c = corpus.add_parser("filter", parents=[common])
    c.add_argument("--keywords", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corpus_filter)

    index = sub.add_parser("index", help="build and query the vector index").add_subparsers(dest="action", required=True)
    c = index.add_parser("build", parents=[common])
    c.add_argument("--corpus", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--windows", help="comma-separated window sizes, e.g. 512,256,128")
    c.add_argument("--overlap", type=int)
    c.set_defaults(func=cmd_index_build)
    c = index.add_parser("search", parents=[common])
    c.add_argument("--index", required=True)
    c.add_argument("--query", required=True)
    c.add_argument("--top-n", type=int, default=10)
    c.set_defaults(func=cmd_index_search)

    agent = sub.add_parser("agent", help="run or replay a patient case").add_subparsers(dest="action", required=True)
    c = agent.add_parser("run", parents=[common])
    c.add_argument("--case", required=True)
    c.add_argument("--index", required=True)
    c.add_argument("--out", help="transcript path (default <case_id>.transcript.json)")
    c.add_argument("--script", help="scripted provider responses (JSON)")
    c.add_argument("--mocks", help="mock client fixture bundle (JSON)")
    c.add_argument("--plan", help="forced tool plan (JSON list of calls)")
    c.add_argument("--refusal-retries", type=int)
    c.set_defaults(func=cmd_agent_run)
    c = agent.add_parser("replay", parents=[common])
    c.add_argument("--transcript", required=True)
    c.set_defaults(func=cmd_agent_replay)

    ev = sub.add_parser("eval", help="evaluation metrics").add_subparsers(dest="action", required=True)
    c = ev.add_parser("compute", parents=[common])
    c.add_argument("--annotations", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_eval_compute)
    c = ev.add_parser("completeness", parents=[common])
    c.add_argument("--response", required=True)
    c.add_argument("--keywords", required=True, help="JSON list of keywords or {keyword, synonyms}")
    c.set_defaults(func=cmd_eval_completeness)

    tools = sub.add_parser("tools", help="inspect and run tools").add_subparsers(dest="action", required=True)
    c = tools.add_parser("list", parents=[common])
    c.set_defaults(func=cmd_tools_list)
    c = tools.add_parser("run", parents=[common])
    c.add_argument("--plan", required=True)
    c.add_argument("--case")
    c.add_argument("--script")
    c.add_argument("--mocks")
    c.set_defaults(func=cmd_tools_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    previous = None
    try:
        cfg = EngineConfig.load(args.config)
        args.offline = args.offline or cfg.offline
        if args.offline:
            from . import transport

            previous = transport._default
            set_default_transport(OfflineTransport())
        rc = args.func(args, cfg)
        return rc or 0
    except (OncoAgentError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if args.offline:
            set_default_transport(previous)


if __name__ == "__main__":
    sys.exit(main())
