"""End-to-end case pipeline: plan tools, execute them, retrieve, then generate a cited answer.

Stage order is fixed: plan -> tools -> subqueries -> retrieval -> strategy ->
cited response -> citation self-check (one repair round at most) -> suggestions.
Every intermediate artifact goes into a JSON transcript.
"""

from __future__ import annotations

import json
import logging
import re
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Any, Callable, Sequence

from .errors import OncoAgentError, PlanError, ProviderError, RunRefused
from .index import Embedder, VectorIndex
from .providers import ChatProvider, ScriptedProvider, provider_scope
from .retrieval import (
    QuestionContext,
    RankedPassage,
    RetrievalConfig,
    Subquery,
    generate_subqueries,
    make_reranker,
    parse_subqueries,
    retrieve_context,
)
from .tools.builtins import PubMedResult
from .tools.executor import MAX_CALLS, ExecutionPlan, ToolResult, execute_plan, validate_plan
from .tools.registry import Registry

logger = logging.getLogger(__name__)

TRANSCRIPT_VERSION = 1
ATTACHMENT_KINDS = ("ct_image", "mri_image", "histology_features", "genomic_variant")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


# --------------------------------------------------------------------------- domain types


@dataclass
class Attachment:
    kind: str
    ref: str
    label: str = ""

    def __post_init__(self):
        if self.kind not in ATTACHMENT_KINDS:
            raise ValueError(f"attachment kind must be one of {ATTACHMENT_KINDS}, got {self.kind!r}")


@dataclass
class PatientCase:
    case_id: str
    context: str
    question: str
    attachments: list[Attachment] = field(default_factory=list)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        if not self.context.strip() or not self.question.strip():
            raise ValueError("case context and question must be non-empty")
        self.attachments = [a if isinstance(a, Attachment) else Attachment(**a) for a in self.attachments]

    @classmethod
    def load(cls, path) -> "PatientCase":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(data["case_id"], data["context"], data["question"], data.get("attachments", []), path.parent)

    def to_json(self) -> dict:
        return {"case_id": self.case_id, "context": self.context, "question": self.question,
                "attachments": [asdict(a) for a in self.attachments]}

    def attachments_text(self) -> str:
        if not self.attachments:
            return "(none)"
        return "\n".join(f"- {a.label or a.ref} ({a.kind}): {a.ref}" for a in self.attachments)


@dataclass
class Strategy:
    steps: list[str]
    missing_information: list[str] = field(default_factory=list)

    def render(self) -> str:
        lines = [f"{i}. {s}" for i, s in enumerate(self.steps, start=1)]
        lines += [f"Missing: {m}" for m in self.missing_information]
        return "\n".join(lines)


@dataclass
class Statement:
    text: str
    citations: list[int] = field(default_factory=list)

    def render(self) -> str:
        if not self.citations:
            return self.text
        cites = "".join(f"[Source {c}]" for c in self.citations)
        if self.text[-1:] in ".!?":
            return f"{self.text[:-1]} {cites}{self.text[-1]}"
        return f"{self.text} {cites}"


@dataclass
class CitedResponse:
    statements: list[Statement] = field(default_factory=list)

    def render(self) -> str:
        return " ".join(s.render() for s in self.statements)

    def invalid_citations(self, n_sources: int) -> list[tuple[int, int]]:
        return [(i, c) for i, s in enumerate(self.statements) for c in s.citations if not 1 <= c <= n_sources]

    def to_json(self) -> list[dict]:
        return [asdict(s) for s in self.statements]

    @classmethod
    def from_json(cls, data) -> "CitedResponse":
        return cls([Statement(d["text"], list(d["citations"])) for d in data])


@dataclass
class FinalResponse:
    status: str  # ok | failed | refused
    cited_response: CitedResponse | None
    suggestions: str
    text: str
    transcript: dict
    question_context: QuestionContext | None = field(default=None, repr=False)
    ephemeral_indexes: list[VectorIndex] = field(default_factory=list, repr=False)


@dataclass
class Providers:
    """Chat and vision providers share one call log so provider calls are recorded in order."""

    chat: ChatProvider
    embedder: Embedder
    vision: ChatProvider | None = None
    reranker: Any = None

    def __post_init__(self):
        if self.vision is None:
            self.vision = self.chat
        self.vision.log = self.chat.log


@dataclass
class AgentConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    max_calls: int = MAX_CALLS
    tool_workers: int = 4
    refusal_retries: int = 3
    forced_plan: ExecutionPlan | None = None

    def to_json(self) -> dict:
        r = asdict(self.retrieval)
        r.pop("workers", None)
        return {"retrieval": r, "max_calls": self.max_calls, "refusal_retries": self.refusal_retries,
                "forced_plan": self.forced_plan is not None}


# --------------------------------------------------------------------------- parsing helpers

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_CITE_RE = re.compile(r"\[\s*(?:Sources?\s*)?(\d+(?:\s*(?:,|;|&|and)\s*(?:Sources?\s*)?\d+)*)\s*\]", re.IGNORECASE)
_CITE_AFTER_PUNCT_RE = re.compile(r"([.!?])((?:\s*" + _CITE_RE.pattern + r")+)", re.IGNORECASE)
_SENT_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")
_BULLET_RE = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.):])\s*")


def parse_plan_text(text: str, max_calls: int = MAX_CALLS) -> ExecutionPlan:
    """Extract the JSON plan from a model answer (bare or fenced JSON)."""
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]
    for cand in candidates:
        cand = cand.strip()
        for opener, closer in (("{", "}"), ("[", "]")):
            lo, hi = cand.find(opener), cand.rfind(closer)
            if lo == -1 or hi <= lo:
                continue
            try:
                data = json.loads(cand[lo : hi + 1])
            except json.JSONDecodeError:
                continue
            return ExecutionPlan.from_json(data, max_calls)
    raise ValueError("no JSON plan found in model output")


def split_sentences(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        out.extend(s.strip() for s in _SENT_SPLIT_RE.split(line.strip()) if s.strip())
    return out


def _citations_in(sentence: str) -> tuple[str, list[int]]:
    nums: list[int] = []
    for m in _CITE_RE.finditer(sentence):
        nums.extend(int(n) for n in re.findall(r"\d+", m.group(1)))
    text = _CITE_RE.sub("", sentence)
    text = re.sub(r"\s+([.,;:!?])", r"\1", re.sub(r"\s{2,}", " ", text)).strip()
    return text, list(dict.fromkeys(nums))


def segment_statements(text: str) -> list[Statement]:
    """Split a response into statements of at most two sentences each.

    A statement ends at a sentence carrying citations; longer uncited runs before it
    are split off in pairs so the cited statement keeps at most two sentences.
    """
    text = _CITE_AFTER_PUNCT_RE.sub(lambda m: m.group(2) + m.group(1), text)
    statements: list[Statement] = []
    pending: list[str] = []

    def flush_uncited(sentences):
        for i in range(0, len(sentences), 2):
            statements.append(Statement(" ".join(sentences[i : i + 2])))

    for sent in split_sentences(text):
        body, cites = _citations_in(sent)
        if not body and cites and statements:
            statements[-1].citations = list(dict.fromkeys(statements[-1].citations + cites))
            continue
        pending.append(body)
        if cites:
            head, tail = pending[:-2], pending[-2:]
            flush_uncited(head)
            statements.append(Statement(" ".join(tail), cites))
            pending = []
    flush_uncited(pending)
    return [s for s in statements if s.text]


def parse_strategy(text: str) -> Strategy:
    steps, missing = [], []
    for line in text.splitlines():
        line = _BULLET_RE.sub("", line).strip()
        if not line:
            continue
        m = re.match(r"^missing(?: information)?\s*:\s*(.*)$", line, re.IGNORECASE)
        if m:
            missing.extend(p.strip() for p in m.group(1).split(";") if p.strip())
        else:
            steps.append(line)
    return Strategy(steps or ["answer directly"], missing)


# --------------------------------------------------------------------------- stages


def plan_actions(case: PatientCase, registry: Registry, model_provider: ChatProvider, max_calls: int = MAX_CALLS) -> ExecutionPlan:
    if len(registry) == 0:
        raise ValueError("tool registry is empty")
    text = model_provider.complete(
        "plan_actions",
        {
            "case_context": case.context,
            "question": case.question,
            "attachments": case.attachments_text(),
            "tools_json": json.dumps(registry.specs_json(), indent=1),
            "max_calls": str(max_calls),
        },
    )
    try:
        plan = parse_plan_text(text, max_calls)
    except (ValueError, PlanError) as exc:
        logger.warning("could not parse the action plan (%s); continuing without tools", exc)
        return ExecutionPlan([], max_calls)
    validate_plan(plan, registry)
    return plan


def tool_outputs_text(results: Sequence[ToolResult]) -> str:
    lines = []
    for r in results:
        if r.status == "ok":
            lines.append(f"[{r.call_id}] {r.tool}: {r.summary}")
        else:
            lines.append(f"[{r.call_id}] {r.tool} failed: {r.error}")
    return "\n".join(lines) or "(no tools were used)"


def generate_strategy(case: PatientCase, tool_outputs: str, question_context: QuestionContext,
                      model_provider: ChatProvider, tools_text: str = "") -> Strategy:
    text = model_provider.complete(
        "strategy",
        {
            "case_context": case.context,
            "question": case.question,
            "tools": tools_text or "(none)",
            "tool_outputs": tool_outputs or "(none)",
            "sources": question_context.render() or "(none)",
        },
    )
    return parse_strategy(text)


def generate_cited_response(case: PatientCase, tool_outputs: str, question_context: QuestionContext,
                            strategy: Strategy, model_provider: ChatProvider, tools_text: str = "",
                            feedback: str = "") -> CitedResponse:
    text = model_provider.complete(
        "cited_response",
        {
            "case_context": case.context,
            "question": case.question,
            "tools": tools_text or "(none)",
            "tool_outputs": tool_outputs or "(none)",
            "strategy": strategy.render(),
            "sources": question_context.render() or "(none)",
            "feedback": feedback,
        },
    )
    return CitedResponse(segment_statements(text))


def _verdict_of(text: str) -> str:
    t = text.strip().lower()
    if re.search(r"\bun-?supported\b|\bnot supported\b", t):
        return "unsupported"
    if re.search(r"\bsupported\b", t):
        return "supported"
    return "unsupported"


@dataclass
class SelfCheck:
    verdicts: list[dict]
    response: CitedResponse
    repaired: bool


def self_check_citations(
    cited_response: CitedResponse,
    question_context: QuestionContext,
    model_provider: ChatProvider,
    repair: Callable[[str], CitedResponse] | None = None,
) -> SelfCheck:
    """Check each statement/citation pair once; unsupported pairs trigger a single repair.

    The repaired response is final regardless of its own support.
    """
    verdicts: list[dict] = []
    n = len(question_context)
    try:
        for i, st in enumerate(cited_response.statements):
            if not st.citations:
                verdicts.append({"statement": i, "source": None, "verdict": "uncited"})
                continue
            for c in st.citations:
                if not 1 <= c <= n:
                    verdicts.append({"statement": i, "source": c, "verdict": "invalid"})
                    continue
                answer = model_provider.complete(
                    "citation_check",
                    {"statement": st.text, "passage": question_context.source(c).text, "source_number": str(c)},
                )
                verdicts.append({"statement": i, "source": c, "verdict": _verdict_of(answer)})
    except ProviderError as exc:
        logger.warning("citation check failed (%s); response left unchecked", exc)
        unchecked = [{"statement": i, "source": c, "verdict": "unchecked"}
                     for i, st in enumerate(cited_response.statements) for c in (st.citations or [None])]
        return SelfCheck(unchecked, cited_response, False)

    bad = [v for v in verdicts if v["verdict"] in ("unsupported", "invalid")]
    if not bad or repair is None:
        return SelfCheck(verdicts, cited_response, False)
    lines = ["Revise the answer. The following statements are not supported by the cited source:"]
    for v in bad:
        st = cited_response.statements[v["statement"]]
        reason = "source does not exist" if v["verdict"] == "invalid" else "source does not support it"
        lines.append(f'- "{st.text}" [Source {v["source"]}]: {reason}')
    lines.append("Correct or remove these claims, or cite a source that supports them.")
    return SelfCheck(verdicts, repair("\n".join(lines)), True)


def generate_suggestions(cited_response: CitedResponse, tools_text: str, tool_outputs: str,
                         model_provider: ChatProvider) -> str:
    try:
        return model_provider.complete(
            "suggestions",
            {"response": cited_response.render(), "tools": tools_text or "(none)", "tool_outputs": tool_outputs or "(none)"},
        ).strip()
    except ProviderError as exc:
        logger.warning("suggestion generation failed: %s", exc)
        return ""


def concat_final(cited_response: CitedResponse, suggestions: str) -> str:
    body = cited_response.render()
    return f"{body}\n\n{suggestions}" if suggestions else body


def drop_invalid_citations(response: CitedResponse, n_sources: int) -> tuple[CitedResponse, list[dict]]:
    dropped = []
    statements = []
    for i, st in enumerate(response.statements):
        keep = [c for c in st.citations if 1 <= c <= n_sources]
        dropped += [{"statement": i, "source": c} for c in st.citations if not 1 <= c <= n_sources]
        statements.append(Statement(st.text, keep))
    return CitedResponse(statements), dropped


# --------------------------------------------------------------------------- orchestration


def _sources_json(qc: QuestionContext, main: VectorIndex) -> list[dict]:
    return [
        {"number": i, "chunk_id": p.chunk_id, "doc_id": p.doc_id,
         "index": "main" if p.chunk_id in main.chunks else "pubmed", "text": p.text}
        for i, p in enumerate(qc.passages, start=1)
    ]


def strip_timestamps(obj):
    """Copy of a transcript without wall-clock fields (keys ending in ``_at`` or named ``timestamp``)."""
    if isinstance(obj, dict):
        return {k: strip_timestamps(v) for k, v in obj.items() if not (k.endswith("_at") or k == "timestamp")}
    if isinstance(obj, list):
        return [strip_timestamps(v) for v in obj]
    return obj


@contextmanager
def _stage(transcript: dict, name: str):
    rec = {"stage": name, "started_at": _now()}
    transcript.setdefault("stages", []).append(rec)
    with provider_scope(stage=name):
        try:
            yield
        finally:
            rec["finished_at"] = _now()


def run_case(case: PatientCase, registry: Registry, index: VectorIndex, config: AgentConfig,
             providers: Providers) -> FinalResponse:
    log = providers.chat.log
    log_start = len(log.entries)
    t: dict[str, Any] = {
        "schema_version": TRANSCRIPT_VERSION,
        "case": case.to_json(),
        "config": config.to_json(),
        "models": {"chat": providers.chat.model, "vision": providers.vision.model,
                   "temperature": providers.chat.temperature, "embedder": providers.embedder.name},
        "status": "running",
        "error": None,
        "started_at": _now(),
    }
    stage = partial(_stage, t)
    tools_text = registry.describe()
    t["tools_text"] = tools_text
    qc = None
    ephemeral: list[VectorIndex] = []

    def finish(status, error=None, cited=None, suggestions="", text=""):
        t["status"] = status
        t["error"] = error
        t["provider_calls"] = log.entries[log_start:]
        t["finished_at"] = _now()
        return FinalResponse(status, cited, suggestions, text, t, qc, ephemeral)

    try:
        # tools: plan + execute, restarting from scratch after a refusal
        t["attempts"] = []
        results: list[ToolResult] = []
        for attempt in range(1, max(1, config.refusal_retries) + 1):
            rec: dict[str, Any] = {"attempt": attempt}
            t["attempts"].append(rec)
            with stage("plan"):
                if config.forced_plan is not None:
                    plan = ExecutionPlan(list(config.forced_plan.calls), config.max_calls)
                    validate_plan(plan, registry)
                else:
                    plan = plan_actions(case, registry, providers.chat, config.max_calls)
            rec["plan"] = plan.to_json()
            try:
                with stage("tools"):
                    results = execute_plan(plan, registry, workers=config.tool_workers)
            except RunRefused as exc:
                rec["tool_results"] = [r.to_json() for r in exc.results]
                rec["outcome"] = "refused"
                rec["error"] = str(exc)
                logger.warning("attempt %d discarded: %s", attempt, exc)
                continue
            rec["tool_results"] = [r.to_json() for r in results]
            rec["outcome"] = "ok"
            break
        else:
            t["plan"] = t["attempts"][-1]["plan"]
            t["tool_results"] = t["attempts"][-1]["tool_results"]
            return finish("refused", t["attempts"][-1]["error"])
        t["plan"] = rec["plan"]
        t["tool_results"] = rec["tool_results"]
        tool_out = tool_outputs_text(results)
        t["tool_outputs_text"] = tool_out
        for r in results:
            raw = r.artifacts.get("raw")
            if isinstance(raw, PubMedResult) and len(raw.index):
                ephemeral.append(raw.index)

        with stage("subqueries"):
            subqueries = generate_subqueries(case.context, case.question, tool_out, providers.chat, config.retrieval)
        t["subqueries"] = [asdict(s) for s in subqueries]

        with stage("retrieval"):
            reranker = providers.reranker or make_reranker(config.retrieval)
            qc, per_sq = retrieve_context([index, *ephemeral], subqueries, config.retrieval, providers.embedder, reranker)
        t["retrieval"] = [
            {"subquery": sq.text, "passages": [{"chunk_id": p.chunk_id, "retrieval_score": p.retrieval_score,
                                                 "rerank_score": p.rerank_score} for p in plist]}
            for sq, plist in zip(subqueries, per_sq)
        ]
        t["sources"] = _sources_json(qc, index)

        with stage("strategy"):
            strategy = generate_strategy(case, tool_out, qc, providers.chat, tools_text)
        t["strategy"] = asdict(strategy)

        def generate(feedback=""):
            return generate_cited_response(case, tool_out, qc, strategy, providers.chat, tools_text, feedback)

        with stage("cited_response"):
            cited = generate()
        t["cited_response_initial"] = cited.to_json()

        with stage("self_check"):
            check = self_check_citations(cited, qc, providers.chat, repair=generate)
        t["verdicts"] = check.verdicts
        t["repaired"] = check.repaired
        final, dropped = drop_invalid_citations(check.response, len(qc))
        t["cited_response"] = final.to_json()
        t["dropped_citations"] = dropped
        t["generator_calls"] = 2 if check.repaired else 1

        with stage("suggestions"):
            suggestions = generate_suggestions(final, tools_text, tool_out, providers.chat)
        t["suggestions"] = suggestions
        text = concat_final(final, suggestions)
        t["final_text"] = text
        return finish("ok", None, final, suggestions, text)
    except (OncoAgentError, ValueError) as exc:
        logger.error("case %s failed: %s", case.case_id, exc)
        return finish("failed", f"{type(exc).__name__}: {exc}")


def write_transcript(transcript: dict, path) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, json.dumps(transcript, ensure_ascii=False, indent=2) + "\n")


# --------------------------------------------------------------------------- replay


def replay_transcript(transcript: dict) -> list[str]:
    """Re-run the generation stages from a transcript's recorded provider answers.

    Returns the list of mismatches between the replayed and recorded artifacts
    (empty when the run replays exactly).
    """
    if transcript.get("schema_version") != TRANSCRIPT_VERSION:
        raise OncoAgentError(f"unsupported transcript version {transcript.get('schema_version')!r}")
    if transcript.get("status") != "ok":
        return [] if "attempts" in transcript else ["transcript has no recorded attempts"]
    script: dict[str, list[str]] = {}
    for call in transcript.get("provider_calls", []):
        if "response" in call:
            script.setdefault(call["template_id"], []).append(call["response"])
        else:
            script.setdefault(call["template_id"], []).append({"raise": call.get("error", "provider error")})
    provider = ScriptedProvider(script, temperature=transcript["models"]["temperature"])
    case_json = transcript["case"]
    case = PatientCase(case_json["case_id"], case_json["context"], case_json["question"], case_json["attachments"])
    cfg = transcript["config"]["retrieval"]
    rcfg = RetrievalConfig(**cfg)
    qc = QuestionContext([RankedPassage(s["chunk_id"], s["text"], {"doc_id": s["doc_id"]}, 0.0) for s in transcript["sources"]])
    tool_out = transcript["tool_outputs_text"]
    tools_text = transcript.get("tools_text", "")
    diffs = []

    sub_answers = script.get("subqueries", [])
    if sub_answers and isinstance(sub_answers[0], str):
        replayed = parse_subqueries(sub_answers[0], rcfg.max_subqueries) or [case.question.strip()]
        if replayed != [s["text"] for s in transcript["subqueries"]]:
            diffs.append("subqueries")
    strategy = generate_strategy(case, tool_out, qc, provider, tools_text)
    if asdict(strategy) != transcript["strategy"]:
        diffs.append("strategy")

    def generate(feedback=""):
        return generate_cited_response(case, tool_out, qc, strategy, provider, tools_text, feedback)

    cited = generate()
    if cited.to_json() != transcript["cited_response_initial"]:
        diffs.append("cited_response_initial")
    check = self_check_citations(cited, qc, provider, repair=generate)
    if check.verdicts != transcript["verdicts"]:
        diffs.append("verdicts")
    final, _ = drop_invalid_citations(check.response, len(qc))
    if final.to_json() != transcript["cited_response"]:
        diffs.append("cited_response")
    suggestions = generate_suggestions(final, tools_text, tool_out, provider)
    if concat_final(final, suggestions) != transcript["final_text"]:
        diffs.append("final_text")
    return diffs
