"""Validation and execution of tool-call plans (a DAG with ``$call_id.field`` references)."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from graphlib import CycleError as _GraphCycle
from graphlib import TopologicalSorter
from pathlib import Path
from typing import Any

from ..errors import CycleError, PlanError, RunRefused, ToolError, ToolRefused
from ..providers import deferred_log, flush_deferred, provider_scope
from .registry import Registry

logger = logging.getLogger(__name__)

MAX_CALLS = 10

_REF_RE = re.compile(r"^\$([A-Za-z0-9_\-]+)(?:\.([A-Za-z0-9_.\-]+))?$")


@dataclass
class ToolCall:
    call_id: str
    tool: str
    args: dict = field(default_factory=dict)
    depends_on: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"call_id": self.call_id, "tool": self.tool, "args": self.args, "depends_on": list(self.depends_on)}


@dataclass
class ExecutionPlan:
    calls: list[ToolCall] = field(default_factory=list)
    max_calls: int = MAX_CALLS

    def to_json(self) -> list[dict]:
        return [c.to_json() for c in self.calls]

    @classmethod
    def from_json(cls, data, max_calls: int = MAX_CALLS) -> "ExecutionPlan":
        if isinstance(data, dict):
            data = data.get("calls", [])
        if not isinstance(data, list):
            raise PlanError("plan must be a list of calls or {'calls': [...]}")
        calls = []
        for i, c in enumerate(data):
            if not isinstance(c, dict) or "tool" not in c:
                raise PlanError(f"call #{i + 1} is not an object with a 'tool'")
            args = c.get("args", c.get("arguments", {})) or {}
            if not isinstance(args, dict):
                raise PlanError(f"call #{i + 1}: args must be an object")
            calls.append(ToolCall(str(c.get("call_id") or c.get("id") or f"c{i + 1}"), c["tool"], args,
                                  [str(d) for d in c.get("depends_on", [])]))
        return cls(calls, max_calls)

    @classmethod
    def load(cls, path, max_calls: int = MAX_CALLS) -> "ExecutionPlan":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")), max_calls)


@dataclass
class ToolResult:
    call_id: str
    tool: str
    status: str  # ok | error | refused
    output: Any = None
    summary: str = ""
    error: str | None = None
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"call_id": self.call_id, "tool": self.tool, "status": self.status,
                "output": self.output, "summary": self.summary, "error": self.error}


def _refs(value) -> list[tuple[str, str | None]]:
    if isinstance(value, str):
        m = _REF_RE.match(value)
        return [(m.group(1), m.group(2))] if m else []
    if isinstance(value, dict):
        return [r for v in value.values() for r in _refs(v)]
    if isinstance(value, (list, tuple)):
        return [r for v in value for r in _refs(v)]
    return []


def validate_plan(plan: ExecutionPlan, registry: Registry) -> dict[str, set[str]]:
    """Check the plan and return each call's effective dependencies (declared plus referenced)."""
    if len(plan.calls) > plan.max_calls:
        raise PlanError(f"plan has {len(plan.calls)} calls; at most {plan.max_calls} are allowed per invocation")
    ids = [c.call_id for c in plan.calls]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise PlanError(f"duplicate call ids: {dupes}")
    unknown = sorted({c.tool for c in plan.calls if c.tool not in registry})
    if unknown:
        raise PlanError(f"plan uses unregistered tool(s): {unknown}")
    known = set(ids)
    deps: dict[str, set[str]] = {}
    for c in plan.calls:
        d = set(c.depends_on) | {ref for ref, _ in _refs(c.args)}
        missing = sorted(d - known)
        if missing:
            raise PlanError(f"call {c.call_id!r} depends on unknown call(s) {missing}")
        deps[c.call_id] = d
    try:
        tuple(TopologicalSorter(deps).static_order())
    except _GraphCycle as exc:
        cycle = exc.args[1] if len(exc.args) > 1 else []
        raise CycleError(f"plan contains a dependency cycle: {' -> '.join(map(str, cycle))}") from None
    return deps


def _lookup(output, path: str | None, ref: str):
    if path is None:
        return output
    cur = output
    for part in path.split("."):
        if isinstance(cur, dict) and part in cur:
            cur = cur[part]
        elif isinstance(cur, list) and part.isdigit() and int(part) < len(cur):
            cur = cur[int(part)]
        else:
            raise ToolError(f"cannot resolve {ref!r}: no field {part!r} in output")
    return cur


def substitute(value, outputs: dict[str, Any]):
    """Replace every ``$call_id[.field]`` string with the referenced output value."""
    if isinstance(value, str):
        m = _REF_RE.match(value)
        if not m:
            return value
        cid, path = m.groups()
        if cid not in outputs:
            raise ToolError(f"cannot resolve {value!r}: call {cid!r} has no output")
        return _lookup(outputs[cid], path, value)
    if isinstance(value, dict):
        return {k: substitute(v, outputs) for k, v in value.items()}
    if isinstance(value, list):
        return [substitute(v, outputs) for v in value]
    return value


def _run_one(call: ToolCall, registry: Registry, outputs: dict[str, Any]) -> ToolResult:
    tool = registry[call.tool]
    try:
        args = substitute(call.args, outputs)
        raw, output = tool.invoke(args)
        summary = tool.summarize(output) or f"{call.tool} completed."
        return ToolResult(call.call_id, call.tool, "ok", output, summary, artifacts={"raw": raw})
    except ToolRefused as exc:
        return ToolResult(call.call_id, call.tool, "refused", None, "", str(exc))
    except Exception as exc:  # tool failures are recorded, not raised
        logger.warning("tool call %s (%s) failed: %s", call.call_id, call.tool, exc)
        return ToolResult(call.call_id, call.tool, "error", None, "", f"{type(exc).__name__}: {exc}")


def execute_plan(plan: ExecutionPlan, registry: Registry, workers: int = 4) -> list[ToolResult]:
    """Run independent calls concurrently and dependent calls once their inputs exist.

    Results come back in plan order. A failed call fails its dependents without
    stopping independent branches; a refused call aborts the run with
    :class:`RunRefused`.
    """
    deps = validate_plan(plan, registry)
    by_id = {c.call_id: c for c in plan.calls}
    order = [c.call_id for c in plan.calls]
    results: dict[str, ToolResult] = {}
    logs: dict[str, list] = {}
    outputs: dict[str, Any] = {}
    refused: ToolResult | None = None

    def work(call: ToolCall, snapshot: dict):
        with deferred_log() as pending, provider_scope(stage="tools", call_id=call.call_id):
            res = _run_one(call, registry, snapshot)
        return res, pending

    pending_ids = list(order)
    running: dict[Future, str] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while pending_ids or running:
            if refused is None:
                for cid in list(pending_ids):
                    if not deps[cid] <= results.keys():
                        continue
                    pending_ids.remove(cid)
                    bad = sorted(d for d in deps[cid] if results[d].status != "ok")
                    if bad:
                        results[cid] = ToolResult(cid, by_id[cid].tool, "error", None, "",
                                                  f"dependency {', '.join(bad)} did not succeed")
                        continue
                    running[pool.submit(work, by_id[cid], dict(outputs))] = cid
            if not running:
                if refused is not None or not pending_ids:
                    break
                continue
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                cid = running.pop(fut)
                res, pending = fut.result()
                results[cid] = res
                logs[cid] = pending
                if res.status == "ok":
                    outputs[cid] = res.output
                elif res.status == "refused" and refused is None:
                    refused = res

    for cid in order:
        flush_deferred(logs.get(cid, []))
    ordered = [results[c] for c in order if c in results]
    if refused is not None:
        raise RunRefused(f"call {refused.call_id} refused: {refused.error}", ordered)
    return ordered
