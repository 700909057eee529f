"""Tool specifications in function-calling JSON shape and the registry that binds them to code."""

from __future__ import annotations

import inspect
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from ..errors import ToolError

JSON_TYPES = {"string", "number", "integer", "boolean", "array", "object"}


@dataclass
class ToolSpec:
    name: str
    description: str
    params: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for pname, p in self.params.items():
            if p.get("required", False) and p.get("type") not in JSON_TYPES:
                raise ValueError(f"{self.name}.{pname}: required parameter needs a JSON type")

    @property
    def required(self) -> list[str]:
        return [n for n, p in self.params.items() if p.get("required", False)]

    def to_json(self) -> dict:
        props = {}
        for pname, p in self.params.items():
            props[pname] = {k: v for k, v in p.items() if k != "required"}
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {"type": "object", "properties": props, "required": self.required},
        }


@dataclass
class Tool:
    """A spec bound to a callable.

    ``func`` receives the call's arguments as keyword arguments; any clients it needs
    are bound beforehand (e.g. with ``functools.partial``). ``summarize`` turns the
    output into the free-text summary handed to the language model.
    """

    spec: ToolSpec
    func: Callable[..., Any]
    summarize: Callable[[Any], str] = lambda out: json.dumps(out, ensure_ascii=False)
    to_output: Callable[[Any, dict], Any] = lambda raw, args: raw

    def invoke(self, args: dict) -> tuple[Any, Any]:
        missing = [r for r in self.spec.required if r not in args]
        if missing:
            raise ToolError(f"{self.spec.name}: missing required argument(s) {missing}")
        unknown = [a for a in args if a not in self.spec.params]
        if unknown:
            raise ToolError(f"{self.spec.name}: unknown argument(s) {unknown}")
        raw = self.func(**args)
        return raw, self.to_output(raw, args)


class Registry:
    def __init__(self, tools: Iterable[Tool] = ()):
        self._tools: dict[str, Tool] = {}
        for t in tools:
            self.register(t)

    def register(self, tool: Tool) -> None:
        if tool.spec.name in self._tools:
            raise ValueError(f"duplicate tool name {tool.spec.name!r}")
        self._tools[tool.spec.name] = tool

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __getitem__(self, name: str) -> Tool:
        return self._tools[name]

    def __len__(self) -> int:
        return len(self._tools)

    def names(self) -> list[str]:
        return list(self._tools)

    def specs_json(self) -> list[dict]:
        return [t.spec.to_json() for t in self._tools.values()]

    def describe(self) -> str:
        return "\n".join(f"- {t.spec.name}: {t.spec.description}" for t in self._tools.values())

    def self_check(self) -> list[str]:
        """Mismatches between each spec's required params and its callable's unbound parameters."""
        problems = []
        for name, tool in self._tools.items():
            sig = inspect.signature(tool.func)
            needed = {
                p.name
                for p in sig.parameters.values()
                if p.default is inspect.Parameter.empty
                and p.kind not in (inspect.Parameter.VAR_POSITIONAL, inspect.Parameter.VAR_KEYWORD)
            }
            declared = set(tool.spec.required)
            if needed != declared:
                problems.append(f"{name}: spec requires {sorted(declared)}, callable requires {sorted(needed)}")
            extra = set(tool.spec.params) - set(sig.parameters)
            if extra:
                problems.append(f"{name}: spec declares unknown params {sorted(extra)}")
        return problems
