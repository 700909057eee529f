from .builtins import (
    AttachmentResolver,
    PubMedResult,
    RefusalDetector,
    build_registry,
    calculator,
    histo_classify,
    mask_area,
    oncokb_lookup,
    pubmed_search,
    segment_area,
    vision_report,
    web_search,
)
from .clients import Clients
from .executor import ExecutionPlan, ToolCall, ToolResult, execute_plan, substitute, validate_plan
from .registry import Registry, Tool, ToolSpec

__all__ = [
    "AttachmentResolver",
    "Clients",
    "ExecutionPlan",
    "PubMedResult",
    "RefusalDetector",
    "Registry",
    "Tool",
    "ToolCall",
    "ToolResult",
    "ToolSpec",
    "build_registry",
    "calculator",
    "execute_plan",
    "histo_classify",
    "mask_area",
    "oncokb_lookup",
    "pubmed_search",
    "segment_area",
    "substitute",
    "validate_plan",
    "vision_report",
    "web_search",
]
