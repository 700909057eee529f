"""Exception hierarchy shared across the engine."""


class OncoAgentError(Exception):
    """Base class for every engine error."""


class CorpusError(OncoAgentError):
    pass


class TEIParseError(CorpusError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class EmptyDocumentError(CorpusError):
    pass


class CorpusFormatError(CorpusError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VectorIndexError(OncoAgentError):
    """Index construction, search or persistence failure."""


class IndexFormatError(VectorIndexError):
    pass


class DimensionError(VectorIndexError, ValueError):
    pass


class ProviderError(OncoAgentError):
    """A remote or scripted provider failed to answer."""


class RetryableError(ProviderError):
    """Transient transport failure; callers may retry."""


class IntegrityError(ProviderError):
    """A provider returned data violating its declared contract."""


class PlanError(OncoAgentError):
    pass


class CycleError(PlanError):
    pass


class ToolError(OncoAgentError):
    pass


class ToolRefused(ToolError):
    """The vision provider refused to process the request."""


class RunRefused(OncoAgentError):
    """A tool refusal aborted the whole execution plan."""

    def __init__(self, message: str, results=None):
        super().__init__(message)
        self.results = results or []


class AnnotationError(OncoAgentError):
    pass
