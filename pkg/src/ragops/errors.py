"""Exception taxonomy shared across modules."""


class RagOpsError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(RagOpsError):
    """Invalid or missing configuration."""


class QuarantineError(RagOpsError):
    """Item cannot be normalized and must be quarantined, not dropped."""


class UnsupportedFormat(RagOpsError):
    """Declared format has no registered converter."""


class SourceUnreachable(RagOpsError):
    """Source could not be contacted; carries a backoff hint in seconds."""

    def __init__(self, message: str, retry_after: float = 30.0):
        super().__init__(message)
        self.retry_after = retry_after


class NotFound(RagOpsError):
    """Referenced entity does not exist."""


class AccessDenied(RagOpsError):
    """Role is not allowed to read the requested entity."""


class InvalidTransition(RagOpsError):
    """State machine transition not permitted from the current state."""


class InvalidTarget(RagOpsError):
    """Operation target exists but is not a valid target (e.g. rollback
    to the already-live version)."""


class OutOfRange(RagOpsError):
    """Sequence number beyond the current high-water mark."""


class PolicyViolation(RagOpsError):
    """Operation contradicts a verification decision or policy guard."""


class StaleFeed(RagOpsError):
    """Change feed does not start at the index's covered sequence."""


class EmptyText(RagOpsError):
    """Text has no tokens after tokenization."""


class RejectedInput(RagOpsError):
    """Query rejected by the input rail chain."""

    def __init__(self, message: str, reason: str = ""):
        super().__init__(message)
        self.reason = reason or message


class RetrievalUnavailable(RagOpsError):
    """All retrieval routes failed."""


class GenerationUnavailable(RagOpsError):
    """LLM client transport failure (retryable)."""


class EmptyGeneration(RagOpsError):
    """LLM returned an empty completion."""


class UndefinedMetric(RagOpsError):
    """Metric is undefined for the given inputs (e.g. empty relevant set)."""


class EmptyWindow(RagOpsError):
    """No paired observations in the requested window."""


class NotActive(RagOpsError):
    """Deployment is not active."""


class Blocked(RagOpsError):
    """Stage advancement blocked by a pending breach."""
