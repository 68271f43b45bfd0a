"""Exception hierarchy shared across the pipeline."""


class AgentError(Exception):
    """Base class for every error raised by this package."""


# gateway


class TransportError(AgentError):
    """Network failure, timeout or malformed HTTP envelope."""


class FormatError(AgentError):
    """A model reply failed schema validation."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class IndexOutOfRange(FormatError):
    """An index selection reply fell outside the allowed range."""


class ScriptMiss(AgentError):
    """A scripted backend has no entry for the request."""


# perception


class DetectorUnavailable(AgentError):
    pass


class EmptyResult(AgentError):
    """The detector ran but found nothing for ``label``."""

    def __init__(self, label: str):
        self.label = label
        super().__init__(f"no detections for {label!r}")


class BadDepth(AgentError):
    """Depth is non-positive or non-finite (a hole in the depth map)."""


# reasoning


class LoopDetected(AgentError):
    pass


class EpisodeClosed(AgentError):
    """Raised when planning is attempted after a terminal verdict."""


# controller


class UnboundIndex(AgentError):
    pass


class InvalidPair(AgentError):
    pass


# simworld


class PlacementFailure(AgentError):
    pass


class ReachFailure(AgentError):
    pass


class MissingObject(AgentError):
    pass


# harness


class SinkError(AgentError):
    pass


class ConfigError(AgentError):
    pass
