"""Exception hierarchy shared across the control plane."""


class EdgeOffloadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EdgeOffloadError):
    pass


class DomainError(EdgeOffloadError, ValueError):
    pass


class ResourceError(DomainError):
    """A resource vector operation would produce a negative component."""


class SubmissionError(EdgeOffloadError):
    pass


class ConsistencyError(EdgeOffloadError):
    """Internal state machine invariant violated."""


class ValidationError(EdgeOffloadError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NoCapacityError(EdgeOffloadError):
    pass


class NotLeaderError(EdgeOffloadError):
    def __init__(self, message, leader=None):
        self.leader = leader
        super().__init__(message)


class ProtocolError(EdgeOffloadError):
    pass


class FramingError(ProtocolError):
    pass


class OversizeError(ProtocolError):
    pass


class ParseError(ProtocolError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")
