"""Exception types shared across modules."""


class NscError(Exception):
    pass


class InvalidParameterError(NscError, ValueError):
    pass


class ShapeError(NscError, ValueError):
    pass


class ConfigurationError(NscError, ValueError):
    pass


class DomainError(NscError, ValueError):
    pass


class InvariantViolationError(NscError, RuntimeError):
    pass


class BoundInapplicableError(NscError, ValueError):
    pass


class NonFiniteLossError(NscError, FloatingPointError):
    """Loss evaluated to a non-finite value; ``index`` is the first bad sample."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(NscError, FloatingPointError):
    """State became non-finite or left the divergence guard.

    ``step`` is the offending step index; ``trajectory`` (when set) holds the
    partial path up to the last finite state.
    """

    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory
