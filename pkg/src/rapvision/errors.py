class RapError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(RapError, ValueError):
    pass


class InvalidConfig(RapError, ValueError):
    pass


class ProviderError(RapError):
    """A backend call failed (transport, retries exhausted, or bad payload).

    ``cell`` is set when the failure happened while embedding a specific crop.
    """

    def __init__(self, message, *, cell=None, trace=None):
        super().__init__(message)
        self.cell = cell
        self.trace = trace


class ProtocolError(ProviderError):
    """The remote service answered with a body that does not match the wire format."""
