"""Exception types raised across the package."""


class LGSMError(Exception):
    """Base class for all package errors."""


class InvalidEdge(LGSMError, ValueError):
    pass


class InvalidParams(LGSMError, ValueError):
    pass


class DisconnectedGraph(LGSMError, ValueError):
    pass


class ShapeError(LGSMError, ValueError):
    pass


class ZeroInfluenceRow(LGSMError, ValueError):
    """The operator row at the queried node sums to zero."""


class NonFiniteActivation(LGSMError, FloatingPointError):
    """A forward pass produced NaN or inf.

    ``epoch`` and ``batch`` are filled in by the trainer when known.
    """

    def __init__(self, message, epoch=None, batch=None, report=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.report = report


class EmptyBatch(LGSMError, ValueError):
    pass


class DegenerateLabels(LGSMError, ValueError):
    pass


class DatasetError(LGSMError, ValueError):
    """Malformed dataset record; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
