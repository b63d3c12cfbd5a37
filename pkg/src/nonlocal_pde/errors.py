"""Exception hierarchy shared by every module.

Each concrete class carries an ``exit_code`` so the command line front-end can
map failures to distinct process statuses.
"""

from __future__ import annotations


class NonlocalPDEError(Exception):
    exit_code = 1


class ConfigurationError(NonlocalPDEError, ValueError):
    """Invalid grid parameters or run configuration."""

    exit_code = 2


class ArgumentError(NonlocalPDEError, ValueError):
    """Malformed arguments to an operation (shape, missing inputs, ...)."""

    exit_code = 9


class ModelError(NonlocalPDEError):
    """The problem violates a structural assumption such as ellipticity."""

    exit_code = 3


class ConvergenceError(NonlocalPDEError):
    """A fixed-point iteration failed on the smallest admissible window."""

    exit_code = 4

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class NumericalError(NonlocalPDEError):
    """Singular linear system, non-finite values or path blow-up."""

    exit_code = 5


class ConsistencyError(NonlocalPDEError):
    exit_code = 6


class ManufactureError(NonlocalPDEError):
    exit_code = 7


class GridIndexError(NonlocalPDEError, IndexError):
    """Access outside the triangle ``i_s <= i_t``."""

    exit_code = 8
