"""Exception hierarchy shared by every quoter module."""

from __future__ import annotations


class QuoterError(ValueError):
    """Base class for all domain errors raised by this package."""


class InvalidParams(QuoterError):
    pass


class InvalidTime(QuoterError):
    pass


class DivergentHorizon(QuoterError):
    """The discounted infinite-horizon utility integral does not converge."""


class NonpositiveLogArgument(QuoterError):
    """A stationary reservation price needs the log of a non-positive number.

    Only happens when the post-trade inventory (q+1 or q-1) leaves the
    convergence domain, so it is reported apart from ``DivergentHorizon``.
    """


class NegativeOffset(QuoterError):
    pass


class ValueOverflow(QuoterError, OverflowError):
    """A closed form would overflow double precision."""


class CFLViolation(QuoterError):
    def __init__(self, message: str, required_n_t: int):
        super().__init__(message)
        self.required_n_t = required_n_t


class GridTooSmall(QuoterError):
    pass


class NonFiniteField(QuoterError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class OutOfGrid(QuoterError):
    pass


class BracketMiss(QuoterError):
    pass


class InvalidConfig(QuoterError):
    pass
