"""Exception hierarchy shared by all aqx modules."""

from __future__ import annotations


class AqxError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for it."""

    exit_code = 3


class ConfigError(AqxError):
    exit_code = 1


# --- expressions -----------------------------------------------------------

class ExprError(AqxError):
    exit_code = 1


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifier(ExprError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class UnboundVariable(ExprError):
    def __init__(self, name: str):
        super().__init__(f"variable {name!r} is not bound")
        self.name = name


class DivisionByZero(ExprError, ZeroDivisionError):
    pass


class NonDifferentiable(ExprError):
    def __init__(self, location: str):
        super().__init__(f"expression is not differentiable in xi at subtree {location}")
        self.location = location


# --- spectral --------------------------------------------------------------

class NonSymmetricSpectrum(AqxError):
    pass


class FieldFormatError(AqxError):
    exit_code = 1


# --- operator / projection -------------------------------------------------

def _fmt(values) -> str:
    return "(" + ", ".join(f"{float(v):.6g}" for v in values) + ")"


class RankError(AqxError):
    exit_code = 2


class ZeroFrequency(AqxError):
    pass


class RankDeficiencyDrift(RankError):
    def __init__(self, x, lam, rank: int, expected: int):
        super().__init__(
            f"numerical rank {rank} at x={_fmt(x)}, lambda={_fmt(lam)} "
            f"differs from reference rank {expected}"
        )
        self.x = tuple(float(v) for v in x)
        self.lam = tuple(float(v) for v in lam)
        self.rank = rank
        self.expected = expected


class ConstantRankViolation(RankError):
    def __init__(self, x, lam, rank: int, expected: int):
        super().__init__(
            f"constant-rank condition violated: rank {rank} at x={_fmt(x)}, "
            f"lambda={_fmt(lam)} (expected {expected})"
        )
        self.x = tuple(float(v) for v in x)
        self.lam = tuple(float(v) for v in lam)
        self.rank = rank
        self.expected = expected


# --- solvers ---------------------------------------------------------------

class NoDescent(AqxError):
    pass


class BoxTooSmall(AqxError):
    pass


class GridIncompatible(AqxError):
    exit_code = 1


class IncompatibleEpsilon(AqxError):
    exit_code = 1


class NotAFreeField(AqxError):
    exit_code = 1
