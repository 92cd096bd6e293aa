"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class ConsmError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ConsmError):
    """Invalid or inconsistent run configuration."""


class DataError(ConsmError):
    """Input data violates a structural contract."""


class DimensionError(ConsmError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NumericalError(ConsmError, ArithmeticError):
    """A computation produced NaN/Inf or could not be stabilised."""


class ContractError(ConsmError):
    """A call violated a documented precondition."""


class OptimizerError(NumericalError):
    def __init__(self, param: str, message: str = "non-finite gradient"):
        self.param = param
        super().__init__(f"{message} for parameter {param!r}")


class BundleError(DataError):
    """Malformed graph bundle. Carries the offending file and line (1-based, 0 if n/a)."""

    def __init__(self, kind: str, file: str, line: int, detail: str):
        self.kind = kind
        self.file = file
        self.line = line
        where = f"{file}:{line}" if line else file
        super().__init__(f"[{kind}] {where}: {detail}")


class GenerationError(DataError):
    """Synthetic graph parameters are infeasible."""


class EmptyClassError(DataError):
    def __init__(self, cls: int):
        self.cls = cls
        super().__init__(f"class {cls} has no training node; cannot build its reference point")


class SamplingError(DataError):
    """Pair sampling is impossible for the given training split."""


class EvaluationError(ConsmError):
    """Metric is undefined for the given input."""
