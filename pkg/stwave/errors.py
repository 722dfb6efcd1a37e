"""Exception hierarchy shared by every stwave module."""

from __future__ import annotations


class STWaveError(Exception):
    """Base class for all stwave failures."""

    exit_code: int = 1


# ── Numerical primitives ──────────────────────────────────────────────


class DimensionError(STWaveError, ValueError):
    """Operand shapes do not agree."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class DegenerateMaskError(STWaveError, ValueError):
    """A softmax row has no unmasked entry."""


class SymmetryError(STWaveError, ValueError):
    """Matrix handed to the symmetric eigensolver is not symmetric."""


class ConvergenceError(STWaveError, ArithmeticError):
    """Eigensolver hit its iteration limit."""


class EvaluationError(STWaveError, ArithmeticError):
    """A function under gradient check produced a non-finite value."""


class SequenceTooShortError(STWaveError, ValueError):
    """Time axis is shorter than the wavelet filter."""


# ── Data ──────────────────────────────────────────────────────────────


class DataError(STWaveError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ConsistencyError(DataError):
    """Flow matrix, edge list and declared sizes disagree."""


class InsufficientDataError(DataError):
    """A split segment is too short to hold a single window."""


class ConstantSeriesError(DataError):
    """Training data has zero variance, so z-scoring is undefined."""


# ── Optimization ──────────────────────────────────────────────────────


class NumericError(STWaveError):
    exit_code = 3


class NonFiniteGradientError(NumericError):
    def __init__(self, names: list[str]):
        shown = ", ".join(names[:5]) + (" ..." if len(names) > 5 else "")
        super().__init__(f"Non-finite gradient in {len(names)} parameter(s): {shown}")
        self.names = names


class DivergenceError(NumericError):
    def __init__(self, epoch: int, loss: float, checkpoint: str | None = None):
        msg = f"Training diverged at epoch {epoch} (loss={loss})"
        if checkpoint:
            msg += f"; last good checkpoint: {checkpoint}"
        super().__init__(msg)
        self.epoch = epoch
        self.loss = loss
        self.checkpoint = checkpoint
