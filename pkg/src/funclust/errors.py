"""Exception types raised across the package."""

from __future__ import annotations


class FunclustError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(FunclustError, ValueError):
    """A basis, model or generator specification is malformed."""


class DomainError(FunclustError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class RankError(FunclustError, ValueError):
    """A matrix that must have full column rank does not."""

    def __init__(self, message: str, subject_id=None):
        super().__init__(message)
        self.subject_id = subject_id


class ModelMismatchError(FunclustError, ValueError):
    """Data and parameters disagree on the covariate dimension."""


class MissingCovariateError(FunclustError, KeyError):
    """A required external covariate was not supplied."""

    def __init__(self, field: str, subject_id=None):
        super().__init__(field)
        self.field = field
        self.subject_id = subject_id

    def __str__(self) -> str:
        where = f" for subject {self.subject_id!r}" if self.subject_id is not None else ""
        return f"missing covariate {self.field!r}{where}"


class IngestError(FunclustError, ValueError):
    """Input files could not be parsed into subjects."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(FunclustError, ArithmeticError):
    """A computation produced non-finite or unfactorizable values."""

    def __init__(self, message: str, subject_id=None, iteration: int | None = None):
        parts = [message]
        if subject_id is not None:
            parts.append(f"subject={subject_id!r}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        super().__init__(" ".join(parts))
        self.subject_id = subject_id
        self.iteration = iteration
