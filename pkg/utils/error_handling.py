"""Shared error handling utilities with user-friendly messaging."""

from __future__ import annotations

import functools
import logging
from typing import Any, Callable, Dict, Tuple, Type, TypeVar
from typing import ParamSpec

logger = logging.getLogger(__name__)

P = ParamSpec("P")
R = TypeVar("R")


class UserFacingError(Exception):
    """Exception type that is safe to display directly to end users."""

    def __init__(
        self,
        message: str,
        *,
        suggestion: str | None = None,
        original_error: Exception | None = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        self.suggestion = suggestion
        self.original_error = original_error

    @property
    def detail(self) -> str:
        """Message plus the wrapped exception, for logs and sweep tables."""
        if self.original_error is None:
            return self.message
        return f"{self.message}: {self.original_error.__class__.__name__}: {self.original_error}"


class SpecValidationError(UserFacingError, ValueError):
    """A problem instance or configuration violates its invariants."""


class ShapeMismatchError(UserFacingError, ValueError):
    """Operands of a tensor primitive have incompatible shapes."""


class NonFiniteError(UserFacingError, FloatingPointError):
    """NaN or infinity reached a place that requires finite values."""


class DatasetValidationError(UserFacingError, ValueError):
    """A dataset file is malformed or holds out-of-range rows."""


class ConfigMismatchError(UserFacingError, ValueError):
    """A checkpoint does not belong to the problem it is evaluated on."""


# 按异常类型匹配：(异常类型, 转换后的错误类, 提示信息, 建议)
_CLASSIFIED: Tuple[Tuple[Tuple[Type[BaseException], ...], Type[UserFacingError], str, str], ...] = (
    (
        (FileNotFoundError, PermissionError, IsADirectoryError),
        UserFacingError,
        "File operation failed",
        "Check the path and that MODADD_OUTPUT_ROOT is writable",
    ),
    (
        (FloatingPointError, OverflowError),
        NonFiniteError,
        "Numerical overflow or non-finite value encountered",
        "Lower the learning rate or check the input ranges",
    ),
    (
        (MemoryError,),
        UserFacingError,
        "Ran out of memory",
        "Use a smaller batch size, model, or sample count",
    ),
)


def safe_call(
    *,
    fallback: Any | None = None,
    error_message: str = "Operation failed",
) -> Callable[[Callable[P, R]], Callable[P, R]]:
    """
    Decorator converting unexpected exceptions into ``UserFacingError``.

    Args:
        fallback: Optional value returned instead of raising.
        error_message: Message used when the failure cannot be classified.
    """

    def decorator(func: Callable[P, R]) -> Callable[P, R]:
        @functools.wraps(func)
        def wrapper(*args: P.args, **kwargs: P.kwargs) -> R:
            try:
                return func(*args, **kwargs)
            except UserFacingError as exc:
                if fallback is None:
                    raise
                logger.warning("%s failed (%s); using fallback", func.__name__, exc.message)
                return fallback  # type: ignore[return-value]
            except Exception as exc:  # pylint: disable=broad-except
                logger.error(
                    "Error in %s: %s: %s",
                    func.__name__,
                    exc.__class__.__name__,
                    exc,
                    exc_info=logger.isEnabledFor(logging.DEBUG),
                )
                if fallback is not None:
                    return fallback  # type: ignore[return-value]
                raise convert_error(exc, error_message) from exc

        return wrapper

    return decorator


def convert_error(error: Exception, default_message: str) -> UserFacingError:
    """Map a technical exception to a user-facing one with a hint."""

    for types, error_cls, message, suggestion in _CLASSIFIED:
        if isinstance(error, types):
            return error_cls(message, suggestion=suggestion, original_error=error)

    text = str(error)
    if "JSON" in text or error.__class__.__name__ == "JSONDecodeError":
        return UserFacingError(
            "Could not parse a JSON header or report",
            suggestion="The file may be truncated; regenerate it",
            original_error=error,
        )
    if "non-finite" in text:
        return NonFiniteError(
            "Non-finite value encountered", suggestion="Lower the learning rate", original_error=error
        )
    hints: Dict[str, str] = {
        "ValidationError": "Check the flag values against `--help`",
    }
    return UserFacingError(
        default_message,
        suggestion=hints.get(
            error.__class__.__name__, "Re-run with MODADD_LOG_LEVEL=DEBUG for the full traceback"
        ),
        original_error=error,
    )


__all__ = [
    "ConfigMismatchError",
    "DatasetValidationError",
    "NonFiniteError",
    "ShapeMismatchError",
    "SpecValidationError",
    "UserFacingError",
    "convert_error",
    "safe_call",
]
