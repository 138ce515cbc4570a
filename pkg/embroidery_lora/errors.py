"""Exception hierarchy shared by every module."""

from typing import Iterable, Optional, Sequence


class EmbroideryLoraError(Exception):
    """Base class for all package errors."""


class ContractViolationError(EmbroideryLoraError, ValueError):
    """A precondition on shapes, dimensions or arguments does not hold."""


class AdapterError(EmbroideryLoraError):
    """Adapter keys, ranks or partitions do not match their target model."""

    def __init__(self, message: str, keys: Iterable[str] = ()) -> None:
        self.keys = sorted(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class CheckpointError(AdapterError):
    """An adapter archive or its manifest is missing, corrupt or foreign."""


class ConfigError(EmbroideryLoraError):
    """Unknown or invalid configuration keys."""

    def __init__(self, message: str, valid_keys: Optional[Sequence[str]] = None):
        self.valid_keys = list(valid_keys or [])
        if self.valid_keys:
            message = f"{message} (valid keys: {', '.join(self.valid_keys)})"
        super().__init__(message)


class BackendUnavailableError(EmbroideryLoraError):
    """An optional backend or remote service is not installed or configured."""


class BackendError(EmbroideryLoraError):
    """A registered backend ran and failed."""

    def __init__(self, backend: str, message: str, log_excerpt: str = "") -> None:
        self.backend = backend
        self.log_excerpt = log_excerpt
        text = f"{backend} backend failed: {message}"
        if log_excerpt:
            text = f"{text}\n--- backend log ---\n{log_excerpt}"
        super().__init__(text)


class DegenerateDecompositionError(EmbroideryLoraError, ArithmeticError):
    """A noise decomposition term has zero norm, so cosine is undefined."""


class NonFiniteLossError(EmbroideryLoraError, ArithmeticError):
    """A training loss or gradient stayed non-finite after every retry."""
