"""Exception hierarchy shared by every module."""


class ArgoSSMError(Exception):
    """Base class for all package errors."""


class ParameterError(ArgoSSMError, ValueError):
    """Model parameters violate their constraints."""


class ConfigurationError(ArgoSSMError, ValueError):
    """A run or model was configured inconsistently."""


class DomainError(ArgoSSMError, ValueError):
    """A query falls outside the domain where a field is defined."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class InferenceError(ArgoSSMError, RuntimeError):
    """Numerical inference broke down at a specific index."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class LoadError(ArgoSSMError, ValueError):
    """An input file does not conform to its documented format."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
