class DualCtError(Exception):
    """Base error; `exit_code` is what the command line reports for it."""

    exit_code = 2

    def __init__(self, message, original_exception=None):
        self.message = message
        if original_exception:
            self.message = f"{self.message}: {original_exception}"
        self.original_exception = original_exception

        super().__init__(self.message)


class DomainError(DualCtError):
    pass


class ShapeError(DualCtError):
    pass


class ConfigurationError(DualCtError):
    pass


class ContainerFormatError(DualCtError):
    def __init__(self, path, message, original_exception=None):
        self.path = path
        super().__init__(f"Invalid container {path} - {message}", original_exception)


class NumericalError(DualCtError):
    exit_code = 3


class DivergenceError(NumericalError):
    """Raised when an iterative solver keeps increasing its objective.

    The last iterate is kept on `partial` so callers can still inspect it.
    """

    def __init__(self, message, partial=None, history=None):
        self.partial = partial
        self.history = history if history is not None else []
        super().__init__(message)
