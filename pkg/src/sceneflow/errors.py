"""Exception hierarchy shared by the library and the command line."""


class SceneFlowError(Exception):
    """Base class; ``code`` is the token printed by the CLI."""

    code = "ERROR"
    exit_status = 1


class InvalidInputError(SceneFlowError, ValueError):
    code = "INVALID_INPUT"
    exit_status = 2


class FormatError(SceneFlowError, ValueError):
    """A file could not be parsed. The message always names the path."""

    code = "FORMAT"
    exit_status = 3

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class RegistrationError(SceneFlowError, RuntimeError):
    code = "REGISTRATION"
    exit_status = 4


class NumericalError(SceneFlowError, FloatingPointError):
    """Non-finite value produced during optimization."""

    code = "NUMERICAL"
    exit_status = 5

    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"non-finite value in loss component '{component}'")
