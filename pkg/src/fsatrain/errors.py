"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class FSAError(Exception):
    exit_code = 1
    category = "error"


class ConfigurationError(FSAError, ValueError):
    exit_code = 1
    category = "config"


class InputError(FSAError, ValueError):
    exit_code = 1
    category = "input"


class ValidationError(ConfigurationError):
    """A document or object failed schema/invariant checks; ``path`` names the field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class IntegrityError(FSAError):
    exit_code = 2
    category = "integrity"


class NumericError(FSAError, ArithmeticError):
    exit_code = 3
    category = "numeric"


class TrainingError(NumericError):
    pass


class VerificationError(FSAError):
    exit_code = 4
    category = "verification"
