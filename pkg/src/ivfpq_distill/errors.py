"""Exception hierarchy. The CLI maps each family to an exit code."""


class ContractError(ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataFormatError(ValueError):
    """A file on disk does not match its expected layout (CLI exit code 3)."""


class ChecksumError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during training (CLI exit code 4)."""
