"""Exception types shared across the package.

Each class maps onto one CLI exit code so the command line can report
failures without inspecting messages.
"""


class VFChainError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigError(VFChainError, ValueError):
    """Invalid parameter or configuration value."""

    exit_code = 1


class FormatError(VFChainError, ValueError):
    """Malformed or inconsistent input file."""

    exit_code = 2

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class DimensionError(VFChainError, ValueError):
    """Vectors or matrices with incompatible shapes."""

    exit_code = 2


class DegenerateInputError(VFChainError, ValueError):
    """Numerically degenerate input, e.g. a zero vector where a direction is needed."""

    exit_code = 3
