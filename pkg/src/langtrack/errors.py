"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ValueError):
    """Input data violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class IntegrityError(ValueError):
    """Stored data is inconsistent with its declared structure."""


class ParseError(ValueError):
    """Malformed annotation file."""

    def __init__(self, message, path=None, line=None, field=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{': '.join(loc)}: {message}" if loc else message)
        self.path = path
        self.line = line
        self.field = field
