"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class FormatError(ValueError):
    """A binary file failed validation.

    ``offset`` is the byte position at which reading went wrong.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid configuration text, key or value."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)
        self.line = line
        self.column = column


class GenerationError(RuntimeError):
    """Procedural scene generation could not satisfy its constraints."""


class TrainingDiverged(RuntimeError):
    """A non-finite gradient or loss was produced during training."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
