"""Exception types shared across the package.

Each class carries a short machine-readable ``code`` so the CLI can emit
one-line errors without string matching.
"""


class MGTError(Exception):
    code = "error"

    def __init__(self, message, path=None):
        super().__init__(message)
        self.message = message
        self.path = path


class ShapeError(MGTError, ValueError):
    code = "shape_error"


class DomainError(MGTError, ValueError):
    code = "domain_error"


class ValidationError(MGTError, ValueError):
    code = "validation_error"


class UsageError(MGTError, ValueError):
    code = "usage_error"


class TokenIndexError(MGTError, IndexError):
    code = "index_error"


class ParseError(MGTError, ValueError):
    code = "parse_error"

    def __init__(self, message, offset=None, path=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, path=path)
        self.offset = offset


class MissingFileError(MGTError, FileNotFoundError):
    code = "missing_file"
