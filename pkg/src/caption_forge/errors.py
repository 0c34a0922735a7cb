"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class CaptionForgeError(Exception):
    exit_code = 3
    kind = "error"


class ValidationError(CaptionForgeError, ValueError):
    kind = "validation"


class DimensionError(ValidationError):
    kind = "dimension"


class DomainError(ValidationError):
    kind = "domain"


class ConfigError(ValidationError):
    kind = "config"


class ContractError(ValidationError):
    kind = "contract"


class VocabularyError(ValidationError):
    kind = "vocabulary"


class IntegrityError(ValidationError):
    kind = "integrity"


class PreconditionError(ValidationError):
    kind = "precondition"


class ParseError(ValidationError):
    kind = "parse"


class CheckpointError(ValidationError):
    kind = "checkpoint"

    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = list(names)


class NumericError(CaptionForgeError, ArithmeticError):
    exit_code = 4
    kind = "numeric"


class MissingFileError(CaptionForgeError, FileNotFoundError):
    exit_code = 2
    kind = "missing_file"
