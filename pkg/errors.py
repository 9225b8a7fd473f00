"""
Exception types shared by every mixedobj module.

Each error class carries the process exit code the command-line front end
uses when the error escapes a command.
"""


class MixedObjError(Exception):
    """Base class for all library errors"""
    exit_code = 1


class DimensionError(MixedObjError, ValueError):
    """Tensor shapes do not conform to an operation's rule"""


class DomainError(MixedObjError, ValueError):
    """A value falls outside an operation's numeric domain"""


class ContractError(MixedObjError):
    """A caller violated an operation's precondition"""
    exit_code = 3


class EmptyDocumentError(MixedObjError, ValueError):
    """Text contained no tokens after preprocessing"""
    exit_code = 3


class _LocatedError(MixedObjError):
    """Error tied to a line of an input file"""
    exit_code = 3

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class ParseError(_LocatedError, ValueError):
    """Malformed row in a data or embedding file"""


class LabelRangeError(_LocatedError, ValueError):
    """Class label outside [0, K)"""


class FormatError(_LocatedError, ValueError):
    """File structure disagrees with what the reader expects"""


class ConfigurationError(MixedObjError, ValueError):
    """Invalid configuration value"""
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointError(MixedObjError):
    """Checkpoint missing, unreadable or inconsistent with the model/vocabulary"""
    exit_code = 4

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class VocabularyLookupError(MixedObjError, KeyError):
    """Query word is not in the vocabulary"""
    exit_code = 3

    def __str__(self):
        return Exception.__str__(self)


class NumericAnomalyError(MixedObjError, ArithmeticError):
    """Non-finite gradient encountered in an optimizer step"""


class TrainingAbortedError(MixedObjError):
    """Too many consecutive anomalous steps"""
    exit_code = 5
