"""Exception hierarchy for the mpo package.

The CLI maps these onto exit codes: configuration problems exit 2,
data/parse problems exit 3, numeric degeneracies exit 4.
"""


class MpoError(Exception):
    """Base class for all errors raised by this package."""


class InputError(MpoError, ValueError):
    """An argument violates an operation's preconditions."""


class ShapeError(InputError):
    """Layer shapes in a model description are incompatible."""


class DegenerateDirectionError(MpoError):
    """The in-plane directions collapsed (phi_right parallel to w_up)."""


class ParseError(MpoError):
    """A binary data file does not conform to its documented format."""


class IdxMagicError(ParseError):
    """IDX file carries the wrong magic number."""


class TruncatedFileError(ParseError):
    """A data file ends before the payload its header promises."""


class CountMismatchError(ParseError):
    """Image and label files disagree on the number of records."""


class RecordFormatError(ParseError):
    """CIFAR-10 binary file length is not a whole number of records."""


class LabelRangeError(ParseError):
    """A label byte is outside the valid class range."""


class SnapshotError(MpoError):
    """Base class for plane snapshot file errors."""


class SnapshotMagicError(SnapshotError):
    """Snapshot magic/version marker is not the supported one."""


class SnapshotLengthError(SnapshotError):
    """Snapshot file length disagrees with its declared vector length."""


class SnapshotCrcError(SnapshotError):
    """Snapshot payload checksum does not match."""


class ConfigError(MpoError):
    """A run configuration is invalid or references missing files."""


class DiffUndefinedError(MpoError):
    """Black/white accuracy difference requested on a single-class mask.

    The per-class means that *are* defined are attached as
    ``mean_acc_black`` / ``mean_acc_white`` (NaN for the missing class).
    """

    def __init__(self, message, mean_acc_black, mean_acc_white):
        super().__init__(message)
        self.mean_acc_black = mean_acc_black
        self.mean_acc_white = mean_acc_white
