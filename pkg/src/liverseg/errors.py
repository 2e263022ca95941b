"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: usage errors exit 2 (argparse),
``DataError`` subclasses exit 3, ``NumericalError`` exits 4.
"""


class LiverSegError(Exception):
    """Base class for all toolkit errors."""


class DataError(LiverSegError):
    """Problems with input data or file contents (not tool bugs)."""


class VolumeFormatError(DataError):
    """Malformed or unsupported volume file."""


class ShapeMismatchError(DataError):
    """Inputs that must share dims/spacing do not."""


class NoLiverFoundError(DataError):
    """Liver probability map thresholded to an empty mask."""


class MissingClassError(DataError):
    """A required label class is absent from the data."""


class EmptyMaskError(DataError):
    """A metric that needs a nonempty mask got an empty one."""


class GuardError(LiverSegError):
    """An O(N^2) / exhaustive reference routine was asked to exceed its size guard."""


class NumericalError(LiverSegError):
    """Numerical failure (divergence, non-finite values) during optimization."""
