"""Exception types shared across the package."""


class DpneError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DpneError):
    """Array dimensions disagree with what an operation requires."""


class NonFinite(DpneError):
    """A NaN or infinity showed up where only finite values are allowed."""


class DegenerateBandwidth(DpneError):
    """One or more kernel bandwidths collapsed to (numerical) zero.

    Raised when duplicate points make the k-th neighbour distance vanish
    and the caller did not ask for the floor fallback.
    """

    def __init__(self, rows, floor):
        self.rows = list(rows)
        self.floor = floor
        super().__init__(
            f"zero k-NN bandwidth at rows {self.rows} "
            f"(pass floor=True to clamp at {floor:g})"
        )


class BadMagic(DpneError):
    """An IDX file starts with an unexpected magic number."""


class TruncatedFile(DpneError):
    """A binary file ended before the declared payload."""


class CountMismatch(DpneError):
    """Image and label files disagree on the number of records."""


class RaggedRows(DpneError):
    """A delimited text file has rows of differing width."""


class NonNumericCell(DpneError):
    """A delimited text file contains a cell that does not parse as a number."""


class TooFew(DpneError):
    """Not enough samples to satisfy the request."""
