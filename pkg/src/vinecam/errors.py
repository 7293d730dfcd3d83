"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError``; the classes below carry the
CLI exit code for failures that are not usage errors.
"""


class VinecamError(Exception):
    exit_code = 2


class DataError(VinecamError):
    """Missing, malformed or inconsistent input data."""

    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericError(VinecamError):
    """Training diverged (NaN/Inf loss) or a numeric invariant broke."""

    exit_code = 3
