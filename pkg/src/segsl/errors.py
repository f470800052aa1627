"""Exception types shared across the pipeline.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3. Programming-contract violations
(bad argument ranges, shape mismatches) raise plain ValueError.
"""


class PipelineError(Exception):
    """Base class for errors the CLI knows how to report."""


class UsageError(PipelineError):
    """Invalid flags or configuration values."""


class DataError(PipelineError):
    """Missing, malformed, or inconsistent input data."""


class NumericError(PipelineError):
    """Non-finite values encountered during optimization."""
