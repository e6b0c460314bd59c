"""Exception taxonomy shared by every module.

``KinfluenceError`` is the common base so callers (and the CLI exit-code
mapping) can distinguish configuration problems from numerical failures.
"""


class KinfluenceError(Exception):
    """Base class for all library errors."""


class ConfigError(KinfluenceError):
    """Invalid configuration, CLI arguments, or file-format mismatch."""


# --- dataset / file errors -------------------------------------------------

class BadMagic(ConfigError):
    """A binary file's magic number does not match the expected format."""


class CountMismatch(ConfigError):
    """Image and label files disagree on the number of records."""


class TruncatedFile(ConfigError):
    """A binary file is shorter than its header or record size implies."""


class InsufficientClassMembers(ConfigError):
    """A per-class subset request exceeds the available members."""


class DegenerateSplit(ConfigError):
    """A forget/retain split would leave one of the partitions empty."""


class EmptyDataset(ConfigError):
    """An operation requires at least one data point."""


class DimensionMismatch(KinfluenceError):
    """Array shapes are inconsistent with the model or kernel dimensions."""


class CheckpointMismatch(ConfigError):
    """A serialized parameter vector does not match the given model spec."""


# --- numerical errors ------------------------------------------------------

class NumericalError(KinfluenceError):
    """Base class for runtime numerical failures (CLI exit code 3)."""


class DivergenceDetected(NumericalError):
    """Training produced a non-finite loss."""


class NonFiniteEncountered(NumericalError):
    """A solver iterate or operator output contains NaN/Inf."""


class SpdViolation(NumericalError):
    """CG observed p'Ap <= 0: the operator is not positive definite."""


class NotAtOptimum(NumericalError):
    """Coefficients were requested at a non-stationary parameter vector."""


class NotConverged(NumericalError):
    """A function-space training run did not reach its residual tolerance."""


class PartitionGap(ConfigError):
    """Row shards do not cover every row of the matrix."""


class PartitionOverlap(ConfigError):
    """Row shards cover some row of the matrix more than once."""
