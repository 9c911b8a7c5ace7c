"""Exception hierarchy shared across the toolkit."""


class EdenError(Exception):
    """Base class for all toolkit errors."""


class ParseError(EdenError):
    """Malformed input file; message carries the offending line number."""


class DimensionError(EdenError):
    """Shape or row-count mismatch between related arrays."""


class PartitionError(EdenError):
    """Partition does not cover the node set or contains empty blocks."""


class StructureError(EdenError):
    """Tree structure violates the partition-tree contract."""


class ContractError(EdenError):
    """An operation was called outside its documented preconditions."""


class ConfigError(EdenError):
    """Invalid run configuration or parameter value."""


class DivergenceError(EdenError):
    """Training produced a non-finite loss."""


class CountError(EdenError):
    """Requested sample counts cannot be satisfied by the graph."""


class MetricError(EdenError):
    """Metric undefined for the given ground truth (e.g. single-class AUC)."""
