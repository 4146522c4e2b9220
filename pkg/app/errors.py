#!/usr/bin/env python3
"""
Exception hierarchy for the EasySpec engine.
Library code raises these; command boundaries catch and translate to exit codes.
"""


class EspecError(Exception):
    """Base class for every engine error"""
    exit_code = 1


class ConfigError(EspecError):
    """Invalid configuration value, flag or plan"""
    exit_code = 1


class ShapeError(EspecError):
    """Tensor dimensions do not line up"""


class NonFiniteError(EspecError):
    """NaN or infinity reached an operation that requires finite input"""


class UndefinedSimilarityError(EspecError):
    """Cosine similarity requested for two zero vectors"""


class PositionOverflowError(EspecError):
    """A rotary position or cache row beyond the model's limit"""


class StructuralError(EspecError):
    """Cache or tree structure violated (bad parent, non-chain path, out-of-range row)"""


class ConsistencyError(EspecError):
    """An internal invariant was broken, e.g. a drafted token with zero draft probability"""


class CapacityError(EspecError):
    """A layer-parallel group needs more devices than the simulator has"""


class UndefinedThroughputError(EspecError):
    """Throughput model evaluated at zero acceptance rate"""


class ReportError(EspecError):
    """Report aggregation or emission failed"""


class ModelIOError(EspecError):
    """Model file missing, truncated or malformed"""
    exit_code = 2


class CheckFailure(EspecError):
    """A verification suite did not pass"""
    exit_code = 3
