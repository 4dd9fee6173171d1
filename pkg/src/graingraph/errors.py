"""Exception hierarchy.

Every error carries the CLI exit code it maps to.
"""


class GrainGraphError(Exception):
    exit_code = 1


class ConfigError(GrainGraphError, ValueError):
    exit_code = 2


class DataFormatError(GrainGraphError, ValueError):
    exit_code = 3


class InputError(DataFormatError):
    """Caller passed data that violates an operation's precondition."""


class PartitionError(DataFormatError):
    pass


class DegeneracyError(DataFormatError):
    pass


class ReconstructionError(DataFormatError):
    pass


class WeightLoadError(DataFormatError):
    pass


class NumericError(GrainGraphError, ArithmeticError):
    exit_code = 4


class ContractError(NumericError):
    """A predictor produced values outside its documented ranges."""


class TopologyError(NumericError):
    """A topological edit was requested that would break graph invariants."""


class GuardedFlipError(TopologyError):
    pass


class DegenerateCollapseError(NumericError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
