"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented codes (1 usage, 2 data/format, 3 contract violation).
"""


class SafcarError(Exception):
    exit_code = 1


class ConfigError(SafcarError, ValueError):
    """Invalid configuration or topology/stage combination."""

    exit_code = 1


class DimensionError(SafcarError, ValueError):
    """Incompatible tensor shapes."""

    exit_code = 3


class ContractError(SafcarError, RuntimeError):
    """A documented invariant or precondition was violated."""

    exit_code = 3


class NonFiniteError(ContractError):
    """A NaN/Inf appeared; ``node_id`` names the graph node that produced it."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class TrainingError(ContractError):
    pass


class RegistryError(SafcarError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CapacityError(SafcarError, ValueError):
    exit_code = 2


class SplitError(SafcarError, ValueError):
    exit_code = 2


class DataError(SafcarError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """Corrupt or inconsistent on-disk data; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
