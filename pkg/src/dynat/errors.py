"""Exception types shared across the package.

Every failure mode that callers are expected to distinguish gets its own
class; generic misuse of an API surfaces as one of the ValueError
subclasses below rather than a bare assert.
"""


class ShapeError(ValueError):
    """Operands have shapes the operation does not accept."""


class ValidationError(ValueError):
    """Values are structurally wrong (not one-hot, out of range, non-finite)."""


class ContractError(RuntimeError):
    """A documented precondition was violated (stale tape, frozen model, missing grad)."""


class ModelSpecError(ValueError):
    """Adjacent layers in a model description do not compose."""


class ConfigError(ValueError):
    """An experiment config file is malformed or inconsistent."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported version."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint does not match the model spec it is being loaded into."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class IdxFormatError(ValueError):
    """IDX file has a wrong magic number or dimension header."""


class IdxCountError(IdxFormatError):
    """Image and label files disagree on the number of examples."""


class IdxTruncatedError(IdxFormatError):
    """IDX file ended before the declared payload was read."""
