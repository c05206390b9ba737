"""Exception types shared across the package."""


class UnividError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UnividError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ScheduleError(UnividError, ValueError):
    """Invalid noise-schedule parameters or timestep index."""


class ReferenceSetError(UnividError, ValueError):
    """Invalid reference-frame construction (non-divisible step, empty set, ...)."""


class KernelError(UnividError, ValueError):
    """Invalid temporal kernel size (even, or < 1)."""


class VocabError(UnividError, ValueError):
    """Token outside the caption vocabulary."""


class ConditionError(UnividError, ValueError):
    """Inconsistent condition bundle (missing stream with positive weight, ...)."""


class FormatError(UnividError, ValueError):
    """Corrupt or unsupported on-disk tensor/image format."""


class CheckpointError(UnividError, ValueError):
    """Checkpoint directory and manifest disagree, or files are missing."""


class ConfigError(UnividError, ValueError):
    """Bad config file: unknown key, bad value, or missing required key."""


class StageError(UnividError, ValueError):
    """Unknown training stage or stage/data mismatch."""


class ModeError(UnividError, ValueError):
    """Generation mode is inconsistent with the provided inputs."""


class DataError(UnividError, ValueError):
    """Invalid clip specification or out-of-bounds motion."""


class TrainingDiverged(UnividError, RuntimeError):
    """Non-finite loss encountered; carries step diagnostics."""
