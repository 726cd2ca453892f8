"""Exception types shared across the package."""


class GcdetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GcdetError):
    """Invalid configuration: bad enum value, channel mismatch, unknown key."""


class NumericError(GcdetError):
    """Non-finite values where finite numbers are required."""


class ShapeError(GcdetError):
    """Tensor geometry violates a contract (e.g. input size not a stride multiple)."""


class LabelParseError(GcdetError):
    """A label file could not be parsed; carries file and line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class DatasetError(GcdetError):
    """Dataset-level problem: empty set, missing directory, unknown image id."""


class CheckpointError(GcdetError):
    """Checkpoint cannot be loaded: unknown version or mismatched config."""


class TrainingDivergedError(GcdetError):
    """Loss became non-finite during training; names epoch and batch."""

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
