"""Exception hierarchy shared by every ceemkit module."""


class CeemError(Exception):
    """Base class. ``code`` is the short tag printed by the CLI."""

    code = "E_CEEM"


class ShapeError(CeemError, ValueError):
    code = "E_SHAPE"


class StateError(CeemError, RuntimeError):
    code = "E_STATE"


class StratificationError(CeemError, ValueError):
    code = "E_STRATIFY"


class TrainingDivergedError(CeemError, FloatingPointError):
    code = "E_DIVERGED"

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class DatasetError(CeemError):
    code = "E_DATASET"


class ImageFileError(DatasetError):
    code = "E_FILE"

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class CheckpointError(CeemError):
    code = "E_CHECKPOINT"


class CheckpointMalformedError(CheckpointError):
    code = "E_CKPT_MALFORMED"


class CheckpointVersionError(CheckpointError):
    code = "E_CKPT_VERSION"


class CheckpointLengthError(CheckpointError):
    code = "E_CKPT_LENGTH"
