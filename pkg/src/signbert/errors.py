"""
Exception hierarchy shared by the signbert package
"""

from typing import Optional


class SignBertError(Exception):
    """Base class for every error raised on purpose by this package"""


class PoseFileError(SignBertError):
    """A pose file could not be parsed"""

    def __init__(self, message: str, path: Optional[str] = None,
                 frame: Optional[int] = None, field: Optional[str] = None):
        self.path = path
        self.frame = frame
        self.field = field
        where = []
        if path:
            where.append(str(path))
        if frame is not None:
            where.append(f"frame {frame}")
        if field:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class SchemaError(PoseFileError):
    """Pose data is well-formed but violates the skeleton schema"""


class ConfigError(SignBertError):
    """Invalid configuration key, type or value"""


class HandModelError(SignBertError):
    """Invalid hand model asset or specification"""


class InfeasibleTargetError(SignBertError):
    """CTC target cannot be aligned to the available frames (infinite loss)"""


class TrainingDivergedError(SignBertError):
    """Loss became non-finite during training"""

    def __init__(self, message: str, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"{message} (epoch={epoch}, step={step}, loss={loss})")


class CheckpointError(SignBertError):
    """Checkpoint missing, unreadable or incompatible"""


class RunLockError(SignBertError):
    """Another run already owns the artifact directory"""
