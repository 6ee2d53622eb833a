"""Exception hierarchy shared by every module.

CLI exit codes are attached to each class so the command layer can map
failures without inspecting messages.
"""


class FusionTransformerError(Exception):
    exit_code = 1


class ConfigError(FusionTransformerError, ValueError):
    """A hyperparameter or configuration value violates a constraint."""


class DimensionError(FusionTransformerError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(FusionTransformerError, RuntimeError):
    """An API precondition was violated by the caller."""


class InputError(FusionTransformerError, KeyError):
    """Model inputs do not match the declared input heads."""

    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataError(FusionTransformerError):
    """Dataset content is malformed, too short, or inconsistent."""

    exit_code = 2


class SchemaError(DataError):
    """A dataset file is missing required columns."""


class CheckpointError(FusionTransformerError, IOError):
    """A checkpoint file is missing, truncated, or corrupt."""

    exit_code = 2


class VersionError(CheckpointError):
    """A checkpoint was written with an unsupported format version."""


class NumericalError(FusionTransformerError, FloatingPointError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, epoch: int, batch: int, head: str, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}, head {head!r}")
        self.epoch = epoch
        self.batch = batch
        self.head = head
