"""Shared exception types. The CLI maps these onto exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file (exit code 2)."""


class GeometryError(ValueError):
    """Raster/window geometry violation: bad shapes, bounds, or ratios."""


class DataFormatError(ValueError):
    """Corrupt or mismatched on-disk artifact (container, checkpoint, manifest)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization (exit code 4)."""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )
