"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (model, training, checkpoint)."""


class DimensionError(ValueError):
    """Tensor shapes that cannot be combined."""


class DatasetError(OSError):
    """A dataset on disk is missing files or cannot be decoded."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss.

    Carries the epoch, batch index and the individual loss components so the
    offending batch can be reproduced.
    """

    def __init__(self, epoch, batch_index, components):
        self.epoch = epoch
        self.batch_index = batch_index
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {parts}"
        )
