class UrbanetError(Exception):
    """Base class for every error raised by the pipeline."""


class DataError(UrbanetError):
    exit_code = 2


class GridFormatError(DataError):
    pass


class GridIntegrityError(DataError):
    pass


class DegenerateChannelError(DataError):
    def __init__(self, channel: str):
        self.channel = channel
        super().__init__(f"Channel '{channel}' is constant over the fitted pixels.")


class PreconditionError(DataError):
    pass


class BoundsError(DataError):
    pass


class ShapeError(DataError):
    pass


class SpecError(DataError):
    pass


class CheckpointError(DataError):
    pass


class MetricError(DataError):
    pass


class NumericError(UrbanetError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, epoch: int, loss: float, phase: str = "train"):
        self.epoch = epoch
        self.loss = loss
        self.phase = phase
        super().__init__(f"Loss became {loss} at epoch {epoch} ({phase}).")
