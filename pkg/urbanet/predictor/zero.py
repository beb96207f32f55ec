import numpy as np


class ZeroPredictor:
    """Predicts no change anywhere; the loss-ratio denominator."""

    def predict(self, grid, target):
        return np.zeros(grid.shape)
