from urbanet.Synth import population_change, urban_change
from urbanet.Tiler import POPULATION_TARGET, URBAN_TARGET


class TrueFunctionPredictor:
    """The noise-free generating formulas of the synthetic world."""

    formulas = {URBAN_TARGET: urban_change, POPULATION_TARGET: population_change}

    def predict(self, grid, target):
        if target not in self.formulas:
            raise ValueError(f"No closed form for target '{target}'.")
        return self.formulas[target](grid)
