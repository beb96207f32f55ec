import numpy as np
import pytest
from urbanet.Errors import PreconditionError
from urbanet.predictor import Predictor, get_predictors, predictor_class_name
from urbanet.Tiler import POPULATION_TARGET, URBAN_TARGET


def test_available_predictors():
    assert get_predictors() == ["persistence", "true_function", "zero"]
    assert predictor_class_name("true_function") == "TrueFunctionPredictor"


def test_unknown_predictor():
    with pytest.raises(PreconditionError):
        Predictor("oracle")


def test_predictions_are_zero_on_water(small_world):
    water = small_world.mask == 0
    for name in get_predictors():
        for target in (URBAN_TARGET, POPULATION_TARGET):
            prediction = Predictor(name).predict(small_world, target)
            assert prediction.shape == small_world.shape
            assert (prediction[water] == 0).all()


def test_true_function_reproduces_noise_free_targets(small_world):
    predictor = Predictor("true_function")
    for target in (URBAN_TARGET, POPULATION_TARGET):
        np.testing.assert_array_equal(predictor.predict(small_world, target), small_world.channel(target))
    with pytest.raises(ValueError):
        predictor.predict(small_world, "elevation")
