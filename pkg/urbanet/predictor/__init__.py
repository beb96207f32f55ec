import importlib
import glob
import os
from urbanet.Errors import PreconditionError


def get_predictors():
    predictors = []
    for predictor in glob.glob(os.path.join(os.path.dirname(__file__), "*.py")):
        if "__init__.py" not in predictor:
            predictors.append(os.path.splitext(os.path.basename(predictor))[0])
    return sorted(predictors)


def predictor_class_name(name):
    return "".join(part.capitalize() for part in name.split("_")) + "Predictor"


class Predictor:
    def __init__(self, name, **kwargs):
        try:
            module = importlib.import_module(f"urbanet.predictor.{name}")
            predictor_class = getattr(module, predictor_class_name(name))
            self.instance = predictor_class(**kwargs)
        except (ModuleNotFoundError, AttributeError) as e:
            raise PreconditionError(
                f"Unknown predictor '{name}', expected one of {get_predictors()}."
            ) from e

    def __getattr__(self, attr):
        return getattr(self.instance, attr)
