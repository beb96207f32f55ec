import os
import logging
from typing import Dict, List, Optional, Tuple
from dotenv import dotenv_values
from pydantic import BaseModel, validator
from urbanet.Grid import DEFAULT_TEST_REGIONS
from urbanet.Synth import SynthConfig
from urbanet.Tiler import INPUT_CHANNELS, URBAN_TARGET
from urbanet.Trainer import MultiTaskSchedule, TrainConfig
from urbanet.UNet import UNetSpec, make_spec

DEFAULT_SETTINGS = {
    "seed": "0",
    "window": "28",
    "threads": "1",
    "out_dir": "out",
    "world": "",
    "checkpoint": "",
    "test_regions": ",".join(DEFAULT_TEST_REGIONS),
    "target": URBAN_TARGET,
    "by_region": "false",
    "height": "96",
    "width": "96",
    "land_fraction": "0.7",
    "n_regions": "16",
    "noise_std": "0.01",
    "normalization": "minmax",
    "validation_fraction": "0.1",
    "base_features": "8",
    "depth": "2",
    "kernel_size": "3",
    "batch_size": "64",
    "learning_rate": "0.001",
    "finetune_learning_rate": "0.0001",
    "optimizer": "adam",
    "max_epochs": "100",
    "patience": "10",
    "min_delta": "1e-07",
    "shuffle": "true",
    "task_weights": "1,1",
    "gradcheck_seeds": "10",
}


class Settings(BaseModel):
    seed: int
    window: int
    threads: int
    out_dir: str
    world: str
    checkpoint: str
    test_regions: List[str]
    target: str
    by_region: bool
    height: int
    width: int
    land_fraction: float
    n_regions: int
    noise_std: float
    normalization: str
    validation_fraction: float
    base_features: int
    depth: int
    kernel_size: int
    batch_size: int
    learning_rate: float
    finetune_learning_rate: float
    optimizer: str
    max_epochs: int
    patience: int
    min_delta: float
    shuffle: bool
    task_weights: Tuple[float, float]
    gradcheck_seeds: int

    @validator("test_regions", "task_weights", pre=True)
    def comma_separated(cls, v):
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v

    @validator("window", "threads", "gradcheck_seeds")
    def positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1, got {v}")
        return v

    @validator("normalization")
    def known_mode(cls, v):
        if v not in ("minmax", "zscore"):
            raise ValueError(f"normalization must be 'minmax' or 'zscore', got '{v}'")
        return v

    @validator("validation_fraction")
    def fraction(cls, v):
        if not 0 < v < 1:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {v}")
        return v

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            seed=self.seed,
            height=self.height,
            width=self.width,
            land_fraction=self.land_fraction,
            n_regions=self.n_regions,
            noise_std=self.noise_std,
        )

    def unet_spec(self, heads=((URBAN_TARGET, 1),)) -> UNetSpec:
        return make_spec(
            input_channels=len(INPUT_CHANNELS),
            base_features=self.base_features,
            depth=self.depth,
            kernel_size=self.kernel_size,
            heads=list(heads),
            tile_size=self.window,
        )

    def train_config(self, learning_rate: Optional[float] = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate if learning_rate is None else learning_rate,
            optimizer=self.optimizer,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            seed=self.seed,
            shuffle=self.shuffle,
            threads=self.threads,
        )

    def schedule(self) -> MultiTaskSchedule:
        return MultiTaskSchedule(
            phase1=self.train_config(),
            phase2=self.train_config(self.finetune_learning_rate),
            task_weights=self.task_weights,
        )


def load_settings(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> Settings:
    """Defaults, then `key=value` lines from `path`, then `overrides`."""
    values = dict(DEFAULT_SETTINGS)
    if path:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Config file {path} not found.")
        from_file = dotenv_values(path)
        unknown = sorted(set(from_file) - set(DEFAULT_SETTINGS))
        if unknown:
            raise ValueError(f"Unknown settings in {path}: {', '.join(unknown)}")
        values.update({key: value for key, value in from_file.items() if value is not None})
        logging.debug(f"Loaded {len(from_file)} settings from {path}")
    for key, value in (overrides or {}).items():
        if key not in DEFAULT_SETTINGS:
            raise ValueError(f"Unknown setting '{key}'")
        if value is not None:
            values[key] = str(value)
    return Settings(**values)


def format_settings(settings: Optional[Settings] = None) -> str:
    if settings is None:
        return "\n".join(f"{key}={value}" for key, value in DEFAULT_SETTINGS.items()) + "\n"
    lines = []
    for key, value in settings.dict().items():
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(item) for item in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
