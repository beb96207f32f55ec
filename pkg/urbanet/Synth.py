import logging
import math
from typing import Optional
import numpy as np
from pydantic import BaseModel, root_validator, validator
from scipy import ndimage
from urbanet.Errors import PreconditionError
from urbanet.Grid import SplitAssignment, WorldGrid
from urbanet.Tiler import INPUT_CHANNELS, POPULATION_TARGET, URBAN_TARGET

# Test regions sit on the diagonal of the default 4x4 region layout.
REGION_CODES = [
    "USA", "CAN", "MEX", "BRA",
    "ARG", "CHN", "IND", "JPN",
    "DEU", "FRA", "GBR", "ITA",
    "NGA", "KEN", "ZAF", "MWI",
]
NEIGHBORHOOD = 5
# Land where a smooth noise field falls below this level has no built-up area.
RURAL_LEVEL = -0.8


class SynthConfig(BaseModel):
    seed: int = 0
    height: int = 96
    width: int = 96
    land_fraction: float = 0.7
    n_regions: int = 16
    noise_std: float = 0.01

    @validator("height", "width", "n_regions")
    def positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1, got {v}")
        return v

    @validator("land_fraction")
    def fraction(cls, v):
        if not 0 < v <= 1:
            raise ValueError(f"land_fraction must lie in (0, 1], got {v}")
        return v

    @validator("noise_std")
    def non_negative(cls, v):
        if v < 0:
            raise ValueError(f"noise_std must not be negative, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def enough_land(cls, values):
        land = values["height"] * values["width"] * values["land_fraction"]
        if land < 100:
            raise ValueError(f"only {land:.0f} land pixels expected, at least 100 are needed")
        return values


def region_name(index: int) -> str:
    return REGION_CODES[index] if index < len(REGION_CODES) else f"R{index:02d}"


def smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return field / max(field.std(), 1e-12)


def land_neighborhood_mean(plane: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of `plane` over the land pixels of each 5x5 neighborhood."""
    kernel = np.ones((NEIGHBORHOOD, NEIGHBORHOOD))
    land = (mask == 1).astype(np.float64)
    total = ndimage.correlate(plane * land, kernel, mode="constant", cval=0.0)
    count = ndimage.correlate(land, kernel, mode="constant", cval=0.0)
    return np.where(land > 0, total / np.maximum(count, 1.0), 0.0)


def urban_growth(urban_2000: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return land_neighborhood_mean(urban_2000, mask) * (1.0 - urban_2000)


def urban_change(grid: WorldGrid) -> np.ndarray:
    """Noise-free change of built-up fraction, zero on water and on rural land."""
    urban = grid.channel("urban_2000")
    value = 0.25 * urban_growth(urban, grid.mask) * np.exp(-grid.channel("dist_city") / 8.0)
    value += 0.05 * np.tanh(grid.channel("population_2000") / 1000.0) * (1.0 - urban)
    return np.where((grid.mask == 1) & (urban > 0), value, 0.0)


def population_change(grid: WorldGrid) -> np.ndarray:
    """Noise-free population change, sharing the neighborhood growth term."""
    growth = urban_growth(grid.channel("urban_2000"), grid.mask)
    value = 400.0 * growth
    value += 0.1 * grid.channel("population_2000") * np.exp(-grid.channel("dist_city") / 12.0)
    return np.where(grid.mask == 1, value, 0.0)


def taxicab_distance(source: np.ndarray) -> np.ndarray:
    """4-connected hop count from every pixel to the nearest `source` pixel."""
    return ndimage.distance_transform_cdt(~source, metric="taxicab").astype(np.float64)


def gen_world(config: Optional[SynthConfig] = None) -> WorldGrid:
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    shape = (config.height, config.width)
    height, width = shape

    terrain = smooth_noise(rng, shape, sigma=max(shape) / 12)
    if config.land_fraction >= 1.0:
        mask = np.ones(shape, dtype=np.uint8)
    else:
        mask = (terrain > np.quantile(terrain, 1.0 - config.land_fraction)).astype(np.uint8)
    if not mask.any():
        raise PreconditionError(f"Seed {config.seed} produced a world without land.")
    land = mask == 1

    side = math.ceil(math.sqrt(config.n_regions))
    rows = np.arange(height)[:, None] * side // height
    cols = np.arange(width)[None, :] * side // width
    index = np.minimum(rows * side + cols, config.n_regions - 1)
    regions = np.where(land, index + 1, 0)
    region_table = {code + 1: region_name(code) for code in range(config.n_regions)}

    # Outside the grid counts as water, so an all-land world still has a coast.
    water = np.pad(~land, 1, constant_values=True)
    dist_water = taxicab_distance(water)[1:-1, 1:-1] - 1.0
    n_cities = max(1, int(land.sum()) // 200)
    cities = np.zeros(shape, dtype=bool)
    cities.flat[rng.choice(np.flatnonzero(land), size=n_cities, replace=False)] = True
    dist_city = taxicab_distance(cities)

    elevation = 200.0 + 150.0 * smooth_noise(rng, shape, sigma=4.0)
    slope_range = ndimage.maximum_filter(elevation, size=3) - ndimage.minimum_filter(
        elevation, size=3
    )
    latitude = np.deg2rad(np.linspace(75.0, -60.0, height))[:, None]
    land_area = np.cos(latitude) * np.ones(shape)
    land_area = np.where(land & (dist_water == 0), 0.5 * land_area, land_area)

    vigor = 0.75 + 0.25 * np.tanh(smooth_noise(rng, shape, sigma=3.0))
    urban_1980 = 0.6 * vigor * np.exp(-dist_city / 2.5)
    urban_1990 = 0.7 * vigor * np.exp(-dist_city / 3.0)
    urban_2000 = 0.8 * vigor * np.exp(-dist_city / 4.0)
    rural = (smooth_noise(rng, shape, sigma=3.0) < RURAL_LEVEL) & (dist_city > 0)
    urban_1980, urban_1990, urban_2000 = (
        np.where(rural, 0.0, urban) for urban in (urban_1980, urban_1990, urban_2000)
    )
    density = np.exp(0.3 * smooth_noise(rng, shape, sigma=3.0))
    population_2000 = land_area * (50.0 + 2000.0 * urban_2000) * density

    inputs = dict(
        dist_water=dist_water,
        dist_city=dist_city,
        elevation=elevation,
        slope_range=slope_range,
        land_area=land_area,
        population_2000=population_2000,
        urban_1980=urban_1980,
        urban_1990=urban_1990,
        urban_2000=urban_2000,
    )
    channels = [(name, np.where(land, inputs[name], 0.0)) for name in INPUT_CHANNELS]
    world = WorldGrid(channels=tuple(channels), mask=mask, regions=regions, region_table=region_table)

    delta_urban = urban_change(world)
    delta_population = population_change(world)
    if config.noise_std > 0:
        delta_urban = delta_urban + config.noise_std * rng.standard_normal(shape)
        spread = delta_population[land].std()
        delta_population = delta_population + config.noise_std * spread * rng.standard_normal(shape)
    targets = [
        (URBAN_TARGET, np.where(land, delta_urban, 0.0)),
        (POPULATION_TARGET, np.where(land, delta_population, 0.0)),
    ]
    world = world.with_channels(list(world.channels) + targets).validate()
    logging.info(
        f"Generated {height}x{width} world (seed {config.seed}): {world.land_count} land pixels, "
        f"{config.n_regions} regions, {n_cities} cities"
    )
    return world


def oracle_metrics(
    world: WorldGrid,
    predictor: str,
    target: str = URBAN_TARGET,
    split: Optional[SplitAssignment] = None,
    split_filter: str = "all",
):
    """Scores a named closed-form predictor over the land pixels of a split."""
    from urbanet.Evaluation import residual_metrics
    from urbanet.predictor import Predictor

    prediction = Predictor(predictor).predict(world, target)
    cells = world.unpadded(world.mask) == 1
    if split is not None:
        cells &= split.selects(split_filter)
    return residual_metrics(
        world.unpadded(prediction),
        world.unpadded(world.channel(target)),
        cells,
        model=predictor,
    )
