import numpy as np
import pytest
import torch
from urbanet.Grid import WorldGrid
from urbanet.Synth import SynthConfig, gen_world
from urbanet.Tiler import INPUT_CHANNELS, POPULATION_TARGET, URBAN_TARGET


def random_grid(rng, height, width, water=0.3, n_regions=4, channels=None):
    """Water-zero grid with the nine inputs and both targets filled with noise."""
    mask = (rng.random((height, width)) > water).astype(np.uint8)
    mask[height // 2, width // 2] = 1
    names = channels or INPUT_CHANNELS + (URBAN_TARGET, POPULATION_TARGET)
    planes = tuple((name, rng.random((height, width)) * mask) for name in names)
    codes = rng.integers(1, n_regions + 1, size=(height, width)) * mask
    table = {code: f"R{code:02d}" for code in range(1, n_regions + 1)}
    return WorldGrid(channels=planes, mask=mask, regions=codes, region_table=table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_grid():
    return random_grid


@pytest.fixture(scope="session")
def small_world():
    return gen_world(
        SynthConfig(seed=3, height=20, width=20, land_fraction=0.8, n_regions=4, noise_std=0.0)
    )


@pytest.fixture(autouse=True)
def deterministic_torch():
    torch.manual_seed(0)
    torch.set_num_threads(1)


def prepare_world(world, window, layout=None, test_regions=("USA",), fraction=0.25, seed=0, augment=False):
    """Split, normalize and pad a raw world the way the CLI does, and tile it."""
    from types import SimpleNamespace
    from urbanet.Grid import assign_split, hold_out_regions, normalize_channels, pad_grid
    from urbanet.Tiler import DEFAULT_LAYOUT, DEFAULT_PAD, TileDataset, Tiler, WindowSpec

    split = assign_split(world, test_regions)
    split = hold_out_regions(world, split, fraction, seed)
    normalized, stats = normalize_channels(
        world, split=split, channels=INPUT_CHANNELS + (POPULATION_TARGET,)
    )
    spec = WindowSpec.centered(window)
    grid = pad_grid(normalized, max(DEFAULT_PAD, spec.reach))
    tiler = Tiler(grid, spec, layout or DEFAULT_LAYOUT, split)
    return SimpleNamespace(
        grid=grid,
        split=split,
        stats=stats,
        window=spec,
        tiler=tiler,
        train=TileDataset(tiler, "train", augment=augment),
        val=TileDataset(tiler, "validation"),
        test=TileDataset(tiler, "test"),
    )


@pytest.fixture
def prepare():
    return prepare_world
