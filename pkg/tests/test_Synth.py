import numpy as np
import pytest
from pydantic import ValidationError
from urbanet.Grid import DEFAULT_TEST_REGIONS, assign_split, grid_bytes
from urbanet.Evaluation import stratify
from urbanet.Synth import REGION_CODES, SynthConfig, gen_world, oracle_metrics
from urbanet.Tiler import INPUT_CHANNELS, POPULATION_TARGET, URBAN_TARGET


def small(seed=0, **kwargs):
    values = dict(seed=seed, height=24, width=28, land_fraction=0.7, n_regions=4, noise_std=0.0)
    values.update(kwargs)
    return gen_world(SynthConfig(**values))


def manhattan_to(sources, shape):
    points = np.argwhere(sources)
    rows, cols = np.indices(shape)
    best = np.full(shape, np.inf)
    for r, c in points:
        best = np.minimum(best, np.abs(rows - r) + np.abs(cols - c))
    return best


def neighborhood_mean(plane, land):
    height, width = plane.shape
    result = np.zeros(plane.shape)
    for i in range(height):
        for j in range(width):
            if not land[i, j]:
                continue
            block = (slice(max(i - 2, 0), i + 3), slice(max(j - 2, 0), j + 3))
            result[i, j] = plane[block][land[block]].mean()
    return result


def test_generation_is_deterministic():
    config = SynthConfig(seed=5, height=30, width=30, n_regions=9)
    assert grid_bytes(gen_world(config)) == grid_bytes(gen_world(config))
    assert grid_bytes(gen_world(config)) != grid_bytes(gen_world(config.copy(update=dict(seed=6))))


def test_channels_and_regions():
    world = gen_world(SynthConfig(seed=1, height=40, width=40))
    assert world.channel_names == list(INPUT_CHANNELS) + [URBAN_TARGET, POPULATION_TARGET]
    assert sorted(world.region_table.values()) == sorted(REGION_CODES)
    split = assign_split(world, DEFAULT_TEST_REGIONS)
    assert split.counts["test"] > 0 and split.counts["train"] > 0


def test_water_is_zero_everywhere():
    world = small(seed=2, noise_std=0.05)
    water = world.mask == 0
    assert water.any()
    for name, plane in world.channels:
        assert (plane[water] == 0).all(), name
    assert (world.regions[water] == 0).all()
    assert (world.regions[~water] > 0).all()


def test_noise_free_urban_change_follows_formula():
    world = small(seed=4)
    land = world.mask == 1
    urban = world.channel("urban_2000")
    growth = neighborhood_mean(urban, land) * (1 - urban)
    expected = 0.25 * growth * np.exp(-world.channel("dist_city") / 8.0)
    expected += 0.05 * np.tanh(world.channel("population_2000") / 1000.0) * (1 - urban)
    expected[~land | (urban == 0)] = 0.0
    np.testing.assert_allclose(world.channel(URBAN_TARGET), expected, rtol=0, atol=1e-12)


def test_noise_free_population_change_follows_formula():
    world = small(seed=4)
    land = world.mask == 1
    urban = world.channel("urban_2000")
    growth = neighborhood_mean(urban, land) * (1 - urban)
    expected = 400.0 * growth
    expected += 0.1 * world.channel("population_2000") * np.exp(-world.channel("dist_city") / 12.0)
    expected[~land] = 0.0
    np.testing.assert_allclose(world.channel(POPULATION_TARGET), expected, rtol=1e-12, atol=1e-9)


def test_rural_land_stays_rural():
    rural_cells = 0
    for seed in range(3):
        world = small(seed=seed)
        land = world.mask == 1
        rural = land & (world.channel("urban_2000") == 0)
        assert (world.channel("dist_city")[rural] > 0).all()
        for name in ("urban_1980", "urban_1990", URBAN_TARGET):
            assert (world.channel(name)[rural] == 0).all(), name
        strata = stratify(world)
        np.testing.assert_array_equal(strata["all_cells"] & ~strata["builtup_positive"], rural)
        rural_cells += int(rural.sum())
    assert rural_cells > 0


def test_distances_match_brute_force():
    for seed in range(3):
        world = small(seed=seed)
        land = world.mask == 1
        water = np.pad(~land, 1, constant_values=True)
        to_water = manhattan_to(water, water.shape)[1:-1, 1:-1] - 1
        np.testing.assert_array_equal(world.channel("dist_water")[land], to_water[land])
        dist_city = world.channel("dist_city")
        cities = land & (dist_city == 0)
        assert cities.sum() == max(1, int(land.sum()) // 200)
        np.testing.assert_array_equal(dist_city[land], manhattan_to(cities, world.shape)[land])


def test_coast_is_distance_zero():
    world = small(seed=7)
    land = world.mask == 1
    water = np.pad(~land, 1, constant_values=True)
    coast = land & (water[:-2, 1:-1] | water[2:, 1:-1] | water[1:-1, :-2] | water[1:-1, 2:])
    assert coast.any()
    assert (world.channel("dist_water")[coast] == 0).all()
    assert (world.channel("dist_water")[land & ~coast] >= 1).all()


def test_all_land_world_measures_distance_to_the_edge(prepare):
    world = small(land_fraction=1.0)
    assert world.land_count == 24 * 28
    rows, cols = np.indices(world.shape)
    edge = np.minimum(np.minimum(rows, 23 - rows), np.minimum(cols, 27 - cols))
    np.testing.assert_array_equal(world.channel("dist_water"), edge)
    data = prepare(world, 8)
    assert len(data.train) > 0 and len(data.val) > 0
    assert all(low < high for low, high in data.stats.params.values())


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(height=0)
    with pytest.raises(ValidationError):
        SynthConfig(land_fraction=0.0)
    with pytest.raises(ValidationError):
        SynthConfig(noise_std=-1.0)
    with pytest.raises(ValidationError):
        SynthConfig(height=10, width=10, land_fraction=0.5)


def test_oracle_predictors():
    world = small(seed=3, height=40, width=40)
    for target in (URBAN_TARGET, POPULATION_TARGET):
        assert oracle_metrics(world, "true_function", target).r2 == pytest.approx(1.0, abs=1e-12)
    zero = oracle_metrics(world, "zero")
    persistence = oracle_metrics(world, "persistence")
    assert (zero.mean_abs, zero.max_abs, zero.std, zero.r2) == (
        persistence.mean_abs,
        persistence.max_abs,
        persistence.std,
        persistence.r2,
    )
    assert zero.r2 < 0


def test_noise_sets_oracle_residual():
    world = small(seed=3, height=60, width=60, noise_std=0.01)
    split = assign_split(world, ["USA"])
    row = oracle_metrics(world, "true_function", URBAN_TARGET, split, "train")
    assert row.std == pytest.approx(0.01, rel=0.1)
    assert row.n_cells == split.counts["train"]
