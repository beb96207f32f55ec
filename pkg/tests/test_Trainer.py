import pytest
import torch
from pydantic import ValidationError
from torch.utils.data import Dataset
from urbanet.Errors import DivergenceError, SpecError
from urbanet.Evaluation import predict_world, residual_metrics
from urbanet.Synth import SynthConfig, gen_world
from urbanet.Tiler import MULTITASK_LAYOUT, POPULATION_TARGET, ChannelLayout
from urbanet.Trainer import (
    HISTORY_COLUMNS,
    MultiTaskSchedule,
    TrainConfig,
    Trainer,
    build_multitask,
    state_digest,
    train,
    train_multitask,
)
from urbanet.UNet import TINY_SPEC, Batch, backward, init_params, masked_mse, parameter_count

FAST = dict(batch_size=64, max_epochs=2, patience=5, threads=1)


def tiny_model(seed=0, **fields):
    return init_params(dict(TINY_SPEC, **fields), seed)


def test_zero_learning_rate_keeps_parameters(small_world, prepare):
    data = prepare(small_world, 8)
    model = tiny_model()
    before = state_digest(model)
    model, history = train(model, data.train, data.val, TrainConfig(learning_rate=0.0, **FAST))
    assert state_digest(model) == before
    assert len(history.records) == 2


def test_training_is_deterministic(small_world, prepare):
    data = prepare(small_world, 8)
    runs = []
    for _ in range(2):
        model, history = train(tiny_model(), data.train, data.val, TrainConfig(**FAST))
        losses = history.to_frame()[["epoch", "phase", "train_loss", "val_loss"]]
        runs.append((state_digest(model), losses))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].equals(runs[1][1])


def test_best_epoch_is_restored(small_world, prepare, tmp_path):
    data = prepare(small_world, 8)
    config = TrainConfig(max_epochs=4, patience=4, learning_rate=3e-3)
    trainer = Trainer(tiny_model(), config, checkpoint_path=str(tmp_path / "best.unpk"))
    model, history = trainer.fit(data.train, data.val)
    best = history.best("train")
    assert best.val_loss == min(record.val_loss for record in history.records)
    assert trainer.evaluate(trainer.loader(data.val, False)) == pytest.approx(best.val_loss, rel=1e-12)
    assert (tmp_path / "best.unpk").exists()
    assert (tmp_path / "best.unpk.final").exists()


def test_patience_stops_training(small_world, prepare):
    data = prepare(small_world, 8)
    config = TrainConfig(learning_rate=0.0, max_epochs=50, patience=1)
    _, history = train(tiny_model(), data.train, data.val, config)
    assert [record.epoch for record in history.records] == [1, 2]


def test_history_csv(small_world, prepare, tmp_path):
    data = prepare(small_world, 8)
    _, history = train(tiny_model(), data.train, data.val, TrainConfig(**FAST))
    path = tmp_path / "history.csv"
    history.to_csv(str(path))
    assert path.read_text().splitlines()[0] == ",".join(HISTORY_COLUMNS)


class InfiniteTargets(Dataset):
    def __len__(self):
        return 4

    def __getitem__(self, index):
        target = torch.full((1, 8, 8), float("inf"))
        return torch.zeros(9, 8, 8), target, torch.ones(8, 8)


def test_non_finite_loss_is_divergence():
    with pytest.raises(DivergenceError) as error:
        train(tiny_model(), InfiniteTargets(), InfiniteTargets(), TrainConfig(**FAST))
    assert error.value.epoch == 1


def test_small_step_decreases_batch_loss(small_world, prepare):
    data = prepare(small_world, 8)
    items = [data.train[i] for i in range(16)]
    batch = Batch(*(torch.stack(parts) for parts in zip(*items)))
    model = tiny_model(seed=3)
    before = masked_mse(model(batch.inputs), batch.targets, batch.masks).item()
    grads = backward(model, batch)
    state = {name: p.detach().clone() for name, p in model.named_parameters()}
    step = 1e-1
    for _ in range(20):
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(state[name] - step * grads[name])
            after = masked_mse(model(batch.inputs), batch.targets, batch.masks).item()
        if after < before:
            break
        step /= 2
    assert after < before


def test_shuffling_keeps_tiles_paired(small_world, prepare):
    data = prepare(small_world, 8)
    model = tiny_model()
    losses = []
    for seed in (1, 2):
        config = TrainConfig(learning_rate=0.0, max_epochs=1, batch_size=7, seed=seed)
        trainer = Trainer(model, config)
        losses.append(trainer.train_epoch(trainer.loader(data.train, True), trainer.optimizer(), 1))
    assert losses[0] == pytest.approx(losses[1], rel=1e-9)


def test_config_invariants():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValidationError):
        MultiTaskSchedule(phase1=TrainConfig(learning_rate=1e-4), phase2=TrainConfig(learning_rate=1e-3))
    assert MultiTaskSchedule().phase2.learning_rate < MultiTaskSchedule().phase1.learning_rate


def test_build_multitask_shares_weights(rng):
    pretrained = tiny_model(seed=5)
    model = build_multitask(pretrained, seed=1)
    assert model.spec.head_names == ["delta_urban", POPULATION_TARGET]
    inputs = torch.as_tensor(rng.random((2, 9, 8, 8)), dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(model(inputs)[:, :1], pretrained(inputs))
    decoder = parameter_count(model.decoders[POPULATION_TARGET])
    assert parameter_count(model) == parameter_count(pretrained) + decoder
    assert state_digest(model.encoder) == state_digest(pretrained.encoder)
    other = build_multitask(pretrained, seed=2)
    assert state_digest(other.decoders[POPULATION_TARGET]) != state_digest(model.decoders[POPULATION_TARGET])


def test_build_multitask_needs_single_task():
    with pytest.raises(SpecError):
        build_multitask(build_multitask(tiny_model()))


def test_phase_one_freezes_shared_parameters(small_world, prepare):
    data = prepare(small_world, 8, layout=MULTITASK_LAYOUT)
    pretrained = tiny_model(seed=2)
    model = build_multitask(pretrained, seed=3)
    encoder = state_digest(model.encoder)
    urban = state_digest(model.decoders["delta_urban"])
    population = state_digest(model.decoders[POPULATION_TARGET])
    schedule = MultiTaskSchedule(
        phase1=TrainConfig(learning_rate=1e-3, **FAST), phase2=TrainConfig(learning_rate=0.0, **FAST)
    )
    model, history = train_multitask(model, data.train, data.val, schedule)
    # Phase 2 has a zero rate, so any change comes from phase 1.
    assert state_digest(model.encoder) == encoder
    assert state_digest(model.decoders["delta_urban"]) == urban
    assert state_digest(model.decoders[POPULATION_TARGET]) != population
    assert [record.phase for record in history.records] == ["phase1"] * 2 + ["phase2"] * 2
    assert [record.epoch for record in history.records] == [1, 2, 3, 4]
    assert all(p.requires_grad for p in model.parameters())


def test_phase_two_updates_everything(small_world, prepare):
    data = prepare(small_world, 8, layout=MULTITASK_LAYOUT)
    model = build_multitask(tiny_model(seed=2), seed=3)
    encoder = state_digest(model.encoder)
    schedule = MultiTaskSchedule(
        phase1=TrainConfig(learning_rate=1e-3, **FAST), phase2=TrainConfig(learning_rate=1e-4, **FAST)
    )
    model, _ = train_multitask(model, data.train, data.val, schedule)
    assert state_digest(model.encoder) != encoder


def test_training_reduces_validation_loss(prepare):
    world = gen_world(SynthConfig(seed=1, height=32, width=32, land_fraction=0.8, n_regions=4, noise_std=0.0))
    data = prepare(world, 8)
    model = tiny_model(seed=0)
    trainer = Trainer(model, TrainConfig(max_epochs=3, learning_rate=3e-3))
    initial = trainer.evaluate(trainer.loader(data.val, False))
    _, history = trainer.fit(data.train, data.val)
    assert history.best("train").val_loss < initial


@pytest.mark.slow
def test_linear_world_reaches_one_percent_of_zero_loss(prepare):
    world = gen_world(SynthConfig(seed=1, height=64, width=64, land_fraction=0.8, n_regions=16, noise_std=0.0))
    data = prepare(world, 16, augment=True)
    model, history = train(init_params(dict(base_features=8, depth=2), 0), data.train, data.val, TrainConfig())
    zero = Trainer(model, TrainConfig())
    zero_loss = 0.0
    for inputs, targets, masks in zero.loader(data.val, False):
        zero_loss += masked_mse(torch.zeros_like(targets), targets, masks, reduction="none").sum().item()
    zero_loss /= len(data.val)
    assert history.best("train").val_loss < 0.01 * zero_loss


def population_r2(model, data, channel):
    prediction = predict_world(model, data.grid, data.window, data.split, "test", MULTITASK_LAYOUT if channel else ChannelLayout(targets=(POPULATION_TARGET,)))
    truth = data.grid.unpadded(data.grid.channel(POPULATION_TARGET))
    cells = data.split.selects("test") & (data.grid.unpadded(data.grid.mask) == 1)
    return residual_metrics(prediction.values[channel], truth, cells).r2


@pytest.mark.slow
def test_multitask_does_not_regress_population_change(prepare):
    improved = 0
    for seed in range(10):
        world = gen_world(SynthConfig(seed=seed, height=96, width=96, noise_std=0.01))
        single = prepare(world, 28, ChannelLayout(targets=(POPULATION_TARGET,)), augment=True)
        population, _ = train(
            init_params(dict(base_features=8, depth=2, heads=[(POPULATION_TARGET, 1)]), seed),
            single.train,
            single.val,
            TrainConfig(seed=seed, max_epochs=40),
        )
        urban = prepare(world, 28, augment=True)
        pretrained, _ = train(init_params(dict(base_features=8, depth=2), seed), urban.train, urban.val, TrainConfig(seed=seed, max_epochs=40))
        joint = prepare(world, 28, MULTITASK_LAYOUT, augment=True)
        model, _ = train_multitask(
            build_multitask(pretrained, seed),
            joint.train,
            joint.val,
            MultiTaskSchedule(
                phase1=TrainConfig(seed=seed, max_epochs=40),
                phase2=TrainConfig(seed=seed, max_epochs=40, learning_rate=1e-4),
            ),
        )
        single_r2 = population_r2(population, single, 0)
        multi_r2 = population_r2(model, joint, 1)
        assert multi_r2 >= single_r2 - 0.005
        improved += multi_r2 > single_r2
    assert improved >= 7
