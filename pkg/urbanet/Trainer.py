import copy
import time
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import pandas as pd
import torch
from pydantic import BaseModel, root_validator, validator
from torch.utils.data import DataLoader, Dataset
from urbanet.Errors import DivergenceError, PreconditionError, SpecError
from urbanet.UNet import (
    UNet,
    initialize,
    make_spec,
    masked_mse,
    parameter_groups,
    save_checkpoint,
)

HISTORY_COLUMNS = ["epoch", "phase", "train_loss", "val_loss", "seconds"]


class TrainConfig(BaseModel):
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-7
    seed: int = 0
    shuffle: bool = True
    threads: int = 1

    @validator("batch_size", "patience", "max_epochs", "threads")
    def at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1, got {v}")
        return v

    @validator("learning_rate")
    def non_negative_rate(cls, v):
        # Zero is accepted so a run can be made with parameters held fixed.
        if v < 0:
            raise ValueError(f"learning_rate must not be negative, got {v}")
        return v

    @validator("optimizer")
    def known_optimizer(cls, v):
        v = v.lower()
        if v not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got '{v}'")
        return v


class MultiTaskSchedule(BaseModel):
    phase1: TrainConfig = TrainConfig()
    phase2: TrainConfig = TrainConfig(learning_rate=1e-4)
    task_weights: Tuple[float, float] = (1.0, 1.0)
    frozen_sets: List[str] = ["encoder", "decoder.delta_urban"]

    @root_validator(skip_on_failure=True)
    def smaller_finetune_rate(cls, values):
        if values["phase2"].learning_rate >= values["phase1"].learning_rate:
            raise ValueError(
                "phase2 learning_rate must be smaller than phase1 learning_rate"
            )
        if min(values["task_weights"]) < 0 or sum(values["task_weights"]) <= 0:
            raise ValueError("task_weights must be non-negative with a positive sum")
        return values


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Dict[str, int] = field(default_factory=dict)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def add(self, record: EpochRecord):
        if record.epoch <= self.last_epoch:
            raise ValueError(f"Epoch {record.epoch} does not follow {self.last_epoch}.")
        self.records.append(record)

    def phase(self, name: str) -> List[EpochRecord]:
        return [record for record in self.records if record.phase == name]

    def best(self, phase: str) -> EpochRecord:
        epoch = self.best_epoch[phase]
        return next(record for record in self.records if record.epoch == epoch)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(record) for record in self.records], columns=HISTORY_COLUMNS
        )

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        logging.info(f"Wrote training history to {path}")


def state_digest(module: torch.nn.Module) -> str:
    """sha256 over every tensor of the state dict, in key order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class Trainer:
    """Minibatch training with early stopping on validation masked MSE.

    The returned model carries the parameters of the best validation epoch.
    When `checkpoint_path` is set, the best parameters are written there and
    the last epoch's parameters next to it with a `.final` suffix.
    """

    def __init__(
        self,
        model: UNet,
        config: TrainConfig,
        weights: Optional[Sequence[float]] = None,
        phase: str = "train",
        checkpoint_path: Optional[str] = None,
    ):
        self.model = model
        self.config = config
        self.weights = weights
        self.phase = phase
        self.checkpoint_path = checkpoint_path
        self.dtype = next(model.parameters()).dtype

    def loader(self, dataset: Dataset, shuffle: bool) -> DataLoader:
        workers = self.config.threads - 1
        return DataLoader(
            dataset,
            batch_size=self.config.batch_size,
            shuffle=shuffle,
            generator=torch.Generator().manual_seed(self.config.seed),
            num_workers=workers,
            prefetch_factor=2 if workers else None,
        )

    def optimizer(self) -> torch.optim.Optimizer:
        params = [p for p in self.model.parameters() if p.requires_grad]
        if not params:
            raise PreconditionError(f"No trainable parameters in phase '{self.phase}'.")
        if self.config.optimizer == "sgd":
            return torch.optim.SGD(
                params, lr=self.config.learning_rate, momentum=self.config.momentum
            )
        return torch.optim.Adam(params, lr=self.config.learning_rate)

    def loss(self, inputs, targets, masks, reduction="mean"):
        pred = self.model(inputs.to(self.dtype))
        return masked_mse(pred, targets, masks, reduction=reduction, weights=self.weights)

    def evaluate(self, loader: DataLoader) -> float:
        self.model.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for inputs, targets, masks in loader:
                losses = self.loss(inputs, targets, masks, reduction="none")
                total += losses.sum().item()
                count += len(losses)
        return total / count

    def train_epoch(self, loader: DataLoader, optimizer, epoch: int) -> float:
        self.model.train()
        total, count = 0.0, 0
        for inputs, targets, masks in loader:
            optimizer.zero_grad(set_to_none=True)
            loss = self.loss(inputs, targets, masks)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, loss.item(), self.phase)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(inputs)
            count += len(inputs)
        return total / count

    def fit(
        self,
        train_set: Dataset,
        val_set: Dataset,
        history: Optional[TrainHistory] = None,
    ) -> Tuple[UNet, TrainHistory]:
        if len(train_set) == 0 or len(val_set) == 0:
            raise PreconditionError(
                f"Training needs non-empty train and validation tiles, got "
                f"{len(train_set)} and {len(val_set)}."
            )
        history = history if history is not None else TrainHistory()
        train_loader = self.loader(train_set, self.config.shuffle)
        val_loader = self.loader(val_set, False)
        optimizer = self.optimizer()
        first = history.last_epoch + 1
        best_loss, best_state = float("inf"), None
        reference, waited = float("inf"), 0
        for epoch in range(first, first + self.config.max_epochs):
            started = time.perf_counter()
            train_loss = self.train_epoch(train_loader, optimizer, epoch)
            val_loss = self.evaluate(val_loader)
            if not torch.isfinite(torch.tensor(val_loss)):
                raise DivergenceError(epoch, val_loss, self.phase)
            seconds = time.perf_counter() - started
            history.add(EpochRecord(epoch, self.phase, train_loss, val_loss, seconds))
            logging.info(
                f"{self.phase} epoch {epoch}: train {train_loss:.6g} val {val_loss:.6g} "
                f"({seconds:.1f}s)"
            )
            if val_loss < best_loss:
                best_loss = val_loss
                best_state = copy.deepcopy(self.model.state_dict())
                history.best_epoch[self.phase] = epoch
            if val_loss < reference - self.config.min_delta:
                reference, waited = val_loss, 0
            else:
                waited += 1
                if waited >= self.config.patience:
                    logging.info(f"{self.phase}: no improvement for {waited} epochs, stopping")
                    break
        if self.checkpoint_path:
            save_checkpoint(self.model, f"{self.checkpoint_path}.final")
        self.model.load_state_dict(best_state)
        if self.checkpoint_path:
            save_checkpoint(self.model, self.checkpoint_path)
        return self.model, history


def train(
    model: UNet,
    train_set: Dataset,
    val_set: Dataset,
    config: Optional[TrainConfig] = None,
    checkpoint_path: Optional[str] = None,
) -> Tuple[UNet, TrainHistory]:
    """Trains `model` in place and returns it with its history."""
    trainer = Trainer(model, config or TrainConfig(), checkpoint_path=checkpoint_path)
    return trainer.fit(train_set, val_set)


def build_multitask(
    pretrained: UNet, seed: int = 0, task: str = "delta_population", channels: int = 1
) -> UNet:
    """Shares the pretrained encoder and decoder, adding a fresh decoder for `task`."""
    spec = pretrained.spec
    if len(spec.heads) != 1:
        raise SpecError(f"Expected a single-task model, got heads {spec.head_names}.")
    if task in spec.head_names:
        raise SpecError(f"The pretrained model already predicts '{task}'.")
    fields = spec.dict()
    fields["heads"] = list(spec.heads) + [(task, channels)]
    model = UNet(make_spec(**fields)).to(next(pretrained.parameters()).dtype)
    model.encoder.load_state_dict(pretrained.encoder.state_dict())
    first = spec.head_names[0]
    model.decoders[first].load_state_dict(pretrained.decoders[first].state_dict())
    initialize(model.decoders[task], seed)
    return model


def freeze(model: UNet, frozen_sets: Sequence[str]):
    groups = parameter_groups(model)
    unknown = [name for name in frozen_sets if name not in groups]
    if unknown:
        raise SpecError(f"Unknown parameter groups {unknown}; have {list(groups)}.")
    frozen = {name for group in frozen_sets for name in groups[group]}
    for name, param in model.named_parameters():
        param.requires_grad_(name not in frozen)


def train_multitask(
    model: UNet,
    train_set: Dataset,
    val_set: Dataset,
    schedule: Optional[MultiTaskSchedule] = None,
    history: Optional[TrainHistory] = None,
    checkpoint_path: Optional[str] = None,
) -> Tuple[UNet, TrainHistory]:
    """Trains the new decoder alone, then fine-tunes everything on both tasks.

    Tiles must carry one target plane per head, in head order.
    """
    schedule = schedule or MultiTaskSchedule()
    heads = model.spec.head_names
    if len(heads) != len(schedule.task_weights):
        raise SpecError(f"Schedule weights {schedule.task_weights} do not match heads {heads}.")
    history = history if history is not None else TrainHistory()

    freeze(model, schedule.frozen_sets)
    new_task_only = [0.0] * (len(heads) - 1) + [1.0]
    frozen = [name for name, p in model.named_parameters() if not p.requires_grad]
    logging.info(f"phase1: training {heads[-1]} decoder, {len(frozen)} tensors frozen")
    model, history = Trainer(model, schedule.phase1, new_task_only, "phase1").fit(
        train_set, val_set, history
    )

    freeze(model, [])
    logging.info(f"phase2: fine-tuning all parameters on {', '.join(heads)}")
    model, history = Trainer(
        model, schedule.phase2, schedule.task_weights, "phase2", checkpoint_path
    ).fit(train_set, val_set, history)
    return model, history
