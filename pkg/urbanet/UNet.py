import math
import struct
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ValidationError, validator
from urbanet.Errors import (
    CheckpointError,
    NumericError,
    PreconditionError,
    ShapeError,
    SpecError,
)

CHECKPOINT_MAGIC = b"UNPK"
CHECKPOINT_VERSION = 1


class UNetSpec(BaseModel):
    input_channels: int = 9
    base_features: int = 8
    depth: int = 2
    kernel_size: int = 3
    heads: List[Tuple[str, int]] = [("delta_urban", 1)]
    tile_size: int = 0

    class Config:
        allow_mutation = False

    @validator("input_channels", "base_features", "depth")
    def positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1, got {v}")
        return v

    @validator("kernel_size")
    def odd_kernel(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd number, got {v}")
        return v

    @validator("heads")
    def valid_heads(cls, v):
        if not v:
            raise ValueError("at least one output head is required")
        names = [name for name, _ in v]
        if len(set(names)) != len(names):
            raise ValueError(f"head names must be unique, got {names}")
        for name, channels in v:
            if not name.isidentifier():
                raise ValueError(f"head name '{name}' must be an identifier")
            if channels < 1:
                raise ValueError(f"head '{name}' needs at least one output channel")
        return v

    @validator("tile_size")
    def non_negative(cls, v):
        if v < 0:
            raise ValueError(f"tile_size must be non-negative, got {v}")
        return v

    @property
    def output_channels(self) -> int:
        return sum(channels for _, channels in self.heads)

    @property
    def head_names(self) -> List[str]:
        return [name for name, _ in self.heads]

    def features(self, level: int) -> int:
        return self.base_features * 2**level


def make_spec(**fields) -> UNetSpec:
    try:
        return UNetSpec(**fields)
    except ValidationError as e:
        raise SpecError(f"Invalid network spec: {e}") from e


TINY_SPEC = dict(base_features=4, depth=1)


class Relu(nn.Module):
    """max(0, x) that can remember its sign pattern for kink detection."""

    def __init__(self):
        super().__init__()
        self.record = False
        self.pattern = None

    def forward(self, x):
        if self.record:
            self.pattern = x > 0
        return F.relu(x)


class MaxPool(nn.Module):
    def __init__(self):
        super().__init__()
        self.record = False
        self.pattern = None

    def forward(self, x):
        out, winners = F.max_pool2d(x, 2, return_indices=True)
        if self.record:
            self.pattern = winners
        return out


class DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        padding = kernel_size // 2
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size, padding=padding)
        self.relu1 = Relu()
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size, padding=padding)
        self.relu2 = Relu()

    def forward(self, x):
        return self.relu2(self.conv2(self.relu1(self.conv1(x))))


class Encoder(nn.Module):
    """Contracting path; level `depth` is the bottleneck."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        channels = [spec.input_channels] + [spec.features(k) for k in range(spec.depth + 1)]
        self.levels = nn.ModuleList(
            DoubleConv(channels[k], channels[k + 1], spec.kernel_size)
            for k in range(spec.depth + 1)
        )
        self.pools = nn.ModuleList(MaxPool() for _ in range(spec.depth))

    def forward(self, x) -> List[torch.Tensor]:
        features = []
        for k, level in enumerate(self.levels):
            if k > 0:
                x = self.pools[k - 1](x)
            x = level(x)
            features.append(x)
        return features


class Decoder(nn.Module):
    """Expanding path for one task, ending in a linear 1x1 head."""

    def __init__(self, spec: UNetSpec, out_channels: int):
        super().__init__()
        padding = spec.kernel_size // 2
        self.up = nn.ModuleList(
            nn.Conv2d(spec.features(k + 1), spec.features(k), spec.kernel_size, padding=padding)
            for k in range(spec.depth)
        )
        self.up_relu = nn.ModuleList(Relu() for _ in range(spec.depth))
        self.blocks = nn.ModuleList(
            DoubleConv(2 * spec.features(k), spec.features(k), spec.kernel_size)
            for k in range(spec.depth)
        )
        self.head = nn.Conv2d(spec.base_features, out_channels, 1)

    def forward(self, features: List[torch.Tensor]):
        x = features[-1]
        for k in reversed(range(len(self.blocks))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.up_relu[k](self.up[k](x))
            x = self.blocks[k](torch.cat([x, features[k]], dim=1))
        return self.head(x)


class UNet(nn.Module):
    """Shared encoder with one decoder per output head.

    Tiles whose size is not a multiple of 2**depth are zero-padded to the next
    multiple and the output is center-cropped back, so 28x28 works at depth 3.
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoders = nn.ModuleDict(
            {name: Decoder(spec, channels) for name, channels in spec.heads}
        )

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ShapeError(
                f"Expected N x {self.spec.input_channels} x S x S input, got {tuple(x.shape)}."
            )
        height, width = x.shape[-2:]
        if height < 1 or width < 1:
            raise ShapeError(f"Empty spatial extent {tuple(x.shape[-2:])}.")
        multiple = 2**self.spec.depth
        pad_h = -height % multiple
        pad_w = -width % multiple
        if pad_h or pad_w:
            x = F.pad(x, (pad_w // 2, pad_w - pad_w // 2, pad_h // 2, pad_h - pad_h // 2))
        features = self.encoder(x)
        out = torch.cat([self.decoders[name](features) for name in self.spec.head_names], dim=1)
        if pad_h or pad_w:
            out = out[..., pad_h // 2 : pad_h // 2 + height, pad_w // 2 : pad_w // 2 + width]
        return out

    def record_patterns(self, enabled: bool = True):
        for module in self.modules():
            if isinstance(module, (Relu, MaxPool)):
                module.record = enabled
                module.pattern = None

    def patterns(self) -> List[torch.Tensor]:
        return [
            module.pattern
            for module in self.modules()
            if isinstance(module, (Relu, MaxPool)) and module.pattern is not None
        ]

    def head(self, name: str) -> nn.Conv2d:
        return self.decoders[name].head


def parameter_groups(model: UNet) -> Dict[str, List[str]]:
    groups = OrderedDict(encoder=[])
    for name in model.spec.head_names:
        groups[f"decoder.{name}"] = []
    for name, _ in model.named_parameters():
        if name.startswith("encoder."):
            groups["encoder"].append(name)
        else:
            head = name.split(".")[1]
            groups[f"decoder.{head}"].append(name)
    return groups


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def initialize(module: nn.Module, seed: int):
    """Fan-in scaled normal weights (variance 2/fan_in) and zero biases."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                fan_in = param[0].numel()
                noise = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                param.copy_(noise * math.sqrt(2.0 / fan_in))


def init_params(spec: Union[UNetSpec, dict], seed: int) -> UNet:
    if isinstance(spec, dict):
        spec = make_spec(**spec)
    model = UNet(spec)
    initialize(model, seed)
    return model


def forward(model: UNet, inputs) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(inputs), dtype=dtype)
    with torch.no_grad():
        return model(x).numpy()


@dataclass
class Batch:
    inputs: torch.Tensor
    targets: torch.Tensor
    masks: torch.Tensor

    def __post_init__(self):
        n, _, height, width = self.inputs.shape
        if self.targets.shape[0] != n or self.masks.shape[0] != n:
            raise ShapeError("Inputs, targets and masks disagree on the batch size.")
        if tuple(self.targets.shape[-2:]) != (height, width) or tuple(
            self.masks.shape[-2:]
        ) != (height, width):
            raise ShapeError("Inputs, targets and masks disagree on the tile size.")
        if not torch.all((self.masks == 0) | (self.masks == 1)):
            raise ShapeError("Masks must be binary.")


def masked_mse(pred, target, mask, reduction: str = "mean", weights=None):
    """Per-tile mean of squared residuals over mask-1 pixels, averaged over tiles.

    Multi-channel targets average the per-channel masked means (optionally
    weighted). Accumulation happens in float64.
    """
    pred = torch.as_tensor(pred).to(torch.float64)
    target = torch.as_tensor(target).to(torch.float64)
    mask = torch.as_tensor(mask).to(torch.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ.")
    valid = mask.sum(dim=(-2, -1))
    if torch.any(valid == 0):
        raise PreconditionError("A tile with an all-water mask has no pixels to score.")
    keep = mask[:, None] > 0
    squared = torch.where(keep, (target - pred) ** 2, torch.zeros((), dtype=torch.float64))
    per_channel = squared.sum(dim=(-2, -1)) / valid[:, None]
    if weights is None:
        per_sample = per_channel.mean(dim=1)
    else:
        weights = torch.as_tensor(weights, dtype=torch.float64)
        per_sample = (per_channel * weights).sum(dim=1) / weights.sum()
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def backward(model: UNet, batch: Batch, weights=None) -> Dict[str, torch.Tensor]:
    """Gradients of masked_mse(forward(batch)) for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = masked_mse(model(batch.inputs), batch.targets, batch.masks, weights=weights)
    if not torch.isfinite(loss):
        raise NumericError(f"Loss is {loss.item()} before backpropagation.")
    loss.backward()
    gradients = OrderedDict()
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not torch.all(torch.isfinite(grad)):
            raise NumericError(f"Non-finite gradient in layer '{name}'.")
        gradients[name] = grad.detach().clone()
    return gradients


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    retried: int = 0
    skipped: int = 0
    worst: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def random_batch(spec: UNetSpec, generator: torch.Generator, size: int, count: int) -> Batch:
    masks = (torch.rand(count, size, size, generator=generator, dtype=torch.float64) > 0.3)
    masks = masks.to(torch.float64)
    masks[:, size // 2, size // 2] = 1.0
    inputs = torch.rand(count, spec.input_channels, size, size, generator=generator, dtype=torch.float64)
    targets = 0.5 * torch.randn(
        count, spec.output_channels, size, size, generator=generator, dtype=torch.float64
    )
    return Batch(inputs=inputs * masks[:, None], targets=targets * masks[:, None], masks=masks)


def _patterns_equal(a: List[torch.Tensor], b: List[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check(
    spec: Union[UNetSpec, dict, None] = None,
    seed: int = 0,
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    tile_size: int = 8,
    batch_size: int = 2,
    max_params: Optional[int] = None,
    gradient_hook: Optional[Callable[[Dict[str, torch.Tensor]], None]] = None,
) -> GradCheckReport:
    """Compares `backward` with central differences in float64.

    Biases are randomized so no unit starts exactly on a ReLU kink. A
    difference whose +-eps evaluations change any ReLU sign or max-pool winner
    is retried with eps/10 once, then skipped.
    """
    if spec is None:
        spec = make_spec(**TINY_SPEC)
    elif isinstance(spec, dict):
        spec = make_spec(**spec)
    generator = torch.Generator().manual_seed(seed)
    model = init_params(spec, seed).double()
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.copy_(0.1 * torch.randn(param.shape, generator=generator, dtype=torch.float64))
    batch = random_batch(spec, generator, tile_size, batch_size)
    analytic = backward(model, batch)
    if gradient_hook is not None:
        gradient_hook(analytic)

    params = dict(model.named_parameters())
    coordinates = [(name, i) for name, param in params.items() for i in range(param.numel())]
    if max_params is not None and len(coordinates) > max_params:
        chosen = torch.randperm(len(coordinates), generator=generator)[:max_params]
        coordinates = [coordinates[i] for i in sorted(chosen.tolist())]

    def evaluate():
        with torch.no_grad():
            loss = masked_mse(model(batch.inputs), batch.targets, batch.masks).item()
        return loss, model.patterns()

    model.record_patterns(True)
    _, reference = evaluate()
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, checked=0)
    for name, index in coordinates:
        flat = params[name].data.view(-1)
        original = flat[index].item()
        numeric = None
        for step in (eps, eps / 10):
            flat[index] = original + step
            plus, plus_patterns = evaluate()
            flat[index] = original - step
            minus, minus_patterns = evaluate()
            flat[index] = original
            if _patterns_equal(plus_patterns, reference) and _patterns_equal(
                minus_patterns, reference
            ):
                numeric = (plus - minus) / (2 * step)
                break
            report.retried += 1
        if numeric is None:
            report.skipped += 1
            continue
        exact = analytic[name].view(-1)[index].item()
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-5)
        report.checked += 1
        if error > report.max_rel_error:
            report.max_rel_error = error
            report.worst = f"{name}[{index}]"
    model.record_patterns(False)
    if report.skipped:
        logging.warning(f"Gradient check skipped {report.skipped} parameters sitting on kinks")
    logging.info(
        f"Gradient check seed {seed}: max relative error {report.max_rel_error:.3e} "
        f"over {report.checked} parameters ({report.worst})"
    )
    return report


def save_checkpoint(model: UNet, path: str):
    spec = model.spec
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<HHHBBHB",
            CHECKPOINT_VERSION,
            spec.input_channels,
            spec.base_features,
            spec.depth,
            spec.kernel_size,
            spec.tile_size,
            len(spec.heads),
        ),
    ]
    for name, channels in spec.heads:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<B", len(encoded)) + encoded + struct.pack("<H", channels))
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        encoded = name.encode("ascii")
        array = tensor.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<B", len(encoded)) + encoded)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    logging.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> UNet:
    with open(path, "rb") as f:
        data = f.read()
    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise CheckpointError(f"{path} ends unexpectedly.")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    def text() -> str:
        nonlocal offset
        (length,) = take("<B")
        value = data[offset : offset + length].decode("ascii")
        offset += length
        return value

    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a network checkpoint.")
    offset = 4
    version, inputs, base, depth, kernel, tile_size, n_heads = take("<HHHBBHB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {version}.")
    heads = []
    for _ in range(n_heads):
        name = text()
        (channels,) = take("<H")
        heads.append((name, channels))
    try:
        spec = make_spec(
            input_channels=inputs,
            base_features=base,
            depth=depth,
            kernel_size=kernel,
            heads=heads,
            tile_size=tile_size,
        )
    except SpecError as e:
        raise CheckpointError(f"{path}: {e}") from e
    model = UNet(spec)
    expected = model.state_dict()
    (count,) = take("<I")
    state = OrderedDict()
    for _ in range(count):
        name = text()
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: array '{name}' {shape} does not fit the spec.")
        size = int(np.prod(shape)) if rank else 1
        if offset + 4 * size > len(data):
            raise CheckpointError(f"{path} ends inside array '{name}'.")
        values = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        state[name] = torch.from_numpy(values.reshape(shape).astype(np.float32))
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path} is missing arrays {sorted(missing)}.")
    model.load_state_dict(state)
    return model
