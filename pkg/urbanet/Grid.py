import os
import math
import struct
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
from urbanet.Errors import (
    DegenerateChannelError,
    GridFormatError,
    GridIntegrityError,
    PreconditionError,
)

MAGIC = b"WGRD"
VERSION = 1
HEADER = struct.Struct("<4sHIIHH")

WATER = 0
TRAIN = 1
TEST = 2
VALIDATION = 3
LABEL_NAMES = {WATER: "water", TRAIN: "train", TEST: "test", VALIDATION: "validation"}
SPLIT_FILTERS = {
    "all": (TRAIN, TEST, VALIDATION),
    "train": (TRAIN,),
    "test": (TEST,),
    "validation": (VALIDATION,),
}

# Default test set: continental U.S., mainland China, United Kingdom, Malawi.
DEFAULT_TEST_REGIONS = ("USA", "CHN", "GBR", "MWI")


@dataclass(frozen=True, eq=False)
class WorldGrid:
    """Multi-channel raster with a land/water mask and per-pixel region codes.

    `pad` records how many border pixels were added by `pad_grid`; centers and
    split labels elsewhere are expressed in unpadded coordinates.
    """

    channels: Tuple[Tuple[str, np.ndarray], ...]
    mask: np.ndarray
    regions: np.ndarray
    region_table: Dict[int, str] = field(default_factory=dict)
    pad: int = 0

    def __post_init__(self):
        mask = np.array(self.mask, dtype=np.uint8)
        regions = np.array(self.regions, dtype=np.uint16)
        if mask.ndim != 2:
            raise GridIntegrityError(f"Mask must be 2-D, got shape {mask.shape}.")
        if regions.shape != mask.shape:
            raise GridIntegrityError(
                f"Regions plane {regions.shape} does not match mask {mask.shape}."
            )
        if mask.size and mask.max(initial=0) > 1:
            raise GridIntegrityError("Mask values must be 0 or 1.")
        names = set()
        channels = []
        for name, plane in self.channels:
            if not name:
                raise GridFormatError("Channel names must be non-empty.")
            if name in names:
                raise GridFormatError(f"Duplicate channel name '{name}'.")
            names.add(name)
            plane = np.array(plane, dtype=np.float64)
            if plane.shape != mask.shape:
                raise GridIntegrityError(
                    f"Channel '{name}' has shape {plane.shape}, mask has {mask.shape}."
                )
            plane.setflags(write=False)
            channels.append((name, plane))
        mask.setflags(write=False)
        regions.setflags(write=False)
        object.__setattr__(self, "channels", tuple(channels))
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "region_table", dict(self.region_table))

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def channel_names(self) -> List[str]:
        return [name for name, _ in self.channels]

    @property
    def land_count(self) -> int:
        return int(self.mask.sum())

    def channel(self, name: str) -> np.ndarray:
        for channel_name, plane in self.channels:
            if channel_name == name:
                return plane
        raise KeyError(f"Channel '{name}' not found in grid.")

    def stack(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.zeros((0,) + self.shape)
        return np.stack([self.channel(name) for name in names])

    def with_channels(self, channels: Iterable[Tuple[str, np.ndarray]]) -> "WorldGrid":
        return WorldGrid(
            channels=tuple(channels),
            mask=self.mask,
            regions=self.regions,
            region_table=self.region_table,
            pad=self.pad,
        )

    def unpadded(self, plane: np.ndarray) -> np.ndarray:
        if self.pad == 0:
            return plane
        p = self.pad
        return plane[..., p : plane.shape[-2] - p, p : plane.shape[-1] - p]

    def validate(self):
        """Checks the water-zero invariant, naming the first offending pixel."""
        water = self.mask == 0
        bad_regions = np.argwhere(water & (self.regions != 0))
        if len(bad_regions):
            row, col = bad_regions[0]
            raise GridIntegrityError(
                f"Water pixel ({row}, {col}) carries region code {self.regions[row, col]}."
            )
        for name, plane in self.channels:
            bad = np.argwhere(water & (plane != 0.0))
            if len(bad):
                row, col = bad[0]
                raise GridIntegrityError(
                    f"Water pixel ({row}, {col}) has value {plane[row, col]} in channel '{name}'."
                )
        for code in np.unique(self.regions):
            if code != 0 and int(code) not in self.region_table:
                raise GridIntegrityError(f"Region code {code} missing from region table.")
        return self


@dataclass(frozen=True)
class NormStats:
    mode: str
    params: Dict[str, Tuple[float, float]]
    computed_on: str = "train"

    def __post_init__(self):
        if self.mode not in ("minmax", "zscore"):
            raise ValueError(f"Unknown normalization mode '{self.mode}'.")
        for name, (a, b) in self.params.items():
            if self.mode == "minmax" and b < a:
                raise ValueError(f"Channel '{name}' has max {b} below min {a}.")
            if self.mode == "zscore" and b < 0:
                raise ValueError(f"Channel '{name}' has negative stddev {b}.")

    @property
    def channels(self) -> List[str]:
        return list(self.params)


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    """Per-pixel split labels in unpadded coordinates."""

    test_regions: frozenset
    labels: np.ndarray
    validation_regions: frozenset = frozenset()

    @property
    def counts(self) -> Dict[str, int]:
        values = np.bincount(self.labels.ravel(), minlength=4)
        counts = {LABEL_NAMES[label]: int(values[label]) for label in (TRAIN, TEST, WATER)}
        if self.validation_regions:
            counts["validation"] = int(values[VALIDATION])
        return counts

    def selects(self, split_filter: str) -> np.ndarray:
        if split_filter not in SPLIT_FILTERS:
            raise ValueError(f"Unknown split filter '{split_filter}'.")
        return np.isin(self.labels, SPLIT_FILTERS[split_filter])

    def label_at(self, row: int, col: int) -> str:
        return LABEL_NAMES[int(self.labels[row, col])]


def _check_writable_grid(grid: WorldGrid):
    if not grid.channels:
        raise GridFormatError("A grid needs at least one channel.")
    grid.validate()
    for name in grid.channel_names:
        if len(name.encode("ascii")) > 255:
            raise GridFormatError(f"Channel name '{name}' is longer than 255 bytes.")
    for code, iso in grid.region_table.items():
        if not 0 < code < 65536:
            raise GridFormatError(f"Region code {code} is outside 1..65535.")
        if len(iso.encode("ascii")) > 255:
            raise GridFormatError(f"Region name '{iso}' is longer than 255 bytes.")


def grid_bytes(grid: WorldGrid) -> bytes:
    _check_writable_grid(grid)
    parts = [
        HEADER.pack(
            MAGIC,
            VERSION,
            grid.height,
            grid.width,
            len(grid.channels),
            len(grid.region_table),
        )
    ]
    for code, iso in grid.region_table.items():
        encoded = iso.encode("ascii")
        parts.append(struct.pack("<HB", code, len(encoded)) + encoded)
    for name in grid.channel_names:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<B", len(encoded)) + encoded)
    parts.append(grid.mask.astype(np.uint8).tobytes())
    parts.append(grid.regions.astype("<u2").tobytes())
    for _, plane in grid.channels:
        parts.append(plane.astype("<f8").tobytes())
    return b"".join(parts)


def save_grid(grid: WorldGrid, path: str):
    data = grid_bytes(grid)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise OSError(f"Unable to write grid to {path}: {e}") from e
    logging.info(f"Saved {grid.height}x{grid.width} grid to {path}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise GridFormatError("Unexpected end of file while reading the grid header.")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack("<B")
        try:
            return self.take(length).decode("ascii")
        except UnicodeDecodeError:
            raise GridFormatError("Names in a grid file must be ASCII.")


def parse_grid(data: bytes) -> WorldGrid:
    reader = _Reader(data)
    magic, version, height, width, n_channels, n_regions = HEADER.unpack(
        reader.take(HEADER.size)
    )
    if magic != MAGIC:
        raise GridFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}.")
    if version != VERSION:
        raise GridFormatError(f"Unsupported grid version {version}.")
    if n_channels == 0:
        raise GridFormatError("A grid needs at least one channel.")
    region_table = {}
    for _ in range(n_regions):
        (code,) = reader.unpack("<H")
        region_table[code] = reader.text()
    names = [reader.text() for _ in range(n_channels)]
    pixels = height * width
    body = memoryview(data)[reader.offset :]
    expected = pixels * (1 + 2 + 8 * n_channels)
    if len(body) != expected:
        raise GridIntegrityError(
            f"Plane data holds {len(body)} bytes but a {height}x{width} grid with "
            f"{n_channels} channels needs {expected}."
        )
    mask = np.frombuffer(body, dtype=np.uint8, count=pixels).reshape(height, width)
    regions = np.frombuffer(body, dtype="<u2", count=pixels, offset=pixels)
    channels = []
    offset = pixels * 3
    for name in names:
        plane = np.frombuffer(body, dtype="<f8", count=pixels, offset=offset)
        channels.append((name, plane.reshape(height, width).astype(np.float64)))
        offset += pixels * 8
    grid = WorldGrid(
        channels=tuple(channels),
        mask=mask.copy(),
        regions=regions.reshape(height, width).astype(np.uint16),
        region_table=region_table,
    )
    return grid.validate()


def load_grid(path: str) -> WorldGrid:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Grid file {path} does not exist.")
    with open(path, "rb") as f:
        data = f.read()
    try:
        grid = parse_grid(data)
    except (GridFormatError, GridIntegrityError) as e:
        raise type(e)(f"{path}: {e}") from e
    logging.info(
        f"Loaded {grid.height}x{grid.width} grid with {len(grid.channels)} channels from {path}"
    )
    return grid


def pad_grid(grid: WorldGrid, pad: int) -> WorldGrid:
    if pad < 0:
        raise ValueError(f"Padding must be non-negative, got {pad}.")
    width = ((pad, pad), (pad, pad))
    return WorldGrid(
        channels=tuple(
            (name, np.pad(plane, width, mode="constant", constant_values=0.0))
            for name, plane in grid.channels
        ),
        mask=np.pad(grid.mask, width, mode="constant", constant_values=0),
        regions=np.pad(grid.regions, width, mode="constant", constant_values=0),
        region_table=grid.region_table,
        pad=grid.pad + pad,
    )


def _fit_pixels(grid: WorldGrid, split: Optional[SplitAssignment]) -> np.ndarray:
    selected = grid.mask == 1
    if split is not None:
        labels = np.pad(split.labels, grid.pad, mode="constant", constant_values=WATER)
        if labels.shape != grid.shape:
            raise PreconditionError(
                f"Split labels {split.labels.shape} do not match grid {grid.shape}."
            )
        selected &= labels == TRAIN
    return selected


def normalize_channels(
    grid: WorldGrid,
    stats: Optional[NormStats] = None,
    split: Optional[SplitAssignment] = None,
    channels: Optional[Sequence[str]] = None,
    mode: str = "minmax",
) -> Tuple[WorldGrid, NormStats]:
    """Rescales channels with statistics fitted on training land pixels.

    Given `stats`, they are applied unchanged; water stays exactly 0.0 and
    values outside the fitted range are not clipped.
    """
    if stats is None:
        names = list(channels) if channels is not None else grid.channel_names
        selected = _fit_pixels(grid, split)
        if not selected.any():
            raise PreconditionError("No land pixels available to fit normalization.")
        params = {}
        for name in names:
            values = grid.channel(name)[selected]
            if mode == "minmax":
                low, high = float(values.min()), float(values.max())
            else:
                low, high = float(values.mean()), float(values.std())
            if (mode == "minmax" and high == low) or (mode == "zscore" and high == 0.0):
                raise DegenerateChannelError(name)
            params[name] = (low, high)
        stats = NormStats(
            mode=mode,
            params=params,
            computed_on="train" if split is not None else "all",
        )
    names = list(channels) if channels is not None else stats.channels
    missing = [name for name in names if name not in stats.params]
    if missing:
        raise PreconditionError(f"No normalization statistics for {missing}.")
    land = grid.mask == 1
    output = []
    for name, plane in grid.channels:
        if name in names:
            a, b = stats.params[name]
            if stats.mode == "minmax":
                scaled = (plane - a) / (b - a)
            else:
                scaled = (plane - a) / b
            plane = np.where(land, scaled, 0.0)
        output.append((name, plane))
    return grid.with_channels(output), stats


def write_norm_stats(stats: NormStats, path: str):
    lines = [f"# computed_on={stats.computed_on} mode={stats.mode}"]
    for name, (a, b) in stats.params.items():
        if stats.mode == "minmax":
            lines.append(f"channel={name} min={float(a)!r} max={float(b)!r}")
        else:
            lines.append(f"channel={name} mean={float(a)!r} std={float(b)!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_norm_stats(path: str) -> NormStats:
    mode = "minmax"
    computed_on = "train"
    params = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            fields = dict(
                item.split("=", 1) for item in line.lstrip("#").split() if "=" in item
            )
            if line.startswith("#"):
                mode = fields.get("mode", mode)
                computed_on = fields.get("computed_on", computed_on)
                continue
            if "channel" not in fields:
                raise GridFormatError(f"Malformed statistics line in {path}: {line}")
            if "min" in fields:
                mode = "minmax"
                params[fields["channel"]] = (float(fields["min"]), float(fields["max"]))
            else:
                mode = "zscore"
                params[fields["channel"]] = (float(fields["mean"]), float(fields["std"]))
    return NormStats(mode=mode, params=params, computed_on=computed_on)


def assign_split(grid: WorldGrid, test_regions: Iterable[str]) -> SplitAssignment:
    test_regions = frozenset(test_regions)
    known = set(grid.region_table.values())
    for iso in sorted(test_regions - known):
        logging.warning(f"Test region '{iso}' does not appear in the region table.")
    codes = [code for code, iso in grid.region_table.items() if iso in test_regions]
    labels = np.where(
        grid.mask == 0,
        WATER,
        np.where(np.isin(grid.regions, codes), TEST, TRAIN),
    ).astype(np.uint8)
    split = SplitAssignment(test_regions=test_regions, labels=grid.unpadded(labels))
    counts = split.counts
    logging.info(
        f"Split: {counts['train']} train, {counts['test']} test, {counts['water']} water pixels"
    )
    return split


def hold_out_regions(
    grid: WorldGrid, split: SplitAssignment, fraction: float = 0.1, seed: int = 0
) -> SplitAssignment:
    """Relabels a seeded subset of training regions as validation, by region code."""
    regions = grid.unpadded(grid.regions)
    candidates = sorted(int(code) for code in np.unique(regions[split.labels == TRAIN]))
    if len(candidates) < 2:
        raise PreconditionError(
            "Holding out validation regions needs at least two training regions."
        )
    count = min(len(candidates) - 1, max(1, math.ceil(fraction * len(candidates))))
    rng = np.random.default_rng(seed)
    chosen = sorted(int(code) for code in rng.choice(candidates, size=count, replace=False))
    labels = split.labels.copy()
    labels[(labels == TRAIN) & np.isin(regions, chosen)] = VALIDATION
    held_out = frozenset(grid.region_table[code] for code in chosen)
    logging.info(f"Validation regions: {', '.join(sorted(held_out))}")
    return SplitAssignment(
        test_regions=split.test_regions, labels=labels, validation_regions=held_out
    )
