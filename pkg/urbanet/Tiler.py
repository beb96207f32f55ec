import struct
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple
import numpy as np
import torch
from torch.utils.data import Dataset
from urbanet.Augment import AUGMENTATIONS, apply_to_planes
from urbanet.Errors import BoundsError, GridFormatError, PreconditionError
from urbanet.Grid import LABEL_NAMES, SPLIT_FILTERS, TRAIN, SplitAssignment, WorldGrid

INPUT_CHANNELS = (
    "dist_water",
    "dist_city",
    "elevation",
    "slope_range",
    "land_area",
    "population_2000",
    "urban_1980",
    "urban_1990",
    "urban_2000",
)
URBAN_TARGET = "delta_urban"
POPULATION_TARGET = "delta_population"
DEFAULT_PAD = 20


@dataclass(frozen=True)
class ChannelLayout:
    inputs: Tuple[str, ...] = INPUT_CHANNELS
    targets: Tuple[str, ...] = (URBAN_TARGET,)


DEFAULT_LAYOUT = ChannelLayout()
MULTITASK_LAYOUT = ChannelLayout(targets=(URBAN_TARGET, POPULATION_TARGET))


@dataclass(frozen=True)
class WindowSpec:
    size: int
    center_offset: Tuple[int, int]

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"Window size must be positive, got {self.size}.")
        for offset in self.center_offset:
            if not 0 <= offset < self.size:
                raise ValueError(
                    f"Center offset {self.center_offset} outside a {self.size}-pixel window."
                )

    @classmethod
    def centered(cls, size: int) -> "WindowSpec":
        # Even windows put the center at index S/2, spanning [r-S/2, r+S/2-1].
        return cls(size=size, center_offset=(size // 2, size // 2))

    @property
    def reach(self) -> int:
        return max(
            max(offset, self.size - 1 - offset) for offset in self.center_offset
        )


@dataclass(frozen=True, eq=False)
class TileSample:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    center: Tuple[int, int]
    region: int
    split: str


class Tiler:
    """Cuts fixed-size windows out of a padded grid, one per land pixel."""

    def __init__(
        self,
        grid: WorldGrid,
        window: WindowSpec,
        layout: ChannelLayout = DEFAULT_LAYOUT,
        split: Optional[SplitAssignment] = None,
    ):
        if grid.pad < window.reach:
            raise BoundsError(
                f"Grid padding {grid.pad} is smaller than the reach {window.reach} "
                f"of a {window.size}-pixel window."
            )
        self.grid = grid
        self.window = window
        self.layout = layout
        self.split = split
        self.height = grid.height - 2 * grid.pad
        self.width = grid.width - 2 * grid.pad
        if split is not None and split.labels.shape != (self.height, self.width):
            raise PreconditionError(
                f"Split labels {split.labels.shape} do not match the unpadded grid "
                f"{(self.height, self.width)}."
            )
        self.inputs = grid.stack(layout.inputs)
        self.targets = grid.stack(layout.targets)

    def label(self, row: int, col: int) -> str:
        if self.split is None:
            return LABEL_NAMES[TRAIN]
        return self.split.label_at(row, col)

    def tile_at(self, center: Tuple[int, int]) -> TileSample:
        row, col = int(center[0]), int(center[1])
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise BoundsError(f"Center {center} lies outside the unpadded grid.")
        pad = self.grid.pad
        prow, pcol = row + pad, col + pad
        if self.grid.mask[prow, pcol] != 1:
            raise PreconditionError(f"Center {center} is a water pixel.")
        top = prow - self.window.center_offset[0]
        left = pcol - self.window.center_offset[1]
        rows = slice(top, top + self.window.size)
        cols = slice(left, left + self.window.size)
        return TileSample(
            input=self.inputs[:, rows, cols],
            target=self.targets[:, rows, cols],
            mask=self.grid.mask[rows, cols],
            center=(row, col),
            region=int(self.grid.regions[prow, pcol]),
            split=self.label(row, col),
        )

    def centers(self, split_filter: str = "all") -> np.ndarray:
        if split_filter not in SPLIT_FILTERS:
            raise ValueError(f"Unknown split filter '{split_filter}'.")
        land = self.grid.unpadded(self.grid.mask) == 1
        if self.split is not None:
            land &= self.split.selects(split_filter)
        elif split_filter not in ("all", "train"):
            land[:] = False
        return np.argwhere(land)

    def sample_all(self, split_filter: str = "all") -> Iterator[TileSample]:
        for center in self.centers(split_filter):
            yield self.tile_at(center)

    def coverage_count(self, split_filter: str = "all") -> np.ndarray:
        """Number of emitted tiles whose window contains each unpadded pixel."""
        size = self.window.size
        off_row, off_col = self.window.center_offset
        pad = self.grid.pad
        indicator = np.zeros(self.grid.shape, dtype=np.int64)
        centers = self.centers(split_filter)
        indicator[centers[:, 0] + pad, centers[:, 1] + pad] = 1
        height, width = indicator.shape
        integral = np.zeros((height + 2 * size + 1, width + 2 * size + 1), dtype=np.int64)
        integral[size + 1 : size + 1 + height, size + 1 : size + 1 + width] = indicator
        integral = integral.cumsum(axis=0).cumsum(axis=1)
        # Centers covering pixel i satisfy i + off - S + 1 <= center <= i + off.
        rows = np.arange(height)[:, None]
        cols = np.arange(width)[None, :]
        low_r, high_r = rows + off_row + 1, rows + off_row + size + 1
        low_c, high_c = cols + off_col + 1, cols + off_col + size + 1
        counts = (
            integral[high_r, high_c]
            - integral[low_r, high_c]
            - integral[high_r, low_c]
            + integral[low_r, low_c]
        )
        return self.grid.unpadded(counts)


def tile_at(
    grid: WorldGrid,
    center: Tuple[int, int],
    window: WindowSpec,
    layout: ChannelLayout = DEFAULT_LAYOUT,
    split: Optional[SplitAssignment] = None,
) -> TileSample:
    return Tiler(grid, window, layout, split).tile_at(center)


def sample_all(
    grid: WorldGrid,
    window: WindowSpec,
    split_filter: str = "all",
    layout: ChannelLayout = DEFAULT_LAYOUT,
    split: Optional[SplitAssignment] = None,
) -> Iterator[TileSample]:
    return Tiler(grid, window, layout, split).sample_all(split_filter)


def land_centers(
    grid: WorldGrid, split: Optional[SplitAssignment] = None, split_filter: str = "all"
) -> np.ndarray:
    return Tiler(grid, WindowSpec(1, (0, 0)), ChannelLayout(inputs=(), targets=()), split).centers(
        split_filter
    )


def partition_centers(centers: np.ndarray, parts: int) -> List[np.ndarray]:
    """Disjoint, order-preserving center ranges for parallel workers."""
    return [chunk for chunk in np.array_split(centers, max(1, parts)) if len(chunk)]


def coverage_count(
    grid: WorldGrid,
    window: WindowSpec,
    split_filter: str = "all",
    split: Optional[SplitAssignment] = None,
) -> np.ndarray:
    return Tiler(grid, window, ChannelLayout(inputs=(), targets=()), split).coverage_count(
        split_filter
    )


class TileDataset(Dataset):
    """Lazily materialized tiles as float32 tensors `(input, target, mask)`.

    With augmentation, item `i` is transform `i // n` of base tile `i % n`, so
    consecutive items never repeat a base tile until every tile was seen once.
    """

    def __init__(self, tiler: Tiler, split_filter: str = "train", augment: bool = False):
        self.tiler = tiler
        self.centers = tiler.centers(split_filter)
        self.transforms = AUGMENTATIONS if augment else AUGMENTATIONS[:1]
        logging.debug(
            f"Tile dataset: {len(self.centers)} {split_filter} centers x "
            f"{len(self.transforms)} transforms"
        )

    def __len__(self) -> int:
        return len(self.centers) * len(self.transforms)

    def __getitem__(self, index: int):
        transform, base = divmod(index, len(self.centers))
        tile = self.tiler.tile_at(self.centers[base])
        transform = self.transforms[transform]
        return (
            torch.from_numpy(apply_to_planes(tile.input, transform).astype(np.float32)),
            torch.from_numpy(apply_to_planes(tile.target, transform).astype(np.float32)),
            torch.from_numpy(apply_to_planes(tile.mask, transform).astype(np.float32)),
        )


TILE_MAGIC = b"TILE"
TILE_HEADER = struct.Struct("<4siiHBHHH")
SPLIT_CODES = {"train": 0, "test": 1, "validation": 2}


def dump_tile(tile: TileSample, path: str):
    size = tile.mask.shape[0]
    header = TILE_HEADER.pack(
        TILE_MAGIC,
        tile.center[0],
        tile.center[1],
        tile.region,
        SPLIT_CODES[tile.split],
        size,
        tile.input.shape[0],
        tile.target.shape[0],
    )
    with open(path, "wb") as f:
        f.write(header)
        for planes in (tile.input, tile.target, tile.mask[None]):
            f.write(np.asarray(planes, dtype="<f4").tobytes())


def read_tile(path: str) -> TileSample:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < TILE_HEADER.size:
        raise GridFormatError(f"{path} is too short to be a tile dump.")
    magic, row, col, region, split, size, n_in, n_target = TILE_HEADER.unpack_from(data)
    if magic != TILE_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}.")
    planes = np.frombuffer(data, dtype="<f4", offset=TILE_HEADER.size)
    planes = planes.reshape(n_in + n_target + 1, size, size).astype(np.float32)
    names = {code: name for name, code in SPLIT_CODES.items()}
    return TileSample(
        input=planes[:n_in],
        target=planes[n_in : n_in + n_target],
        mask=planes[-1].astype(np.uint8),
        center=(row, col),
        region=region,
        split=names[split],
    )
