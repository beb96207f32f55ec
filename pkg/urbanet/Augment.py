import dataclasses
from enum import Enum
from typing import List
import numpy as np
from urbanet.Errors import ShapeError


class Transform(Enum):
    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"


# Training order: the original tile, then the five augmentations.
AUGMENTATIONS = (
    Transform.IDENTITY,
    Transform.HFLIP,
    Transform.VFLIP,
    Transform.ROT90,
    Transform.ROT180,
    Transform.ROT270,
)


def apply_to_planes(planes: np.ndarray, transform: Transform) -> np.ndarray:
    """Applies the spatial permutation to the last two axes.

    Rotations are counterclockwise: element (i, j) moves to (S-1-j, i).
    """
    if planes.shape[-1] != planes.shape[-2]:
        raise ShapeError(f"Augmentation needs square planes, got {planes.shape[-2:]}.")
    if transform is Transform.IDENTITY:
        out = planes
    elif transform is Transform.HFLIP:
        out = np.flip(planes, axis=-1)
    elif transform is Transform.VFLIP:
        out = np.flip(planes, axis=-2)
    elif transform is Transform.ROT90:
        out = np.rot90(planes, k=1, axes=(-2, -1))
    elif transform is Transform.ROT180:
        out = np.rot90(planes, k=2, axes=(-2, -1))
    elif transform is Transform.ROT270:
        out = np.rot90(planes, k=3, axes=(-2, -1))
    else:
        raise ValueError(f"Unknown transform {transform}.")
    return np.ascontiguousarray(out)


def apply_transform(tile, transform: Transform):
    return dataclasses.replace(
        tile,
        input=apply_to_planes(tile.input, transform),
        target=apply_to_planes(tile.target, transform),
        mask=apply_to_planes(tile.mask, transform),
    )


def augment_set(tile) -> List:
    return [apply_transform(tile, transform) for transform in AUGMENTATIONS]
