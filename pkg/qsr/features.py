"""
Feature extraction F(Y) and patch bookkeeping.

The LR image is bicubically upsampled to the HR grid and filtered with a
first/second order gradient bank, so LR feature patches and HR pixel patches
share one coordinate frame. Patches are always visited column-major.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np
from scipy import ndimage

from .errors import ChannelMismatchError, FilterBankError, PatchBoundsError, PatchGeometryError
from .imagecore import Image, bicubic_upscale

logger = logging.getLogger(__name__)

Anchor = Tuple[int, int]


@dataclass
class FilterBank:
    """Named 2-D correlation kernels applied with edge clamping"""

    filters: List[Tuple[str, np.ndarray]]

    def __post_init__(self):
        if not self.filters:
            raise FilterBankError("A filter bank needs at least one filter")
        for name, kernel in self.filters:
            if kernel.ndim != 2 or not np.all(np.isfinite(kernel)):
                raise FilterBankError(f"Filter '{name}' must be a finite 2-D kernel")

    def __len__(self) -> int:
        return len(self.filters)


def gradient_filter_bank() -> FilterBank:
    f1 = np.array([[-1.0, 0.0, 1.0]])
    f3 = np.array([[1.0, 0.0, -2.0, 0.0, 1.0]])
    return FilterBank([('f1', f1), ('f2', f1.T), ('f3', f3), ('f4', f3.T)])


GRADIENT_BANK = gradient_filter_bank()


def apply_filter_bank(img: Image, bank: FilterBank = GRADIENT_BANK) -> Image:
    if img.channels != 1:
        raise ChannelMismatchError(f"Feature extraction needs a single (Y) channel, got {img.channels}")
    plane = img.data[0]
    responses = [ndimage.correlate(plane, kernel, mode='nearest') for _, kernel in bank.filters]
    return Image(np.stack(responses))


def extract_features(lr: Image, scale: int, bank: FilterBank = GRADIENT_BANK) -> Image:
    """Upsample by ``scale`` and stack the filter responses into one channel each"""
    if lr.channels != 1:
        raise ChannelMismatchError(f"Feature extraction needs a single (Y) channel, got {lr.channels}")
    upsampled = lr if scale == 1 else bicubic_upscale(lr, scale)
    return apply_filter_bank(upsampled, bank)


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    width: int
    height: int
    positions: List[Anchor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self) -> Iterator[Anchor]:
        return iter(self.positions)


def _axis_anchors(dim: int, patch_size: int, stride: int) -> List[int]:
    anchors = list(range(0, dim - patch_size + 1, stride))
    if anchors[-1] != dim - patch_size:
        anchors.append(dim - patch_size)
    return anchors


def make_patch_grid(width: int, height: int, patch_size: int, stride: int) -> PatchGrid:
    """Column-major anchors with a flush final row/column"""
    if patch_size < 1 or stride < 1:
        raise PatchGeometryError(f"Patch size and stride must be positive, got {patch_size}/{stride}")
    if patch_size > min(width, height):
        raise PatchGeometryError(
            f"Patch size {patch_size} does not fit a {width}x{height} image"
        )
    rows = _axis_anchors(height, patch_size, stride)
    cols = _axis_anchors(width, patch_size, stride)
    positions = [(r, c) for c in cols for r in rows]
    return PatchGrid(patch_size, stride, width, height, positions)


def _check_bounds(img: Image, anchor: Anchor, patch_size: int) -> None:
    r, c = anchor
    if r < 0 or c < 0 or r + patch_size > img.height or c + patch_size > img.width:
        raise PatchBoundsError(f"Patch {patch_size}x{patch_size} at {anchor} is outside {img}")


def extract_patch_vector(map: Image, anchor: Anchor, patch_size: int) -> np.ndarray:
    """Channel-major, then row-major flattening of one patch"""
    _check_bounds(map, anchor, patch_size)
    r, c = anchor
    return map.data[:, r:r + patch_size, c:c + patch_size].reshape(-1).copy()


def scatter_patch_vector(map: Image, anchor: Anchor, patch_size: int, vector: np.ndarray) -> None:
    """Inverse of extract_patch_vector, writes in place"""
    _check_bounds(map, anchor, patch_size)
    expected = map.channels * patch_size * patch_size
    if vector.size != expected:
        raise PatchGeometryError(f"Patch vector has {vector.size} entries, expected {expected}")
    r, c = anchor
    map.data[:, r:r + patch_size, c:c + patch_size] = vector.reshape(map.channels, patch_size, patch_size)


def coding_patch_vector(features: Image, anchor: Anchor, patch_size_hr: int, patch_size_lr: int) -> np.ndarray:
    """LR feature vector of the HR patch at ``anchor``.

    The feature map lives on the HR grid; one sample is taken at the centre of
    each HR unit cell, giving channels * patch_size_lr**2 entries.
    """
    if patch_size_hr % patch_size_lr:
        raise PatchGeometryError(
            f"HR patch {patch_size_hr} is not a multiple of LR patch {patch_size_lr}"
        )
    _check_bounds(features, anchor, patch_size_hr)
    cell = patch_size_hr // patch_size_lr
    offset = cell // 2
    r, c = anchor
    block = features.data[:, r + offset:r + patch_size_hr:cell, c + offset:c + patch_size_hr:cell]
    return block.reshape(-1).copy()
