"""
Image representation and the pixel-level operations every pipeline needs:
8-bit PNG / PGM / PPM codec, BT.601 full-range colour conversion, separable
resampling with edge clamping, and the Y-channel PSNR metric.
"""

import logging
import math
from pathlib import Path
from typing import Literal, Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from pydantic import BaseModel

from .errors import (
    ChannelMismatchError,
    CorruptImageError,
    DimensionMismatchError,
    ImageReadError,
    ImageWriteError,
    InvalidDimensionError,
    NonFiniteDataError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SUPPORTED_SUFFIXES = {'.png': 'PNG', '.pgm': 'PPM', '.ppm': 'PPM', '.pnm': 'PPM'}

# BT.601 full range
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
CB_SCALE = 1.772
CR_SCALE = 1.402


class Image:
    """Planar float image, ``data`` has shape (channels, height, width)"""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3:
            raise InvalidDimensionError(f"Image data must be 2-D or 3-D, got shape {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise InvalidDimensionError(f"Image must be at least 1x1, got {data.shape[2]}x{data.shape[1]}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteDataError("Image intensities must be finite")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> tuple:
        return self.width, self.height

    def channel(self, index: int) -> "Image":
        return Image(self.data[index].copy())

    def copy(self) -> "Image":
        return Image(self.data.copy())

    @classmethod
    def constant(cls, width: int, height: int, value: float, channels: int = 1) -> "Image":
        return cls(np.full((channels, height, width), float(value)))

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height}x{self.channels})"


class ResampleKernel(BaseModel):
    """Separable resampling kernel; ``a`` is the Keys sharpness coefficient"""

    kind: Literal['bicubic', 'box'] = 'bicubic'
    a: float = -0.5


BICUBIC = ResampleKernel()
BOX = ResampleKernel(kind='box')


# ---------------------------------------------------------------------------
# File codec
# ---------------------------------------------------------------------------

def load_image(path: PathLike) -> Image:
    """Decode an 8-bit PNG / PGM / PPM file into [0, 1] intensities"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise UnsupportedFormatError(f"Unsupported image format '{suffix}' for {path}")

    try:
        pil = PILImage.open(path)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        raise ImageReadError(f"Cannot read image {path}: {e}")
    except UnidentifiedImageError as e:
        raise CorruptImageError(f"Corrupt or unrecognised image data in {path}: {e}")

    with pil:
        if pil.format not in ('PNG', 'PPM'):
            raise UnsupportedFormatError(f"{path} holds a {pil.format} image, expected PNG or PGM/PPM")
        try:
            pil.load()
        except (OSError, SyntaxError, ValueError) as e:
            raise CorruptImageError(f"Corrupt image data in {path}: {e}")

        mode = pil.mode
        if mode in ('I', 'I;16', 'I;16B', 'I;16L', 'F'):
            raise UnsupportedFormatError(f"{path} is not an 8-bit image (mode {mode})")
        if mode in ('1', 'LA'):
            pil = pil.convert('L')
        elif mode not in ('L', 'RGB'):
            pil = pil.convert('RGB')
        pixels = np.asarray(pil, dtype=np.float64) / 255.0

    if pixels.ndim == 3:
        pixels = np.transpose(pixels, (2, 0, 1))
    logger.debug(f"Loaded {path} ({pixels.shape[-1]}x{pixels.shape[-2]})")
    return Image(pixels)


def quantize_8bit(img: Image) -> np.ndarray:
    """Clamp to [0, 1] and round v*255 half away from zero, planar uint8"""
    clamped = np.clip(img.data, 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def save_image(img: Image, path: PathLike) -> None:
    """Encode as 8-bit PNG or binary PGM/PPM (chosen by suffix)"""
    path = Path(path)
    fmt = SUPPORTED_SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormatError(f"Unsupported output format '{path.suffix}' for {path}")
    if img.channels not in (1, 3):
        raise ChannelMismatchError(f"Only 1- or 3-channel images can be saved, got {img.channels}")

    pixels = quantize_8bit(img)
    if img.channels == 1:
        pil = PILImage.fromarray(np.ascontiguousarray(pixels[0]))
    else:
        pil = PILImage.fromarray(np.ascontiguousarray(np.transpose(pixels, (1, 2, 0))))

    try:
        pil.save(path, format=fmt)
    except OSError as e:
        raise ImageWriteError(f"Cannot write image {path}: {e}")


# ---------------------------------------------------------------------------
# Colour
# ---------------------------------------------------------------------------

def _require_rgb(img: Image) -> None:
    if img.channels != 3:
        raise ChannelMismatchError(f"Colour conversion needs 3 channels, got {img.channels}")


def rgb_to_ycbcr(img: Image) -> Image:
    _require_rgb(img)
    r, g, b = img.data
    wr, wg, wb = LUMA_WEIGHTS
    y = wr * r + wg * g + wb * b
    cb = 0.5 + (b - y) / CB_SCALE
    cr = 0.5 + (r - y) / CR_SCALE
    return Image(np.stack([y, cb, cr]))


def ycbcr_to_rgb(img: Image) -> Image:
    _require_rgb(img)
    y, cb, cr = img.data
    wr, wg, wb = LUMA_WEIGHTS
    r = y + CR_SCALE * (cr - 0.5)
    b = y + CB_SCALE * (cb - 0.5)
    g = (y - wr * r - wb * b) / wg
    return Image(np.stack([r, g, b]))


def to_luma(img: Image) -> Image:
    """Y plane of a colour image; single-channel images pass through"""
    if img.channels == 1:
        return img
    return Image(rgb_to_ycbcr(img).data[:1].copy())


def merge_luma(luma: Image, ycbcr: Image) -> Image:
    """Replace the Y plane of a YCbCr image and convert back to RGB"""
    if luma.size != ycbcr.size:
        raise DimensionMismatchError(f"Luma {luma.size} does not match chroma {ycbcr.size}")
    merged = ycbcr.data.copy()
    merged[0] = luma.data[0]
    return ycbcr_to_rgb(Image(merged))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _keys_weights(distance: np.ndarray, a: float) -> np.ndarray:
    s = np.abs(distance)
    near = ((a + 2.0) * s - (a + 3.0)) * s * s + 1.0
    far = ((a * s - 5.0 * a) * s + 8.0 * a) * s - 4.0 * a
    return np.where(s <= 1.0, near, np.where(s < 2.0, far, 0.0))


def resample_matrix(in_size: int, out_size: int, kernel: ResampleKernel = BICUBIC) -> np.ndarray:
    """(out_size, in_size) weights of a 1-D resampling with clamped edges.

    Output sample ``i`` is centred on input coordinate ``(i + 0.5) * in/out - 0.5``.
    Rows sum to one.
    """
    if in_size < 1 or out_size < 1:
        raise InvalidDimensionError(f"Resample sizes must be >= 1, got {in_size} -> {out_size}")

    ratio = in_size / out_size
    centres = (np.arange(out_size) + 0.5) * ratio - 0.5
    weights = np.zeros((out_size, in_size))

    if kernel.kind == 'bicubic':
        base = np.floor(centres).astype(int)
        for tap in range(-1, 3):
            idx = base + tap
            w = _keys_weights(centres - idx, kernel.a)
            np.add.at(weights, (np.arange(out_size), np.clip(idx, 0, in_size - 1)), w)
    else:
        half = max(ratio, 1.0) / 2.0
        lo = np.floor(centres - half).astype(int)
        span = int(math.ceil(2 * half)) + 2
        for tap in range(span):
            idx = lo + tap
            offset = idx - centres
            w = ((offset >= -half) & (offset < half)).astype(np.float64)
            np.add.at(weights, (np.arange(out_size), np.clip(idx, 0, in_size - 1)), w)

    sums = weights.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise InvalidDimensionError("Degenerate resampling kernel")
    return weights / sums


def resample(img: Image, out_w: int, out_h: int, kernel: ResampleKernel = BICUBIC) -> Image:
    """Separable resampling to ``out_w`` x ``out_h``"""
    if out_w < 1 or out_h < 1:
        raise InvalidDimensionError(f"Target size must be at least 1x1, got {out_w}x{out_h}")
    rows = resample_matrix(img.height, out_h, kernel)
    cols = resample_matrix(img.width, out_w, kernel)
    return Image(rows @ img.data @ cols.T)


def bicubic_upscale(img: Image, scale: int) -> Image:
    return resample(img, img.width * scale, img.height * scale, BICUBIC)


def downscale(img: Image, scale: int) -> Image:
    """Blur-free bicubic decimation to floor(w/scale) x floor(h/scale)"""
    return resample(img, img.width // scale, img.height // scale, BICUBIC)


def mod_crop(img: Image, scale: int) -> Image:
    """Trim right/bottom so both dimensions are multiples of ``scale``"""
    w = img.width - img.width % scale
    h = img.height - img.height % scale
    if w < 1 or h < 1:
        raise InvalidDimensionError(f"{img} is smaller than the scale factor {scale}")
    return Image(img.data[:, :h, :w].copy())


def crop(img: Image, x: int, y: int, w: int, h: int) -> Image:
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > img.width or y + h > img.height:
        raise InvalidDimensionError(f"Crop ({x},{y},{w},{h}) outside {img}")
    return Image(img.data[:, y:y + h, x:x + w].copy())


# ---------------------------------------------------------------------------
# Metric
# ---------------------------------------------------------------------------

def _quantized_luma(img: Image) -> np.ndarray:
    q = quantize_8bit(img).astype(np.float64) / 255.0
    if img.channels == 3:
        wr, wg, wb = LUMA_WEIGHTS
        return wr * q[0] + wg * q[1] + wb * q[2]
    if img.channels == 1:
        return q[0]
    raise ChannelMismatchError(f"PSNR needs 1- or 3-channel images, got {img.channels}")


def psnr_y(pred: Image, gt: Image) -> float:
    """Y-channel PSNR in dB after 8-bit quantisation; identical images give inf"""
    if pred.size != gt.size or pred.channels != gt.channels:
        raise DimensionMismatchError(
            f"PSNR inputs differ: {pred} vs {gt}"
        )
    mse = float(np.mean((_quantized_luma(pred) - _quantized_luma(gt)) ** 2))
    if mse == 0.0:
        return float('inf')
    return 10.0 * math.log10(1.0 / mse)
