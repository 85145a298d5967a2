"""
Tests for the image codec, colour conversion, resampling and PSNR
"""

import math

import numpy as np
import pytest

from qsr.errors import (
    CorruptImageError,
    DimensionMismatchError,
    ImageReadError,
    InvalidDimensionError,
    NonFiniteDataError,
    UnsupportedFormatError,
)
from qsr.imagecore import (
    BOX,
    Image,
    bicubic_upscale,
    crop,
    downscale,
    load_image,
    merge_luma,
    mod_crop,
    psnr_y,
    quantize_8bit,
    resample,
    resample_matrix,
    rgb_to_ycbcr,
    save_image,
    to_luma,
    ycbcr_to_rgb,
)


def test_colour_conversion_inverts(rng):
    """Test YCbCr -> RGB undoes RGB -> YCbCr"""
    img = Image(rng.uniform(0, 1, (3, 5, 7)))
    back = ycbcr_to_rgb(rgb_to_ycbcr(img))
    assert np.allclose(back.data, img.data, atol=1e-12)


def test_gray_pixels_have_neutral_chroma():
    img = Image(np.full((3, 2, 2), 0.3))
    ycc = rgb_to_ycbcr(img)
    assert np.allclose(ycc.data[0], 0.3)
    assert np.allclose(ycc.data[1:], 0.5)


def test_merge_luma_keeps_chroma(rng):
    img = Image(rng.uniform(0.2, 0.8, (3, 4, 4)))
    ycc = rgb_to_ycbcr(img)
    merged = merge_luma(to_luma(img), ycc)
    assert np.allclose(merged.data, img.data, atol=1e-12)


def test_resample_rows_sum_to_one():
    for in_size, out_size in [(5, 15), (15, 5), (7, 7), (10, 3)]:
        assert np.allclose(resample_matrix(in_size, out_size).sum(axis=1), 1.0)
        assert np.allclose(resample_matrix(in_size, out_size, BOX).sum(axis=1), 1.0)


def test_constant_image_survives_resampling():
    img = Image.constant(6, 4, 0.42)
    up = bicubic_upscale(img, 3)
    assert up.size == (18, 12)
    assert np.allclose(up.data, 0.42)
    assert np.allclose(downscale(up, 3).data, 0.42)


def test_downscale_inverts_bicubic_upscale(rng):
    """Test decimation samples the upscaled grid exactly at the LR pixel centres"""
    img = Image(rng.uniform(0, 1, (1, 6, 8)))
    assert np.allclose(downscale(bicubic_upscale(img, 3), 3).data, img.data, atol=1e-9)


def test_resample_rejects_empty_target():
    with pytest.raises(InvalidDimensionError):
        resample(Image.constant(4, 4, 0.0), 0, 3)


def test_same_size_bicubic_is_identity(rng):
    img = Image(rng.uniform(0, 1, (2, 7, 5)))
    assert np.allclose(resample_matrix(6, 6), np.eye(6), atol=1e-12)
    assert np.allclose(resample(img, 5, 7).data, img.data, atol=1e-12)


def test_non_finite_intensities_are_rejected():
    with pytest.raises(NonFiniteDataError):
        Image(np.array([[0.5, np.nan]]))
    with pytest.raises(NonFiniteDataError):
        Image(np.full((2, 2), np.inf))


def test_mod_crop_and_crop():
    img = Image(np.arange(110, dtype=float).reshape(11, 10))
    assert mod_crop(img, 3).size == (9, 9)
    part = crop(img, 2, 3, 4, 5)
    assert part.size == (4, 5)
    assert part.data[0, 0, 0] == img.data[0, 3, 2]
    with pytest.raises(InvalidDimensionError):
        crop(img, 8, 0, 4, 4)


def test_quantize_rounds_and_clamps():
    img = Image(np.array([[-0.1, 0.4 / 255, 0.6 / 255, 1.0, 1.2]]))
    assert quantize_8bit(img).tolist() == [[[0, 0, 1, 255, 255]]]


def test_psnr_identical_is_infinite(natural_crop):
    img = natural_crop(1)
    assert psnr_y(img, img.copy()) == math.inf


def test_psnr_known_value():
    """Test 0 vs 0.2 gray: 0.2 quantizes to 51/255"""
    gt = Image.constant(4, 4, 0.0)
    pred = Image.constant(4, 4, 0.2)
    expected = 10.0 * math.log10(1.0 / (51 / 255) ** 2)
    assert psnr_y(pred, gt) == pytest.approx(expected, abs=1e-9)


def test_psnr_is_symmetric(rng):
    for _ in range(5):
        a = Image(rng.uniform(0, 1, (3, 9, 11)))
        b = Image(rng.uniform(0, 1, (3, 9, 11)))
        assert psnr_y(a, b) == psnr_y(b, a)


def test_psnr_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        psnr_y(Image.constant(4, 4, 0.0), Image.constant(4, 5, 0.0))


def test_png_and_ppm_round_trip(tmp_path, rng):
    """Test 8-bit values survive save + load unchanged"""
    gray = Image(rng.integers(0, 256, (1, 5, 6)) / 255.0)
    colour = Image(rng.integers(0, 256, (3, 5, 6)) / 255.0)
    for name, img in [('g.png', gray), ('c.png', colour), ('g.pgm', gray), ('c.ppm', colour)]:
        save_image(img, tmp_path / name)
        loaded = load_image(tmp_path / name)
        assert loaded.channels == img.channels
        assert np.array_equal(quantize_8bit(loaded), quantize_8bit(img))


def test_load_errors(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / 'photo.jpg')
    with pytest.raises(ImageReadError):
        load_image(tmp_path / 'missing.png')
    broken = tmp_path / 'broken.png'
    broken.write_bytes(b'definitely not an image')
    with pytest.raises(CorruptImageError):
        load_image(broken)
