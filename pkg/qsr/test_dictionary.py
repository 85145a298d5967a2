"""
Tests for patch sampling, dictionary learning and the dictionary file format
"""

import struct

import numpy as np
import pytest
from pydantic import ValidationError

from qsr.conftest import make_natural_crop
from qsr.dictionary import (
    DictionaryPair,
    DictionaryTrainer,
    TrainConfig,
    dictionary_from_bytes,
    dictionary_to_bytes,
    image_patch_pairs,
    joint_training_matrix,
    load_dictionary,
    sample_training_patches,
    save_dictionary,
    train_dictionary_pair,
)
from qsr.errors import (
    ArtifactIOError,
    ChecksumMismatchError,
    DegenerateDataError,
    DictionaryFormatError,
    EmptyInputError,
    InsufficientPatchesError,
    MagicMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from qsr.imagecore import Image


def unit_columns(rng, dim, k):
    d = rng.standard_normal((dim, k))
    return d / np.linalg.norm(d, axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def test_constant_corpus_has_no_patches():
    cfg = TrainConfig(n_atoms=2, n_patches=4)
    with pytest.raises(InsufficientPatchesError):
        sample_training_patches([Image.constant(18, 18, 0.5)], cfg)
    with pytest.raises(EmptyInputError):
        sample_training_patches([], cfg)


def test_zero_variance_floor_keeps_every_patch():
    cfg = TrainConfig(n_atoms=2, n_patches=4, variance_floor=0.0)
    feats, pixels = image_patch_pairs(Image.constant(18, 18, 0.5), cfg)
    assert feats.shape == (36, 16)
    assert pixels.shape == (81, 16)
    assert np.allclose(pixels, 0.0)


def test_sampling_is_deterministic():
    cfg = TrainConfig(n_atoms=4, n_patches=50, variance_floor=1e-6, seed=7)
    corpus = [make_natural_crop(1), make_natural_crop(2)]
    first = sample_training_patches(corpus, cfg)
    second = sample_training_patches(corpus, cfg)
    assert np.array_equal(first[0], second[0]) and np.array_equal(first[1], second[1])
    assert first[0].shape == (36, 50) and first[1].shape == (81, 50)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(n_atoms=10, n_patches=5)
    assert TrainConfig(patch_size_lr=3, scale=3).patch_size_hr == 9


def test_joint_matrix_drops_flat_features(rng):
    feats = rng.standard_normal((36, 5))
    feats[:, 1] = 0.0
    joint = joint_training_matrix(feats, rng.standard_normal((81, 5)))
    assert joint.shape == (117, 4)
    with pytest.raises(DegenerateDataError):
        joint_training_matrix(np.zeros((36, 3)), np.ones((81, 3)))


# ---------------------------------------------------------------------------
# Learning
# ---------------------------------------------------------------------------

def test_trainer_recovers_planted_atoms(rng):
    """Test one-sparse samples drawn from four atoms give those atoms back"""
    truth = unit_columns(rng, 20, 4)
    labels = rng.integers(0, 4, 400)
    coefs = rng.uniform(1.0, 2.0, 400) * rng.choice([-1.0, 1.0], 400)
    data = truth[:, labels] * coefs + 0.01 * rng.standard_normal((20, 400))

    trainer = DictionaryTrainer(4, sparsity_lambda=0.01, epochs=5, batch_size=64, seed=1).fit(data)
    cos = np.abs(truth.T @ trainer.components_)
    assert np.all(cos.max(axis=1) > 0.95)
    assert np.allclose(np.linalg.norm(trainer.components_, axis=0), 1.0)


def test_single_atom_finds_principal_direction(rng):
    u = unit_columns(rng, 12, 1)[:, 0]
    c = rng.uniform(0.5, 2.0, 200) * rng.choice([-1.0, 1.0], 200)
    data = np.outer(u, c) + 1e-3 * rng.standard_normal((12, 200))
    top = np.linalg.svd(data, full_matrices=False)[0][:, 0]

    trainer = DictionaryTrainer(1, sparsity_lambda=0.001, epochs=3, batch_size=50, seed=0).fit(data)
    assert abs(top @ trainer.components_[:, 0]) > 0.999


def test_training_lowers_held_out_objective(rng):
    truth = unit_columns(rng, 16, 6)
    codes = np.zeros((6, 300))
    for col in range(300):
        picked = rng.choice(6, 2, replace=False)
        codes[picked, col] = rng.uniform(0.5, 1.5, 2)
    data = truth @ codes + 0.01 * rng.standard_normal((16, 300))

    trainer = DictionaryTrainer(6, sparsity_lambda=0.05, epochs=8, batch_size=32, seed=3).fit(data)
    assert len(trainer.history_) == 9
    assert trainer.history_[-1] < trainer.history_[0]


def test_trainer_rejects_bad_data(rng):
    with pytest.raises(InsufficientPatchesError):
        DictionaryTrainer(10, 0.1).fit(rng.standard_normal((5, 4)))
    data = rng.standard_normal((5, 20))
    data[:, 3] = 0.0
    with pytest.raises(DegenerateDataError):
        DictionaryTrainer(2, 0.1).fit(data)
    data[:, 3] = np.inf
    with pytest.raises(DegenerateDataError):
        DictionaryTrainer(2, 0.1).fit(data)


def test_train_pair_end_to_end_is_reproducible():
    cfg = TrainConfig(n_atoms=8, n_patches=120, variance_floor=1e-6, iterations=2, batch_size=32, seed=4)
    corpus = [make_natural_crop(3), make_natural_crop(4)]
    feats, pixels = sample_training_patches(corpus, cfg)
    first = train_dictionary_pair(feats, pixels, cfg)
    second = train_dictionary_pair(feats, pixels, cfg)
    assert first.d_l.shape == (36, 8) and first.d_h.shape == (81, 8)
    assert first == second
    assert np.allclose(np.linalg.norm(first.joint_atoms(), axis=0), 1.0)


def test_pair_shape_checks(tiny_pair):
    with pytest.raises(DictionaryFormatError):
        DictionaryPair(tiny_pair.d_l[:-1], tiny_pair.d_h, 3, 9, 3)
    with pytest.raises(DictionaryFormatError):
        DictionaryPair(tiny_pair.d_l, tiny_pair.d_h[:, :-1], 3, 9, 3)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def test_dictionary_file_round_trip(tmp_path, tiny_pair):
    path = tmp_path / 'pair.qsrd'
    save_dictionary(tiny_pair, path)
    assert load_dictionary(path) == tiny_pair
    with pytest.raises(ArtifactIOError):
        load_dictionary(tmp_path / 'missing.qsrd')


def test_dictionary_file_errors(tiny_pair):
    raw = dictionary_to_bytes(tiny_pair)
    with pytest.raises(MagicMismatchError):
        dictionary_from_bytes(b'XXXX' + raw[4:])
    with pytest.raises(TruncatedFileError):
        dictionary_from_bytes(raw[:2])
    with pytest.raises(TruncatedFileError):
        dictionary_from_bytes(raw[:-10])

    bumped = raw[:4] + struct.pack('<H', 2) + raw[6:]
    with pytest.raises(VersionMismatchError):
        dictionary_from_bytes(bumped)

    corrupted = bytearray(raw)
    corrupted[-20] ^= 0xFF
    with pytest.raises(ChecksumMismatchError):
        dictionary_from_bytes(bytes(corrupted))
