"""
Coupled dictionary learning for the LR feature / HR pixel patch pair.

Training pairs are sampled from HR images (LR is synthesized by downscaling),
normalized by the feature norm, stacked with 1/sqrt(M) weighting, and fed to an
online minibatch dictionary learner. The learned joint atoms are split back
into D_l and D_h and can be stored in a small checksummed binary file.
"""

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from sklearn.decomposition import sparse_encode

from .errors import (
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
from .features import GRADIENT_BANK, coding_patch_vector, extract_features, extract_patch_vector, make_patch_grid
from .imagecore import Image, downscale, mod_crop, to_luma

logger = logging.getLogger(__name__)

MAGIC = b"QSRD"
FORMAT_VERSION = 1


class TrainConfig(BaseModel):
    """Dictionary training settings"""

    n_atoms: int = Field(default=128, ge=1)
    n_patches: int = Field(default=50000, ge=1)
    variance_floor: float = Field(default=1e-4, ge=0.0)
    iterations: int = Field(default=20, ge=1)
    sparsity_lambda: float = Field(default=0.02, ge=0.0)
    seed: int = Field(default=0, ge=0)
    scale: int = Field(default=3, ge=1)
    patch_size_lr: int = Field(default=3, ge=1)
    stride: int = Field(default=3, ge=1)
    batch_size: int = Field(default=256, ge=1)
    mean_removed: bool = True
    feature_norm_floor: float = Field(default=1e-6, ge=0.0)
    n_jobs: Optional[int] = None

    @property
    def patch_size_hr(self) -> int:
        return self.patch_size_lr * self.scale

    @model_validator(mode='after')
    def _check_counts(self):
        if self.n_patches < self.n_atoms:
            raise ValueError(f"n_patches ({self.n_patches}) must be >= n_atoms ({self.n_atoms})")
        return self


@dataclass
class DictionaryPair:
    d_l: np.ndarray
    d_h: np.ndarray
    patch_size_lr: int
    patch_size_hr: int
    scale: int
    mean_removed: bool = True

    def __post_init__(self):
        self.d_l = np.asarray(self.d_l, dtype=np.float64)
        self.d_h = np.asarray(self.d_h, dtype=np.float64)
        if self.d_l.ndim != 2 or self.d_h.ndim != 2 or self.d_l.shape[1] != self.d_h.shape[1]:
            raise DictionaryFormatError(
                f"D_l {self.d_l.shape} and D_h {self.d_h.shape} must share their atom count"
            )
        if self.d_l.shape[0] != len(GRADIENT_BANK) * self.patch_size_lr ** 2:
            raise DictionaryFormatError(f"D_l has {self.d_l.shape[0]} rows, expected "
                                        f"{len(GRADIENT_BANK) * self.patch_size_lr ** 2}")
        if self.d_h.shape[0] != self.patch_size_hr ** 2:
            raise DictionaryFormatError(f"D_h has {self.d_h.shape[0]} rows, expected {self.patch_size_hr ** 2}")
        if not (np.all(np.isfinite(self.d_l)) and np.all(np.isfinite(self.d_h))):
            raise DictionaryFormatError("Dictionary entries must be finite")

    @property
    def n_atoms(self) -> int:
        return self.d_l.shape[1]

    @property
    def m_l(self) -> int:
        return self.d_l.shape[0]

    @property
    def m_h(self) -> int:
        return self.d_h.shape[0]

    def joint_atoms(self) -> np.ndarray:
        """Stacked (d_l / sqrt(M_l); d_h / sqrt(M_h)), unit columns for a trained pair"""
        return np.vstack([self.d_l / math.sqrt(self.m_l), self.d_h / math.sqrt(self.m_h)])

    @classmethod
    def from_joint(cls, joint: np.ndarray, m_l: int, patch_size_lr: int, patch_size_hr: int,
                   scale: int, mean_removed: bool = True) -> "DictionaryPair":
        m_h = joint.shape[0] - m_l
        return cls(joint[:m_l] * math.sqrt(m_l), joint[m_l:] * math.sqrt(m_h),
                   patch_size_lr, patch_size_hr, scale, mean_removed)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DictionaryPair):
            return NotImplemented
        return (self.patch_size_lr == other.patch_size_lr and self.patch_size_hr == other.patch_size_hr
                and self.scale == other.scale and self.mean_removed == other.mean_removed
                and np.array_equal(self.d_l, other.d_l) and np.array_equal(self.d_h, other.d_h))


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

def image_patch_pairs(hr: Image, cfg: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """All (feature, pixel) pairs of one HR image that pass the variance floor"""
    y = mod_crop(to_luma(hr), cfg.scale)
    features = extract_features(downscale(y, cfg.scale), cfg.scale)
    grid = make_patch_grid(y.width, y.height, cfg.patch_size_hr, cfg.stride)

    feats, pixels = [], []
    for anchor in grid:
        patch = extract_patch_vector(y, anchor, cfg.patch_size_hr)
        if np.var(patch) < cfg.variance_floor:
            continue
        if cfg.mean_removed:
            patch = patch - patch.mean()
        feats.append(coding_patch_vector(features, anchor, cfg.patch_size_hr, cfg.patch_size_lr))
        pixels.append(patch)

    m_l = len(GRADIENT_BANK) * cfg.patch_size_lr ** 2
    if not feats:
        return np.empty((m_l, 0)), np.empty((cfg.patch_size_hr ** 2, 0))
    return np.array(feats).T, np.array(pixels).T


def sample_training_patches(corpus: Sequence[Image], cfg: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Draw cfg.n_patches paired columns (M_l x n, M_h x n) uniformly from the corpus"""
    if not corpus:
        raise EmptyInputError("Training corpus is empty")

    pairs = [image_patch_pairs(img, cfg) for img in corpus if min(img.size) >= cfg.patch_size_hr]
    lr = np.hstack([f for f, _ in pairs]) if pairs else np.empty((0, 0))
    hr = np.hstack([p for _, p in pairs]) if pairs else np.empty((0, 0))
    available = lr.shape[1] if lr.ndim == 2 else 0
    if available < cfg.n_patches:
        raise InsufficientPatchesError(
            f"Corpus supplies {available} patches after pruning, {cfg.n_patches} requested"
        )

    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(available, size=cfg.n_patches, replace=False)
    logger.info(f"📄 Sampled {cfg.n_patches} of {available} patch pairs from {len(corpus)} images")
    return lr[:, chosen], hr[:, chosen]


# ---------------------------------------------------------------------------
# Online dictionary learning
# ---------------------------------------------------------------------------

class DictionaryTrainer:
    """Minibatch online dictionary learning with block-coordinate atom updates.

    Columns of the data matrix are samples. Codes are warm-started from the
    previous epoch; sufficient statistics A = sum(a a^T), B = sum(x a^T) are
    accumulated with a decaying past weight and every atom is refit from them
    after each minibatch, then renormalized to unit length. Atoms that no
    sample used during an epoch are reseeded from the worst-reconstructed
    sample.
    """

    def __init__(self, n_atoms: int, sparsity_lambda: float, epochs: int = 20, batch_size: int = 256,
                 seed: int = 0, holdout: float = 0.1, n_jobs: Optional[int] = None, max_iter: int = 1000):
        self.n_atoms = n_atoms
        self.sparsity_lambda = sparsity_lambda
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.holdout = holdout
        self.n_jobs = n_jobs
        self.max_iter = max_iter
        self.components_: Optional[np.ndarray] = None
        self.history_: List[float] = []

    def _encode(self, x: np.ndarray, init: Optional[np.ndarray] = None) -> np.ndarray:
        # sparse_encode minimizes 0.5||x - Da||^2 + alpha||a||_1
        return sparse_encode(x.T, self.components_.T, algorithm='lasso_cd',
                             alpha=self.sparsity_lambda / 2.0, init=init,
                             max_iter=self.max_iter, n_jobs=self.n_jobs)

    def objective(self, x: np.ndarray) -> float:
        """Mean of ||x - D a||^2 + lambda ||a||_1 over the columns of x"""
        codes = self._encode(x)
        residual = x - self.components_ @ codes.T
        per_sample = (residual ** 2).sum(axis=0) + self.sparsity_lambda * np.abs(codes).sum(axis=1)
        return float(per_sample.mean())

    def fit(self, data: np.ndarray) -> "DictionaryTrainer":
        data = np.asarray(data, dtype=np.float64)
        dim, n = data.shape
        if n < self.n_atoms:
            raise InsufficientPatchesError(f"{n} samples cannot train {self.n_atoms} atoms")
        if not np.all(np.isfinite(data)):
            raise DegenerateDataError("Training data contains non-finite values")
        if np.any(~data.any(axis=0)):
            raise DegenerateDataError("Training data contains all-zero columns")

        rng = np.random.default_rng(self.seed)
        order = rng.permutation(n)
        n_hold = int(round(self.holdout * n))
        if n - n_hold < self.n_atoms:
            n_hold = 0
        held = data[:, order[:n_hold]] if n_hold else data[:, order]
        train = data[:, order[n_hold:]]
        n_train = train.shape[1]

        self.components_ = self._seed_atoms(train, rng)
        self.history_ = [self.objective(held)]

        codes = np.zeros((n_train, self.n_atoms))
        a_acc = np.zeros((self.n_atoms, self.n_atoms))
        b_acc = np.zeros((dim, self.n_atoms))
        step = 0

        for epoch in range(self.epochs):
            started = time.time()
            usage = np.zeros(self.n_atoms, dtype=np.int64)
            shuffled = rng.permutation(n_train)
            for start in range(0, n_train, self.batch_size):
                batch = shuffled[start:start + self.batch_size]
                x = train[:, batch]
                codes[batch] = self._encode(x, init=codes[batch])
                alpha = codes[batch].T
                usage += np.count_nonzero(alpha, axis=1)

                step += 1
                keep = (1.0 - 1.0 / step) if step > 1 else 0.0
                a_acc = keep * a_acc + alpha @ alpha.T / x.shape[1]
                b_acc = keep * b_acc + x @ alpha.T / x.shape[1]
                self._update_atoms(a_acc, b_acc)

            dead = np.flatnonzero(usage == 0)
            if dead.size:
                self._reseed(dead, train, codes, a_acc, b_acc)

            self.history_.append(self.objective(held))
            logger.info(f"Epoch {epoch + 1}/{self.epochs}: held-out objective {self.history_[-1]:.6g}, "
                        f"{dead.size} atoms reseeded ({time.time() - started:.2f}s)")
        return self

    def _seed_atoms(self, train: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """k-means++ style seeding on angular distance: each new atom is a sample drawn
        with probability proportional to 1 - max cos^2 against the atoms chosen so far"""
        unit = train / np.linalg.norm(train, axis=0, keepdims=True)
        n = unit.shape[1]
        chosen = [int(rng.integers(n))]
        closeness = (unit[:, chosen[0]] @ unit) ** 2
        for _ in range(1, self.n_atoms):
            weight = np.clip(1.0 - closeness, 0.0, None)
            weight[chosen] = 0.0
            total = weight.sum()
            if total <= 1e-12:
                remaining = np.setdiff1d(np.arange(n), chosen)
                pick = int(rng.choice(remaining))
            else:
                pick = int(rng.choice(n, p=weight / total))
            chosen.append(pick)
            closeness = np.maximum(closeness, (unit[:, pick] @ unit) ** 2)
        return unit[:, chosen].copy()

    def _update_atoms(self, a_acc: np.ndarray, b_acc: np.ndarray) -> None:
        d = self.components_
        for j in range(self.n_atoms):
            if a_acc[j, j] <= 1e-12:
                continue
            u = (b_acc[:, j] - d @ a_acc[:, j]) / a_acc[j, j] + d[:, j]
            norm = np.linalg.norm(u)
            if norm > 1e-12:
                d[:, j] = u / norm

    def _reseed(self, dead: np.ndarray, train: np.ndarray, codes: np.ndarray,
                a_acc: np.ndarray, b_acc: np.ndarray) -> None:
        residual = ((train - self.components_ @ codes.T) ** 2).sum(axis=0)
        worst = np.argsort(-residual, kind='stable')
        for j, sample in zip(dead, worst):
            x = train[:, sample]
            self.components_[:, j] = x / np.linalg.norm(x)
            a_acc[j, :] = 0.0
            a_acc[:, j] = 0.0
            b_acc[:, j] = 0.0
            codes[:, j] = 0.0
        logger.debug(f"Reseeded atoms {dead.tolist()}")


def joint_training_matrix(lr_features: np.ndarray, hr_patches: np.ndarray,
                          feature_norm_floor: float = 1e-6) -> np.ndarray:
    """Normalize each pair by its feature norm and stack with 1/sqrt(M) weights"""
    if lr_features.shape[1] != hr_patches.shape[1]:
        raise DegenerateDataError(
            f"Feature and pixel matrices have {lr_features.shape[1]} and {hr_patches.shape[1]} columns"
        )
    norms = np.linalg.norm(lr_features, axis=0)
    usable = norms > feature_norm_floor
    if not np.any(usable):
        raise DegenerateDataError("Every training column has an all-zero feature vector")
    if not np.all(usable):
        logger.warning(f"Dropping {int((~usable).sum())} training pairs with vanishing features")
    s = norms[usable]
    m_l, m_h = lr_features.shape[0], hr_patches.shape[0]
    return np.vstack([lr_features[:, usable] / s / math.sqrt(m_l),
                      hr_patches[:, usable] / s / math.sqrt(m_h)])


def train_dictionary_pair(lr_features: np.ndarray, hr_patches: np.ndarray, cfg: TrainConfig) -> DictionaryPair:
    joint = joint_training_matrix(np.asarray(lr_features, dtype=np.float64),
                                  np.asarray(hr_patches, dtype=np.float64), cfg.feature_norm_floor)
    if joint.shape[1] < cfg.n_atoms:
        raise InsufficientPatchesError(f"{joint.shape[1]} usable samples cannot train {cfg.n_atoms} atoms")

    started = time.time()
    logger.info(f"🔧 Training {cfg.n_atoms} atoms on {joint.shape[1]} samples of dimension {joint.shape[0]}")
    trainer = DictionaryTrainer(cfg.n_atoms, cfg.sparsity_lambda, epochs=cfg.iterations,
                                batch_size=cfg.batch_size, seed=cfg.seed, n_jobs=cfg.n_jobs).fit(joint)
    logger.info(f"✅ Dictionary trained in {time.time() - started:.2f}s")

    return DictionaryPair.from_joint(trainer.components_, lr_features.shape[0], cfg.patch_size_lr,
                                     cfg.patch_size_hr, cfg.scale, cfg.mean_removed)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _header(pair: DictionaryPair) -> bytes:
    header = {
        'n_atoms': pair.n_atoms,
        'm_l': pair.m_l,
        'm_h': pair.m_h,
        'patch_size_lr': pair.patch_size_lr,
        'patch_size_hr': pair.patch_size_hr,
        'scale': pair.scale,
        'mean_removed': pair.mean_removed,
    }
    return json.dumps(header, sort_keys=True).encode('utf-8')


def dictionary_to_bytes(pair: DictionaryPair) -> bytes:
    header = _header(pair)
    body = (MAGIC + struct.pack('<HI', FORMAT_VERSION, len(header)) + header
            + pair.d_l.astype('<f8').tobytes(order='C') + pair.d_h.astype('<f8').tobytes(order='C'))
    return body + struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF)


def dictionary_from_bytes(raw: bytes) -> DictionaryPair:
    if len(raw) < len(MAGIC):
        if MAGIC.startswith(raw):
            raise TruncatedFileError("Dictionary file ends inside the magic bytes")
        raise MagicMismatchError("Not a dictionary file (bad magic)")
    if raw[:4] != MAGIC:
        raise MagicMismatchError(f"Not a dictionary file (magic {raw[:4]!r})")
    if len(raw) < 10:
        raise TruncatedFileError("Dictionary file ends inside the preamble")

    version, header_len = struct.unpack_from('<HI', raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"Dictionary format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 10 + header_len:
        raise TruncatedFileError("Dictionary file ends inside the header")
    try:
        header = json.loads(raw[10:10 + header_len].decode('utf-8'))
        m_l, m_h, n = int(header['m_l']), int(header['m_h']), int(header['n_atoms'])
    except (ValueError, KeyError, TypeError) as e:
        raise DictionaryFormatError(f"Malformed dictionary header: {e}")

    start = 10 + header_len
    split = start + 8 * m_l * n
    end = split + 8 * m_h * n
    if len(raw) < end + 4:
        raise TruncatedFileError(f"Dictionary payload truncated ({len(raw)} of {end + 4} bytes)")
    (stored,) = struct.unpack_from('<I', raw, end)
    if stored != zlib.crc32(raw[:end]) & 0xFFFFFFFF:
        raise ChecksumMismatchError("Dictionary checksum mismatch")

    d_l = np.frombuffer(raw[start:split], dtype='<f8').reshape(m_l, n).astype(np.float64)
    d_h = np.frombuffer(raw[split:end], dtype='<f8').reshape(m_h, n).astype(np.float64)
    return DictionaryPair(d_l, d_h, int(header['patch_size_lr']), int(header['patch_size_hr']),
                          int(header['scale']), bool(header['mean_removed']))


def save_dictionary(pair: DictionaryPair, path) -> None:
    try:
        Path(path).write_bytes(dictionary_to_bytes(pair))
    except OSError as e:
        raise ArtifactIOError(f"Cannot write dictionary {path}: {e}")
    logger.info(f"💾 Saved {pair.n_atoms}-atom dictionary to {path}")


def load_dictionary(path) -> DictionaryPair:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read dictionary {path}: {e}")
    return dictionary_from_bytes(raw)
