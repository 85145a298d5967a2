"""
Super-resolution pipelines.

All three pipelines share the same skeleton: bicubic upsampling and the
gradient feature map on the HR grid, one coding target per HR patch
(column-major), a per-patch coefficient vector, overlap-averaged synthesis
and finally backprojection onto the LR constraint. They differ only in how the
coefficients are found:

* ``sr_lasso``            continuous l1 coding by coordinate descent
* ``sr_classical_anneal`` binary coding, best read of a sampler per patch
* ``sr_ensemble_anneal``  warm start + clamped 32-variable subproblems packed
                          into 512-variable problems, Boltzmann-weighted reads
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, model_validator

from .dictionary import DictionaryPair
from .errors import (
    CoverageError,
    DimensionMismatchError,
    EmptyInputError,
    InvalidWeightsError,
    PatchBoundsError,
    ScaleMismatchError,
)
from .features import Anchor, coding_patch_vector, extract_features, extract_patch_vector, make_patch_grid
from .imagecore import BICUBIC, Image, bicubic_upscale, merge_luma, resample_matrix, rgb_to_ycbcr, save_image
from .qubo import (
    QuboProblem,
    SampleSet,
    SubproblemBatch,
    assemble_batch,
    clamp_subproblem,
    disassemble_batch,
    dump_problem,
    energy_impact_select,
)
from .solvers import Sampler, SamplerHandle, TabuConfig, lasso_solve, make_sampler, tabu_search

logger = logging.getLogger(__name__)

PHASES = ('cpu_opt', 'create_qubo', 'sampler_prep', 'sampler_opt', 'misc')

# zero-temperature limit of the read weights
GREEDY_BETA = 1e8


class SrConfig(BaseModel):
    scale: int = Field(default=3, ge=1)
    stride: int = Field(default=8, ge=1)
    lambda_lasso: float = Field(default=1e-5, ge=0.0)
    lambda_anneal: float = Field(default=0.1, ge=0.0)
    mu: float = Field(default=0.05, gt=0.0)
    # None selects 1 / std(read energies) per patch
    beta: Optional[float] = Field(default=None, gt=0.0)
    n_reads: int = Field(default=100, ge=1)
    backproject_iters: int = Field(default=100, ge=0)
    backproject_step: float = Field(default=1.0, gt=0.0)
    blur_sigma: float = Field(default=1.0, gt=0.0)
    blur_size: int = Field(default=7, ge=1)
    sampler: SamplerHandle = Field(default_factory=SamplerHandle)
    sub_size: int = Field(default=32, ge=1)
    batch_size: int = Field(default=512, ge=1)
    warm_start: Literal['tabu', 'random', 'zeros'] = 'tabu'
    tabu: TabuConfig = Field(default_factory=lambda: TabuConfig(restarts=2))
    ensemble: Literal['boltzmann', 'best'] = 'boltzmann'
    feature_norm_floor: float = Field(default=1e-6, ge=0.0)
    seed: int = Field(default=0, ge=0)
    n_jobs: int = Field(default=1, ge=1)

    @model_validator(mode='after')
    def _check_batch(self):
        if self.sub_size > self.batch_size:
            raise ValueError(f"sub_size ({self.sub_size}) exceeds batch_size ({self.batch_size})")
        return self


@dataclass
class SrOutput:
    image: Image
    entropy_map: Optional[Image] = None
    timings: Dict[str, float] = field(default_factory=lambda: {phase: 0.0 for phase in PHASES})
    anchors: List[Anchor] = field(default_factory=list)
    patch_entropies: Optional[np.ndarray] = None
    residuals: List[float] = field(default_factory=list)


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a (run seed, stream, index) key"""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Boltzmann weighting
# ---------------------------------------------------------------------------

def boltzmann_weights(energies: np.ndarray, occurrences: np.ndarray, beta: float) -> np.ndarray:
    """p_j proportional to O_j exp(-beta (E_j - min E))"""
    energies = np.asarray(energies, dtype=np.float64)
    occurrences = np.asarray(occurrences, dtype=np.float64)
    if energies.size == 0:
        raise EmptyInputError("Cannot weight an empty sample set")
    if energies.shape != occurrences.shape:
        raise DimensionMismatchError(f"{energies.size} energies but {occurrences.size} occurrence counts")
    if np.any(occurrences < 1):
        raise InvalidWeightsError("Occurrence counts must be >= 1")
    if beta < 0:
        raise InvalidWeightsError(f"beta must be non-negative, got {beta}")
    logw = np.log(occurrences) - beta * (energies - energies.min())
    w = np.exp(logw - logw.max())
    return w / w.sum()


def patch_entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return max(0.0, float(-(nz * np.log(nz)).sum()))


def adaptive_beta(energies: np.ndarray, occurrences: np.ndarray) -> float:
    """1 / occurrence-weighted std of the read energies, 1.0 when they agree"""
    energies = np.asarray(energies, dtype=np.float64)
    occurrences = np.asarray(occurrences, dtype=np.float64)
    mean = np.average(energies, weights=occurrences)
    std = float(np.sqrt(np.average((energies - mean) ** 2, weights=occurrences)))
    return 1.0 / std if std > 0 else 1.0


# ---------------------------------------------------------------------------
# Overlap accumulation
# ---------------------------------------------------------------------------

def accumulate_patch(canvas: np.ndarray, weight_canvas: np.ndarray, x_i: np.ndarray, anchor: Anchor,
                     patch_size: int) -> None:
    r, c = anchor
    h, w = canvas.shape
    if r < 0 or c < 0 or r + patch_size > h or c + patch_size > w:
        raise PatchBoundsError(f"Patch {patch_size}x{patch_size} at {anchor} is outside a {w}x{h} canvas")
    canvas[r:r + patch_size, c:c + patch_size] += x_i.reshape(patch_size, patch_size)
    weight_canvas[r:r + patch_size, c:c + patch_size] += 1.0


class PatchCanvas:
    """Sums overlapping patches and averages them on finalize"""

    def __init__(self, width: int, height: int, patch_size: int):
        self.patch_size = patch_size
        self.values = np.zeros((height, width))
        self.weights = np.zeros((height, width))

    def add(self, x_i: np.ndarray, anchor: Anchor) -> None:
        accumulate_patch(self.values, self.weights, x_i, anchor, self.patch_size)

    def finalize(self) -> Image:
        uncovered = int((self.weights == 0).sum())
        if uncovered:
            raise CoverageError(f"{uncovered} pixels are not covered by any patch")
        return Image(self.values / self.weights)


# ---------------------------------------------------------------------------
# Backprojection
# ---------------------------------------------------------------------------

def gaussian_blur_matrix(size: int, sigma: float, support: int) -> np.ndarray:
    """(size, size) 1-D gaussian filter with clamped edges"""
    radius = support // 2
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    matrix = np.zeros((size, size))
    rows = np.arange(size)
    for tap, weight in zip(taps, kernel):
        np.add.at(matrix, (rows, np.clip(rows + tap, 0, size - 1)), weight)
    return matrix


class DegradationOperator:
    """X -> downsample(blur(X)) as separable matrices A_h X A_w^T"""

    def __init__(self, hr_width: int, hr_height: int, scale: int, sigma: float = 1.0, support: int = 7):
        self.scale = scale
        self.a_h = resample_matrix(hr_height, hr_height // scale, BICUBIC) @ gaussian_blur_matrix(hr_height, sigma, support)
        self.a_w = resample_matrix(hr_width, hr_width // scale, BICUBIC) @ gaussian_blur_matrix(hr_width, sigma, support)
        self.lipschitz = np.linalg.norm(self.a_h, 2) ** 2 * np.linalg.norm(self.a_w, 2) ** 2

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.a_h @ x @ self.a_w.T

    def adjoint(self, e: np.ndarray) -> np.ndarray:
        return self.a_h.T @ e @ self.a_w


def degrade(hr: Image, cfg: SrConfig) -> Image:
    """The blur-then-downsample model the backprojection enforces"""
    op = DegradationOperator(hr.width, hr.height, cfg.scale, cfg.blur_sigma, cfg.blur_size)
    return Image(np.stack([op.forward(plane) for plane in hr.data]))


def backproject_with_history(x0: Image, lr: Image, cfg: SrConfig) -> Tuple[Image, List[float]]:
    """Gradient steps on ||downsample(blur(X)) - lr||^2; returns X and the residual per iteration"""
    if x0.channels != lr.channels or x0.width != lr.width * cfg.scale or x0.height != lr.height * cfg.scale:
        raise DimensionMismatchError(f"{x0} is not {cfg.scale}x of {lr}")

    op = DegradationOperator(x0.width, x0.height, cfg.scale, cfg.blur_sigma, cfg.blur_size)
    step = min(cfg.backproject_step, 1.9 / op.lipschitz)
    x = x0.data.copy()
    target = lr.data

    def residual(planes):
        return np.stack([op.forward(p) for p in planes]) - target

    e = residual(x)
    history = [float(np.linalg.norm(e))]
    for it in range(cfg.backproject_iters):
        x = x - step * np.stack([op.adjoint(p) for p in e])
        e = residual(x)
        history.append(float(np.linalg.norm(e)))
        if history[-1] > history[-2] + 1e-12:
            logger.warning(f"Backprojection residual grew at iteration {it + 1}: {history[-2]:.3e} -> {history[-1]:.3e}")

    logger.debug(f"Backprojection residual {history[0]:.4g} -> {history[-1]:.4g} in {cfg.backproject_iters} iterations")
    return Image(x), history


def backproject(x0: Image, lr: Image, cfg: SrConfig) -> Image:
    return backproject_with_history(x0, lr, cfg)[0]


# ---------------------------------------------------------------------------
# Shared patch geometry
# ---------------------------------------------------------------------------

@dataclass
class PatchTargets:
    """Coding targets y_i = f_i / s_i with their scale s_i and patch mean"""

    anchors: List[Anchor]
    targets: np.ndarray
    scales: np.ndarray
    means: np.ndarray
    patch_size: int
    width: int
    height: int


def _check_pair(pair: DictionaryPair, cfg: SrConfig) -> None:
    if pair.scale != cfg.scale:
        raise ScaleMismatchError(f"Dictionary was trained for x{pair.scale}, configuration asks for x{cfg.scale}")


def coding_targets(features: Image, pair: DictionaryPair, cfg: SrConfig,
                   upsampled: Optional[Image] = None) -> PatchTargets:
    """Column-major coding targets; flat patches get s = 0 and a zero target"""
    grid = make_patch_grid(features.width, features.height, pair.patch_size_hr, cfg.stride)
    targets = np.zeros((len(grid), pair.m_l))
    scales = np.zeros(len(grid))
    means = np.zeros(len(grid))
    for i, anchor in enumerate(grid):
        f = coding_patch_vector(features, anchor, pair.patch_size_hr, pair.patch_size_lr)
        s = float(np.linalg.norm(f))
        if s > cfg.feature_norm_floor:
            targets[i] = f / s
            scales[i] = s
        if pair.mean_removed and upsampled is not None:
            means[i] = extract_patch_vector(upsampled, anchor, pair.patch_size_hr).mean()
    return PatchTargets(grid.positions, targets, scales, means, pair.patch_size_hr, features.width, features.height)


def synthesize(pair: DictionaryPair, targets: PatchTargets, alphas: np.ndarray) -> Image:
    canvas = PatchCanvas(targets.width, targets.height, targets.patch_size)
    for anchor, alpha, s, mean in zip(targets.anchors, alphas, targets.scales, targets.means):
        canvas.add(s * (pair.d_h @ alpha) + mean, anchor)
    return canvas.finalize()


def _parallel(n_jobs: int):
    return Parallel(n_jobs=n_jobs, prefer='threads')


PatchSolver = Callable[[DictionaryPair, PatchTargets, SrConfig, Dict[str, float]],
                       Tuple[np.ndarray, Optional[np.ndarray]]]


def _run(lr: Image, pair: DictionaryPair, cfg: SrConfig, solve: PatchSolver, label: str) -> SrOutput:
    """Common skeleton; ``solve`` returns per-patch coefficients and optional entropies"""
    _check_pair(pair, cfg)
    started = time.perf_counter()
    timings = {phase: 0.0 for phase in PHASES}

    if lr.channels == 3:
        ycbcr = rgb_to_ycbcr(lr)
        lr_y = ycbcr.channel(0)
    elif lr.channels == 1:
        ycbcr, lr_y = None, lr
    else:
        raise DimensionMismatchError(f"Expected a 1- or 3-channel image, got {lr.channels}")

    upsampled = bicubic_upscale(lr_y, cfg.scale)
    features = extract_features(lr_y, cfg.scale)
    targets = coding_targets(features, pair, cfg, upsampled)
    logger.info(f"🔍 {label}: {len(targets.anchors)} patches on a {upsampled.width}x{upsampled.height} grid")

    alphas, entropies = solve(pair, targets, cfg, timings)

    x0 = synthesize(pair, targets, alphas)
    sr_y, residuals = backproject_with_history(x0, lr_y, cfg)
    image = sr_y if ycbcr is None else merge_luma(sr_y, bicubic_upscale(ycbcr, cfg.scale))

    entropy_map = None
    if entropies is not None:
        raster = np.zeros((targets.height, targets.width))
        # painter's order: later (column-major) patches overwrite earlier ones
        for (r, c), h in zip(targets.anchors, entropies):
            raster[r:r + targets.patch_size, c:c + targets.patch_size] = h
        entropy_map = Image(raster)

    total = time.perf_counter() - started
    timings['misc'] = max(0.0, total - sum(timings[p] for p in PHASES if p != 'misc'))
    logger.info(f"✅ {label} finished in {total:.2f}s")
    return SrOutput(image, entropy_map, timings, list(targets.anchors), entropies, residuals)


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------

def _solve_lasso(pair: DictionaryPair, targets: PatchTargets, cfg: SrConfig,
                 timings: Dict[str, float]) -> Tuple[np.ndarray, None]:
    started = time.perf_counter()
    rows = _parallel(cfg.n_jobs)(
        delayed(lasso_solve)(pair.d_l, y, cfg.lambda_lasso) for y in targets.targets
    )
    timings['cpu_opt'] += time.perf_counter() - started
    return np.array(rows).reshape(len(targets.anchors), pair.n_atoms), None


def sr_lasso(lr: Image, pair: DictionaryPair, cfg: SrConfig) -> SrOutput:
    return _run(lr, pair, cfg, _solve_lasso, "Lasso")


# ---------------------------------------------------------------------------
# Classical annealing
# ---------------------------------------------------------------------------

def _patch_problem(quadratic: np.ndarray, d_l: np.ndarray, y: np.ndarray, lam: float) -> QuboProblem:
    return QuboProblem(quadratic, -2.0 * (d_l.T @ y) + lam, float(y @ y))


def _quadratic(pair: DictionaryPair, mu: float) -> np.ndarray:
    gram = pair.d_l.T @ pair.d_l
    return mu * 0.5 * (gram + gram.T)


def sr_classical_anneal(lr: Image, pair: DictionaryPair, cfg: SrConfig,
                        sampler: Optional[Sampler] = None) -> SrOutput:
    sampler = sampler or make_sampler(cfg.sampler)

    def solve(pair, targets, cfg, timings):
        quadratic = _quadratic(pair, cfg.mu)

        def one(i: int) -> np.ndarray:
            p = _patch_problem(quadratic, pair.d_l, targets.targets[i], cfg.lambda_anneal)
            samples = sampler.sample(p, cfg.n_reads, seed=derive_seed(cfg.seed, 2, i))
            return samples.lowest()

        started = time.perf_counter()
        n_jobs = cfg.n_jobs if sampler.thread_safe else 1
        masks = _parallel(n_jobs)(delayed(one)(i) for i in range(len(targets.anchors)))
        timings['cpu_opt'] += time.perf_counter() - started
        return cfg.mu * np.array(masks, dtype=np.float64).reshape(len(targets.anchors), pair.n_atoms), None

    return _run(lr, pair, cfg, solve, "Classical annealing")


# ---------------------------------------------------------------------------
# Batched ensemble annealing
# ---------------------------------------------------------------------------

def _warm_start(p: QuboProblem, cfg: SrConfig, i: int) -> np.ndarray:
    if cfg.warm_start == 'tabu':
        return tabu_search(p, cfg.tabu.model_copy(update={'seed': derive_seed(cfg.seed, 3, i)}))
    if cfg.warm_start == 'random':
        return np.random.default_rng(derive_seed(cfg.seed, 4, i)).integers(0, 2, size=p.n).astype(np.int8)
    return np.zeros(p.n, dtype=np.int8)


def _patch_subproblem(quadratic: np.ndarray, d_l: np.ndarray, y: np.ndarray, cfg: SrConfig,
                      i: int) -> Tuple[np.ndarray, List[int], QuboProblem]:
    p = _patch_problem(quadratic, d_l, y, cfg.lambda_anneal)
    m0 = _warm_start(p, cfg, i)
    if cfg.sub_size >= p.n:
        index = list(range(p.n))
    else:
        index = energy_impact_select(p, m0, cfg.sub_size)
    return m0, index, clamp_subproblem(p, m0, index)


def create_qubo_batch(features: Optional[Image], pair: DictionaryPair, cfg: SrConfig,
                      targets: Optional[PatchTargets] = None) -> Tuple[SubproblemBatch, np.ndarray, List[List[int]]]:
    """Warm start, energy-impact selection and clamping per patch, packed into batch problems"""
    _check_pair(pair, cfg)
    if targets is None:
        targets = coding_targets(features, pair, cfg)
    quadratic = _quadratic(pair, cfg.mu)
    sub_size = min(cfg.sub_size, pair.n_atoms)
    batch_size = max(cfg.batch_size, sub_size)
    local = cfg.model_copy(update={'sub_size': sub_size, 'batch_size': batch_size})

    parts = _parallel(cfg.n_jobs)(
        delayed(_patch_subproblem)(quadratic, pair.d_l, y, local, i) for i, y in enumerate(targets.targets)
    )
    m0 = np.array([m for m, _, _ in parts], dtype=np.int8).reshape(len(parts), pair.n_atoms)
    index = [idx for _, idx, _ in parts]
    batch = assemble_batch([sub for _, _, sub in parts], batch_size, index)
    logger.info(f"🧩 {len(parts)} subproblems of size {sub_size} packed into {len(batch.problems)} problems")
    return batch, m0, index


def merged_masks(samples: SampleSet, m0: np.ndarray, index: Sequence[int]) -> np.ndarray:
    """One full mask per unique read: the warm start with ``index`` overwritten"""
    masks = np.repeat(m0[np.newaxis, :].astype(np.float64), len(samples), axis=0)
    masks[:, list(index)] = samples.solutions
    return masks


def read_weights(samples: SampleSet, mode: str = 'boltzmann', beta: Optional[float] = None) -> np.ndarray:
    """Per-read weights; 'best' and any beta >= GREEDY_BETA put all mass on the
    first listed lowest-energy read"""
    if mode != 'best' and beta is None:
        beta = adaptive_beta(samples.energies, samples.occurrences)
    if mode == 'best' or beta >= GREEDY_BETA:
        p = np.zeros(len(samples))
        p[int(np.argmin(samples.energies))] = 1.0
        return p
    return boltzmann_weights(samples.energies, samples.occurrences, beta)


def ensemble_coefficients(samples: SampleSet, m0: np.ndarray, index: Sequence[int], mu: float,
                          mode: str = 'boltzmann', beta: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """Weighted mean of mu * mask over the reads, and the entropy of the weights"""
    p = read_weights(samples, mode, beta)
    return p @ (mu * merged_masks(samples, m0, index)), patch_entropy(p)


def sr_ensemble_anneal(lr: Image, pair: DictionaryPair, cfg: SrConfig, sampler: Optional[Sampler] = None,
                       dump_dir: Optional[Path] = None) -> SrOutput:
    sampler = sampler or make_sampler(cfg.sampler, n_jobs=cfg.n_jobs)

    def solve(pair, targets, cfg, timings):
        started = time.perf_counter()
        batch, m0, index = create_qubo_batch(None, pair, cfg, targets)
        timings['create_qubo'] += time.perf_counter() - started

        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            for k, problem in enumerate(batch.problems):
                dump_problem(problem, Path(dump_dir) / f"batch_{k:04d}.json")

        results = []
        for k, problem in enumerate(batch.problems):
            started = time.perf_counter()
            prepared = sampler.prepare(problem)
            timings['sampler_prep'] += time.perf_counter() - started
            started = time.perf_counter()
            results.append(sampler.run(prepared, cfg.n_reads, seed=derive_seed(cfg.seed, 1, k)))
            timings['sampler_opt'] += time.perf_counter() - started
            logger.debug(f"Batch problem {k + 1}/{len(batch.problems)}: {len(results[-1])} unique reads")

        per_patch = disassemble_batch(batch, results)
        coefficients = [ensemble_coefficients(s, m0[i], index[i], cfg.mu, cfg.ensemble, cfg.beta)
                        for i, s in enumerate(per_patch)]
        alphas = np.array([a for a, _ in coefficients]).reshape(len(per_patch), pair.n_atoms)
        entropies = np.array([h for _, h in coefficients])
        return alphas, entropies

    return _run(lr, pair, cfg, solve, "Ensemble annealing")


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def export_entropy_map(output: SrOutput, png_path, csv_path=None) -> None:
    """PNG normalized by the largest entropy plus a per-patch (row, col, entropy) CSV"""
    if output.entropy_map is None:
        raise EmptyInputError("This output carries no entropy map")
    peak = output.entropy_map.data.max()
    scaled = output.entropy_map.data / peak if peak > 0 else np.zeros_like(output.entropy_map.data)
    save_image(Image(scaled), png_path)
    if csv_path is not None:
        frame = pd.DataFrame({
            'row': [r for r, _ in output.anchors],
            'col': [c for _, c in output.anchors],
            'entropy': output.patch_entropies,
        })
        frame.to_csv(csv_path, index=False)
