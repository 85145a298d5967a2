"""
Synthetic sparse-recovery experiments.

Each dataset draws a 756 x 100 standard normal design, a non-negative 10-atom
ground truth on the first ten columns, and splits the rows 36 / 720. Solvers
fit on the 36 training rows with the target scaled to unit norm (fit_design)
and are scored with 1 - R^2 on both splits while the sparsity knob is swept.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from sklearn.metrics import r2_score

from .errors import DimensionMismatchError, InvalidGridError, ZeroVarianceError
from .qubo import assemble_batch, build_sparse_coding_qubo, clamp_subproblem, disassemble_batch, energy_impact_select
from .solvers import AnnealConfig, SimulatedAnnealingSampler, TabuConfig, lasso_solve, tabu_search
from .sr import derive_seed, merged_masks, read_weights

logger = logging.getLogger(__name__)

N_ROWS = 756
N_COLUMNS = 100
N_TRAIN = 36
N_ACTIVE = 10

Solver = Literal['lasso', 'classical_anneal', 'ensemble_anneal']
SOLVERS: Tuple[str, ...] = ('lasso', 'classical_anneal', 'ensemble_anneal')

CSV_COLUMNS = ['solver', 'knob', 'value', 'mean_train_err', 'std_train_err',
               'mean_val_err', 'std_val_err', 'mean_l0', 'std_l0']


@dataclass
class SynthDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    alpha_true: np.ndarray
    seed: int


def generate_dataset(seed: int) -> SynthDataset:
    rng = np.random.default_rng(seed)
    x_all = rng.standard_normal((N_ROWS, N_COLUMNS))
    alpha = np.abs(rng.standard_normal(N_ACTIVE))
    y_all = x_all[:, :N_ACTIVE] @ alpha
    return SynthDataset(x_all[:N_TRAIN], y_all[:N_TRAIN], x_all[N_TRAIN:], y_all[N_TRAIN:], alpha, seed)


def one_minus_r2(y_hat: np.ndarray, y: np.ndarray) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y_hat.size != y.size or y.size < 2:
        raise DimensionMismatchError(f"Need two equal-length vectors of length >= 2, got {y_hat.size} and {y.size}")
    if np.var(y) == 0:
        raise ZeroVarianceError("1 - R^2 is undefined for a constant target")
    return 1.0 - r2_score(y, y_hat)


class SweepConfig(BaseModel):
    n_datasets: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0)
    mu: float = Field(default=0.05, gt=0.0)
    anneal: AnnealConfig = Field(default_factory=lambda: AnnealConfig(sweeps=256, reads=32))
    ensemble_reads: int = Field(default=100, ge=1)
    sub_size: int = Field(default=32, ge=1)
    batch_size: int = Field(default=512, ge=1)
    tabu: TabuConfig = Field(default_factory=lambda: TabuConfig(restarts=2))
    beta: Optional[float] = Field(default=None, gt=0.0)
    n_jobs: int = Field(default=1, ge=1)


def default_grid(solver: str) -> np.ndarray:
    if solver == 'lasso':
        return np.logspace(-3, math.log10(8.0), 25)
    # 0.05 steps where the binary solvers pass ten atoms
    return np.concatenate([np.linspace(0.0, 0.6, 13), np.linspace(1.0, 6.5, 12)])


@dataclass
class SweepResult:
    solver: str
    knob: str
    values: np.ndarray
    train_err: np.ndarray
    val_err: np.ndarray
    l0: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'solver': self.solver,
            'knob': self.knob,
            'value': self.values,
            'mean_train_err': self.train_err.mean(axis=1),
            'std_train_err': self.train_err.std(axis=1),
            'mean_val_err': self.val_err.mean(axis=1),
            'std_val_err': self.val_err.std(axis=1),
            'mean_l0': self.l0.mean(axis=1),
            'std_l0': self.l0.std(axis=1),
        }, columns=CSV_COLUMNS)


def fit_design(data: SynthDataset) -> Tuple[np.ndarray, np.ndarray, float]:
    """(D, target, s) that every solver fits: D = X_train, target = y_train / s with
    s = ||y_train||; predictions are s * X @ alpha.

    The unit-norm target puts each true coefficient at about |N(0,1)| / sqrt(360),
    the scale of the default mu = 0.05, and keeps QUBO coefficients of order one.
    """
    s = float(np.linalg.norm(data.y_train))
    return data.x_train, data.y_train / s, s


def _scores(data: SynthDataset, s: float, alpha: np.ndarray) -> Tuple[float, float]:
    train = one_minus_r2(s * (data.x_train @ alpha), data.y_train)
    val = one_minus_r2(s * (data.x_val @ alpha), data.y_val)
    return train, val


def _fit_lasso(data: SynthDataset, lam: float, cfg: SweepConfig, key: int) -> Tuple[float, float, float]:
    d, target, s = fit_design(data)
    alpha = lasso_solve(d, target, lam)
    return (*_scores(data, s, alpha), float(np.count_nonzero(alpha)))


def _fit_classical(data: SynthDataset, lam: float, cfg: SweepConfig, key: int) -> Tuple[float, float, float]:
    d, target, s = fit_design(data)
    p = build_sparse_coding_qubo(d, target, lam, cfg.mu)
    samples = SimulatedAnnealingSampler(cfg.anneal).sample(p, cfg.anneal.reads, seed=derive_seed(cfg.seed, 5, key))
    m = samples.lowest().astype(np.float64)
    return (*_scores(data, s, cfg.mu * m), float(m.sum()))


def _ensemble_point(datasets: Sequence[SynthDataset], lam: float, cfg: SweepConfig,
                    key: int) -> List[Tuple[float, float, float]]:
    """All datasets of one grid point share batch problems"""
    scales, m0s, indices, subs = [], [], [], []
    for d, data in enumerate(datasets):
        d_train, target, s = fit_design(data)
        p = build_sparse_coding_qubo(d_train, target, lam, cfg.mu)
        m0 = tabu_search(p, cfg.tabu.model_copy(update={'seed': derive_seed(cfg.seed, 6, key, d)}))
        k = min(cfg.sub_size, p.n)
        index = list(range(p.n)) if k == p.n else energy_impact_select(p, m0, k)
        scales.append(s)
        m0s.append(m0)
        indices.append(index)
        subs.append(clamp_subproblem(p, m0, index))

    sub_size = len(indices[0])
    batch = assemble_batch(subs, max(cfg.batch_size, sub_size), indices)
    sampler = SimulatedAnnealingSampler(cfg.anneal)
    results = [sampler.sample(problem, cfg.ensemble_reads, seed=derive_seed(cfg.seed, 7, key, j))
               for j, problem in enumerate(batch.problems)]

    rows = []
    for data, s, m0, index, samples in zip(datasets, scales, m0s, indices, disassemble_batch(batch, results)):
        p = read_weights(samples, 'boltzmann', cfg.beta)
        masks = merged_masks(samples, m0, index)
        alpha = p @ (cfg.mu * masks)
        rows.append((*_scores(data, s, alpha), float(p @ masks.sum(axis=1))))
    return rows


def _check_grid(grid: Sequence[float]) -> np.ndarray:
    values = np.asarray(list(grid), dtype=np.float64)
    if values.size == 0:
        raise InvalidGridError("The sweep grid is empty")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise InvalidGridError(f"Grid values must be finite and non-negative: {values.tolist()}")
    return values


def run_sweep(solver: Solver, grid: Sequence[float], n_datasets: int = 20,
              cfg: Optional[SweepConfig] = None) -> SweepResult:
    cfg = (cfg or SweepConfig()).model_copy(update={'n_datasets': n_datasets})
    if solver not in SOLVERS:
        raise InvalidGridError(f"Unknown solver '{solver}', expected one of {', '.join(SOLVERS)}")
    values = _check_grid(grid)
    datasets = [generate_dataset(cfg.seed + d) for d in range(cfg.n_datasets)]

    started = time.time()
    logger.info(f"📈 Sweeping {solver} over {values.size} points x {cfg.n_datasets} datasets")
    parallel = Parallel(n_jobs=cfg.n_jobs, prefer='threads')
    if solver == 'ensemble_anneal':
        table = parallel(delayed(_ensemble_point)(datasets, lam, cfg, g) for g, lam in enumerate(values))
    else:
        fit = _fit_lasso if solver == 'lasso' else _fit_classical
        flat = parallel(
            delayed(fit)(data, lam, cfg, g * cfg.n_datasets + d)
            for g, lam in enumerate(values) for d, data in enumerate(datasets)
        )
        table = [flat[g * cfg.n_datasets:(g + 1) * cfg.n_datasets] for g in range(values.size)]

    scores = np.array(table)
    logger.info(f"✅ {solver} sweep done in {time.time() - started:.2f}s")
    return SweepResult(solver, 'lambda', values, scores[:, :, 0], scores[:, :, 1], scores[:, :, 2])


def value_at_sparsity(result: SweepResult, target: float = N_ACTIVE) -> Dict:
    """The CSV row whose mean l0 is closest to ``target`` (first on ties)"""
    frame = result.to_frame()
    row = int(np.argmin(np.abs(frame['mean_l0'].to_numpy() - target)))
    return frame.iloc[row].to_dict()


def write_sweep_csv(results: Sequence[SweepResult], path) -> None:
    frame = pd.concat([r.to_frame() for r in results], ignore_index=True)
    frame.to_csv(path, index=False)


def write_sweep_svg(results: Sequence[SweepResult], path) -> None:
    """Error against sparsity, one line per solver and split, shaded by one std"""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for result in results:
        frame = result.to_frame().sort_values('mean_l0')
        for split, style in (('val', '-'), ('train', '--')):
            mean = frame[f'mean_{split}_err'].to_numpy()
            std = frame[f'std_{split}_err'].to_numpy()
            line, = ax.plot(frame['mean_l0'], mean, style, label=f"{result.solver} ({split})")
            ax.fill_between(frame['mean_l0'], mean - std, mean + std, color=line.get_color(), alpha=0.15)
    ax.set_xlabel('mean ||alpha||_0')
    ax.set_ylabel('1 - R^2')
    ax.legend(fontsize='small')
    fig.tight_layout()
    fig.savefig(Path(path), format='svg')
    plt.close(fig)
