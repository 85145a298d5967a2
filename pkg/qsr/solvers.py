"""
Optimization backends.

``lasso_solve`` handles the continuous l1 problem with scikit-learn. Binary
problems go through a small sampler interface: every sampler turns a QuboProblem
into a SampleSet in two timed steps, ``prepare`` (problem-specific setup, here
the dimod model) and ``run`` (the actual sampling). Backends: simulated
annealing (neal), multistart tabu search (dwave-tabu), exhaustive enumeration,
and a replay file that stands in for a remote annealer.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import neal
import numpy as np
import tabu as dwave_tabu
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, model_validator
from sklearn.linear_model import Lasso, LinearRegression

from .errors import (
    ArtifactIOError,
    HashCollisionError,
    NotRecordedError,
    ProblemTooLargeError,
    SolverInputError,
)
from .qubo import (
    QuboProblem,
    SampleSet,
    dimod_reads,
    energies,
    energy,
    problem_from_dict,
    problem_hash,
    problem_to_dict,
    to_bqm,
)

logger = logging.getLogger(__name__)

MAX_BRUTE_FORCE_VARIABLES = 24
MAX_SEED = 2 ** 32 - 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class AnnealConfig(BaseModel):
    sweeps: int = Field(default=256, ge=1)
    reads: int = Field(default=100, ge=1)
    beta_start: float = Field(default=0.1, gt=0.0)
    beta_end: float = Field(default=10.0, gt=0.0)
    interpolation: Literal['geometric', 'linear'] = 'geometric'
    seed: int = Field(default=0, ge=0, le=MAX_SEED)

    @model_validator(mode='after')
    def _check_schedule(self):
        if self.beta_start > self.beta_end:
            raise ValueError(f"beta_start ({self.beta_start}) must not exceed beta_end ({self.beta_end})")
        return self


class TabuConfig(BaseModel):
    """``restarts`` counts the first search from all zeros. ``tenure`` and
    ``max_iters`` (variable updates per restart) default to ceil(n/4) and 50n;
    ``timeout_ms`` is only a safety cap, the update budget ends each restart"""

    restarts: int = Field(default=8, ge=1)
    tenure: Optional[int] = Field(default=None, ge=1)
    max_iters: Optional[int] = Field(default=None, ge=1)
    timeout_ms: int = Field(default=60_000, ge=1)
    seed: int = Field(default=0, ge=0, le=MAX_SEED)


class SamplerHandle(BaseModel):
    kind: Literal['simulated_anneal', 'tabu', 'brute_force', 'replay'] = 'simulated_anneal'
    anneal: AnnealConfig = Field(default_factory=AnnealConfig)
    tabu: TabuConfig = Field(default_factory=TabuConfig)
    replay_path: Optional[str] = None

    @model_validator(mode='after')
    def _check_replay(self):
        if self.kind == 'replay' and not self.replay_path:
            raise ValueError("The replay sampler needs replay_path")
        return self


def _child_seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------

def lasso_objective(d: np.ndarray, y: np.ndarray, alpha: np.ndarray, lam: float) -> float:
    r = d @ alpha - y
    return float(r @ r + lam * np.abs(alpha).sum())


def lasso_solve(d: np.ndarray, y: np.ndarray, lam: float, tol: float = 1e-7,
                max_iter: int = 10000) -> np.ndarray:
    """argmin ||D a - y||^2 + lam ||a||_1 by coordinate descent.

    scikit-learn scales the squared error by 1 / (2 n_samples), so its alpha is
    lam / (2 n_samples). lam == 0 is plain (minimum-norm) least squares.
    """
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if d.ndim != 2 or d.shape[0] != y.size:
        raise SolverInputError(f"Design matrix {d.shape} does not match target of length {y.size}")
    if lam < 0:
        raise SolverInputError(f"lambda must be non-negative, got {lam}")
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(y)) and math.isfinite(lam)):
        raise SolverInputError("Lasso inputs must be finite")
    if not np.any(y):
        return np.zeros(d.shape[1])

    if lam == 0:
        model = LinearRegression(fit_intercept=False)
    else:
        model = Lasso(alpha=lam / (2.0 * d.shape[0]), fit_intercept=False, tol=tol, max_iter=max_iter)
    model.fit(d, y)
    return np.array(model.coef_, dtype=np.float64).reshape(-1)


# ---------------------------------------------------------------------------
# Tabu search
# ---------------------------------------------------------------------------

def tabu_search(p: QuboProblem, cfg: TabuConfig) -> np.ndarray:
    """Best vector of a multistart tabu search; the first restart starts from zeros"""
    n = p.n
    tenure = min(cfg.tenure or math.ceil(n / 4), n - 1)
    updates = cfg.max_iters or 50 * n
    per_variable = max(1, math.ceil(updates / n))
    result = dwave_tabu.TabuSampler().sample(
        to_bqm(p),
        initial_states=(np.zeros((1, n), dtype=np.int8), list(range(n))),
        num_reads=1,
        seed=cfg.seed,
        tenure=tenure,
        num_restarts=cfg.restarts - 1,
        timeout=cfg.timeout_ms,
        coefficient_z_first=per_variable,
        coefficient_z_restart=per_variable,
        lower_bound_z=updates,
    )
    return dimod_reads(result, n)[0]


# ---------------------------------------------------------------------------
# Exhaustive enumeration
# ---------------------------------------------------------------------------

def brute_force_minimum(p: QuboProblem, chunk: int = 1 << 16) -> Tuple[np.ndarray, float]:
    """All ground states (lexicographic rows) and the minimum energy"""
    n = p.n
    if n > MAX_BRUTE_FORCE_VARIABLES:
        raise ProblemTooLargeError(
            f"Brute force is limited to {MAX_BRUTE_FORCE_VARIABLES} variables, problem has {n}"
        )
    shifts = np.arange(n)
    best_e, ground = math.inf, []
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n))
        states = ((codes[:, None] >> shifts) & 1).astype(np.int8)
        e = energies(p, states)
        low = e.min()
        tol = 1e-9 * max(1.0, abs(low))
        if low < best_e - tol:
            best_e, ground = low, [states[e <= low + tol]]
        elif low <= best_e + tol:
            ground.append(states[e <= best_e + tol])
    states = np.vstack(ground)
    states = states[np.lexsort(states.T[::-1])]
    return states, float(best_e)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

@dataclass
class PreparedProblem:
    problem: QuboProblem
    data: Any = None


class Sampler:
    """Turns a QUBO into a SampleSet; ``prepare`` and ``run`` are timed separately"""

    name = 'sampler'
    thread_safe = True

    def prepare(self, p: QuboProblem) -> PreparedProblem:
        return PreparedProblem(p)

    def run(self, prepared: PreparedProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        raise NotImplementedError

    def sample(self, p: QuboProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        return self.run(self.prepare(p), reads, seed)


class SimulatedAnnealingSampler(Sampler):
    """neal annealing over fixed chunks of ``chunk_reads`` reads.

    Chunk k is seeded from (seed, k), so the reads do not depend on ``n_jobs``.
    """

    name = 'simulated_anneal'

    def __init__(self, cfg: AnnealConfig = AnnealConfig(), n_jobs: int = 1, chunk_reads: int = 32):
        self.cfg = cfg
        self.n_jobs = n_jobs
        self.chunk_reads = chunk_reads

    def prepare(self, p: QuboProblem) -> PreparedProblem:
        return PreparedProblem(p, to_bqm(p))

    def _anneal(self, bqm, reads: int, seed: int) -> np.ndarray:
        result = neal.SimulatedAnnealingSampler().sample(
            bqm,
            num_reads=reads,
            num_sweeps=self.cfg.sweeps,
            beta_range=(self.cfg.beta_start, self.cfg.beta_end),
            beta_schedule_type=self.cfg.interpolation,
            seed=seed,
        )
        return dimod_reads(result, len(bqm.variables))

    def run(self, prepared: PreparedProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        sizes = [min(self.chunk_reads, reads - start) for start in range(0, reads, self.chunk_reads)]
        seeds = _child_seeds(self.cfg.seed if seed is None else seed, len(sizes))
        if self.n_jobs == 1 or len(sizes) == 1:
            parts = [self._anneal(prepared.data, k, s) for k, s in zip(sizes, seeds)]
        else:
            parts = Parallel(n_jobs=self.n_jobs, prefer='threads')(
                delayed(self._anneal)(prepared.data, k, s) for k, s in zip(sizes, seeds)
            )
        return SampleSet.from_reads(prepared.problem, np.vstack(parts))


class TabuSampler(Sampler):
    """Each read is an independent multistart tabu search"""

    name = 'tabu'

    def __init__(self, cfg: TabuConfig = TabuConfig()):
        self.cfg = cfg

    def run(self, prepared: PreparedProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        results = [
            tabu_search(prepared.problem, self.cfg.model_copy(update={'seed': read_seed}))
            for read_seed in _child_seeds(self.cfg.seed if seed is None else seed, reads)
        ]
        return SampleSet.from_reads(prepared.problem, np.vstack(results))


class BruteForceSampler(Sampler):
    """Ground states with the reads split evenly, remainder to the first"""

    name = 'brute_force'

    def prepare(self, p: QuboProblem) -> PreparedProblem:
        if p.n > MAX_BRUTE_FORCE_VARIABLES:
            raise ProblemTooLargeError(
                f"Brute force is limited to {MAX_BRUTE_FORCE_VARIABLES} variables, problem has {p.n}"
            )
        return PreparedProblem(p)

    def run(self, prepared: PreparedProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        states, _ = brute_force_minimum(prepared.problem)
        states = states[:reads]
        g = len(states)
        counts = np.full(g, reads // g)
        counts[0] += reads % g
        return SampleSet(states, energies(prepared.problem, states), counts)


# ---------------------------------------------------------------------------
# Record / replay
# ---------------------------------------------------------------------------

def load_replay_index(path) -> Dict[str, Dict]:
    """hash -> {'problem': QuboProblem, 'samples': SampleSet}; first record wins"""
    path = Path(path)
    index: Dict[str, Dict] = {}
    if not path.exists():
        return index
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read replay file {path}: {e}")
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            key = record['hash']
            if key not in index:
                index[key] = {
                    'problem': problem_from_dict(record['problem']),
                    'samples': SampleSet.from_dict(record['samples']),
                }
        except (ValueError, KeyError, TypeError) as e:
            raise ArtifactIOError(f"Malformed replay record on line {number} of {path}: {e}")
    return index


def record_samples(p: QuboProblem, s: SampleSet, path, index: Optional[Dict[str, Dict]] = None) -> str:
    """Append (hash, problem, samples) to a JSON Lines replay file; returns the hash.

    ``index`` is an already loaded view of the file, kept up to date in place.
    A problem that is already recorded is not written twice.
    """
    if index is None:
        index = load_replay_index(path)
    key = problem_hash(p)
    if key in index:
        if index[key]['problem'] != p:
            raise HashCollisionError(f"Hash {key} is already recorded for a different problem")
        logger.debug(f"Problem {key[:12]} already recorded")
        return key

    record = {'hash': key, 'problem': problem_to_dict(p), 'samples': s.to_dict()}
    try:
        with open(path, 'a') as fh:
            fh.write(json.dumps(record) + '\n')
    except OSError as e:
        raise ArtifactIOError(f"Cannot write replay file {path}: {e}")
    index[key] = {'problem': p, 'samples': s}
    return key


class ReplaySampler(Sampler):
    name = 'replay'

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise ArtifactIOError(f"Replay file {self.path} does not exist")
        self.index = load_replay_index(self.path)
        logger.info(f"📂 Loaded {len(self.index)} recorded problems from {self.path}")

    def run(self, prepared: PreparedProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        key = problem_hash(prepared.problem)
        record = self.index.get(key)
        if record is None:
            raise NotRecordedError(f"Problem {key} is not in {self.path}")
        if record['problem'] != prepared.problem:
            raise HashCollisionError(f"Hash {key} in {self.path} belongs to a different problem")
        samples = record['samples']
        if samples.total_reads != reads:
            logger.debug(f"Replaying {samples.total_reads} reads where {reads} were requested")
        return samples


class RecordingSampler(Sampler):
    """Wraps another sampler and appends everything it returns to a replay file"""

    thread_safe = False

    def __init__(self, inner: Sampler, path):
        self.inner = inner
        self.path = Path(path)
        self.name = f"recording({inner.name})"
        self.index = load_replay_index(self.path)

    def prepare(self, p: QuboProblem) -> PreparedProblem:
        return self.inner.prepare(p)

    def run(self, prepared: PreparedProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
        samples = self.inner.run(prepared, reads, seed)
        record_samples(prepared.problem, samples, self.path, self.index)
        return samples


def make_sampler(handle: SamplerHandle, n_jobs: int = 1) -> Sampler:
    if handle.kind == 'simulated_anneal':
        return SimulatedAnnealingSampler(handle.anneal, n_jobs=n_jobs)
    if handle.kind == 'tabu':
        return TabuSampler(handle.tabu)
    if handle.kind == 'brute_force':
        return BruteForceSampler()
    return ReplaySampler(handle.replay_path)


def sample(handle: SamplerHandle, p: QuboProblem, reads: int, seed: Optional[int] = None) -> SampleSet:
    return make_sampler(handle).sample(p, reads, seed)


def verify_energies(p: QuboProblem, samples: SampleSet, tol: float = 1e-9) -> bool:
    return all(abs(energy(p, z) - e) < tol * max(1.0, abs(e)) for z, e in zip(samples.solutions, samples.energies))
