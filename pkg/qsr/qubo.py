"""
QUBO problems built from the binary sparse-coding objective.

A problem is  E(z) = z^T Q z + b^T z  over binary z, with a constant offset kept
alongside so energies can be compared with the loss they came from. This module
also holds the sample container every sampler returns, the clamping step that
folds frozen variables into a smaller problem, energy-impact variable
selection, and the block-diagonal batching of many small problems into one.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import dimod
import numpy as np

from .errors import QuboError

logger = logging.getLogger(__name__)


class QuboProblem:
    """Dense symmetric QUBO; only the upper triangle is stored"""

    def __init__(self, q: np.ndarray, b: np.ndarray, offset: float = 0.0):
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if q.shape != (b.size, b.size):
            raise QuboError(f"Q has shape {q.shape} but b has {b.size} entries")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(b)) and np.isfinite(offset)):
            raise QuboError("QUBO coefficients must be finite")
        if not np.allclose(q, q.T, rtol=1e-12, atol=1e-12):
            raise QuboError("Q must be symmetric")
        self.upper = np.triu(q)
        self.b = b
        self.offset = float(offset)
        self._q = self.upper + np.triu(self.upper, 1).T

    @property
    def q(self) -> np.ndarray:
        return self._q

    @property
    def n(self) -> int:
        return self.b.size

    def __repr__(self) -> str:
        return f"QuboProblem(n={self.n}, offset={self.offset:.6g})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuboProblem):
            return NotImplemented
        return (self.n == other.n and self.offset == other.offset
                and np.array_equal(self.upper, other.upper) and np.array_equal(self.b, other.b))


def _as_binary(z, n: int) -> np.ndarray:
    z = np.asarray(z).reshape(-1)
    if z.size != n:
        raise QuboError(f"Expected a vector of length {n}, got {z.size}")
    if not np.all((z == 0) | (z == 1)):
        raise QuboError("Solution vector must be binary")
    return z.astype(np.float64)


def energy(p: QuboProblem, z) -> float:
    """z^T Q z + b^T z, offset not included"""
    z = _as_binary(z, p.n)
    return float(z @ p.q @ z + p.b @ z)


def energies(p: QuboProblem, states: np.ndarray) -> np.ndarray:
    """Row-wise energies of a (k, n) binary matrix"""
    states = np.asarray(states, dtype=np.float64)
    return np.einsum('ij,jk,ik->i', states, p.q, states) + states @ p.b


def to_bqm(p: QuboProblem) -> dimod.BinaryQuadraticModel:
    """The same energy as a BINARY dimod model on variables 0..n-1"""
    rows, cols = np.nonzero(np.triu(p.upper, 1))
    qubo = {(i, i): float(p.upper[i, i] + p.b[i]) for i in range(p.n)}
    qubo.update(((int(i), int(j)), 2.0 * float(p.upper[i, j])) for i, j in zip(rows, cols))
    return dimod.BinaryQuadraticModel.from_qubo(qubo, offset=p.offset)


def dimod_reads(result: dimod.SampleSet, n: int) -> np.ndarray:
    """(reads, n) binary matrix of a dimod result, columns in variable order 0..n-1"""
    columns = [result.variables.index(v) for v in range(n)]
    samples = np.asarray(result.record.sample)[:, columns]
    return np.repeat(samples, result.record.num_occurrences, axis=0).astype(np.int8)


# ---------------------------------------------------------------------------
# Sparse coding
# ---------------------------------------------------------------------------

def build_sparse_coding_qubo(d_l: np.ndarray, y: np.ndarray, lam: float, mu: float) -> QuboProblem:
    """Q = mu D^T D,  b = -2 D^T y + lam 1,  offset = y^T y"""
    d_l = np.asarray(d_l, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if d_l.ndim != 2 or d_l.shape[0] != y.size:
        raise QuboError(f"Dictionary with shape {d_l.shape} does not match target of length {y.size}")
    gram = d_l.T @ d_l
    q = mu * 0.5 * (gram + gram.T)
    b = -2.0 * (d_l.T @ y) + lam
    return QuboProblem(q, b, float(y @ y))


def sparse_coding_loss(d_l: np.ndarray, y: np.ndarray, m: np.ndarray, lam: float, mu: float) -> float:
    """||mu D m - y||^2 + lam mu ||m||_1"""
    m = np.asarray(m, dtype=np.float64)
    r = mu * (d_l @ m) - y
    return float(r @ r + lam * mu * np.abs(m).sum())


def factored_loss(d_l: np.ndarray, y: np.ndarray, m: np.ndarray, lam: float, mu: float) -> float:
    """The loss with the common mu pulled out of the m-dependent part.

    energy + offset of the built QUBO equals this value; it equals the plain
    loss when mu == 1 and shares its argmin for every mu > 0.
    """
    yy = float(np.dot(y, y))
    return (sparse_coding_loss(d_l, y, m, lam, mu) - yy) / mu + yy


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Unique binary solutions with their energies and occurrence counts"""

    solutions: np.ndarray
    energies: np.ndarray
    occurrences: np.ndarray

    def __post_init__(self):
        self.solutions = np.asarray(self.solutions, dtype=np.int8).reshape(len(self.energies), -1)
        self.energies = np.asarray(self.energies, dtype=np.float64)
        self.occurrences = np.asarray(self.occurrences, dtype=np.int64)

    @property
    def total_reads(self) -> int:
        return int(self.occurrences.sum())

    def __len__(self) -> int:
        return len(self.energies)

    @classmethod
    def from_reads(cls, p: QuboProblem, reads: np.ndarray) -> "SampleSet":
        """Deduplicate raw reads; order is energy ascending, ties by bit pattern"""
        reads = np.asarray(reads, dtype=np.int8)
        if reads.ndim != 2 or reads.shape[1] != p.n:
            raise QuboError(f"Reads must have shape (k, {p.n}), got {reads.shape}")
        raw = dimod.SampleSet.from_samples((reads, list(range(p.n))), dimod.BINARY, energy=np.zeros(len(reads)))
        aggregated = raw.aggregate()
        unique = np.asarray(aggregated.record.sample, dtype=np.int8)
        counts = np.asarray(aggregated.record.num_occurrences)
        e = energies(p, unique)
        order = np.lexsort(tuple(unique.T[::-1]) + (e,))
        return cls(unique[order], e[order], counts[order])

    def lowest(self) -> np.ndarray:
        """Lowest-energy solution; ties go to the first listed"""
        return self.solutions[int(np.argmin(self.energies))].copy()

    def to_dict(self) -> Dict:
        return {
            'solutions': self.solutions.astype(int).tolist(),
            'energies': [float(e) for e in self.energies],
            'occurrences': [int(o) for o in self.occurrences],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SampleSet":
        return cls(np.array(data['solutions'], dtype=np.int8),
                   np.array(data['energies'], dtype=np.float64),
                   np.array(data['occurrences'], dtype=np.int64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleSet):
            return NotImplemented
        return (np.array_equal(self.solutions, other.solutions)
                and np.array_equal(self.energies, other.energies)
                and np.array_equal(self.occurrences, other.occurrences))


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------

def flip_deltas(p: QuboProblem, z) -> np.ndarray:
    """Energy change of flipping each variable of z on its own"""
    z = _as_binary(z, p.n)
    diag = np.diag(p.q)
    field = p.q @ z - diag * z
    return (1.0 - 2.0 * z) * (p.b + diag + 2.0 * field)


def energy_impact_select(p: QuboProblem, z_star, k: int) -> List[int]:
    """Indices of the k largest |single-flip energy change|, ascending"""
    if k > p.n or k < 0:
        raise QuboError(f"Cannot select {k} variables from a problem of size {p.n}")
    impact = np.abs(flip_deltas(p, z_star))
    # stable sort on -impact keeps the smaller index first among ties
    chosen = np.argsort(-impact, kind='stable')[:k]
    return sorted(int(i) for i in chosen)


def clamp_subproblem(p: QuboProblem, z_star, index: Sequence[int]) -> QuboProblem:
    """Freeze everything outside ``index`` at z_star and fold it into b and offset"""
    z = _as_binary(z_star, p.n)
    idx = np.asarray(index, dtype=int)
    if len(set(idx.tolist())) != idx.size:
        raise QuboError("Clamp index list contains duplicates")
    if idx.size and (idx.min() < 0 or idx.max() >= p.n):
        raise QuboError(f"Clamp index out of range for a problem of size {p.n}")

    frozen = np.setdiff1d(np.arange(p.n), idx)
    z_frozen = z[frozen]
    q_sub = p.q[np.ix_(idx, idx)]
    b_sub = p.b[idx] + 2.0 * p.q[np.ix_(idx, frozen)] @ z_frozen
    offset = float(z_frozen @ p.q[np.ix_(frozen, frozen)] @ z_frozen + p.b[frozen] @ z_frozen)
    return QuboProblem(q_sub, b_sub, offset)


def merge_clamped(z_star, index: Sequence[int], z_sub) -> np.ndarray:
    merged = np.array(z_star, dtype=np.int8).reshape(-1)
    merged[np.asarray(index, dtype=int)] = np.asarray(z_sub, dtype=np.int8)
    return merged


# ---------------------------------------------------------------------------
# Block-diagonal batching
# ---------------------------------------------------------------------------

@dataclass
class Placement:
    problem: int
    offset: int
    variables: List[int]


@dataclass
class SubproblemBatch:
    problems: List[QuboProblem]
    placements: List[Placement]
    subproblems: List[QuboProblem]
    sub_size: int
    batch_size: int

    @property
    def blocks_per_problem(self) -> int:
        return self.batch_size // self.sub_size


def assemble_batch(subs: Sequence[QuboProblem], batch_size: int = 512,
                   indices: Optional[Sequence[Sequence[int]]] = None) -> SubproblemBatch:
    """Pack equally sized subproblems along the diagonals of batch_size problems.

    Subproblems keep arrival order; the last problem is zero padded.
    """
    if not subs:
        return SubproblemBatch([], [], [], 0, batch_size)
    sub_size = subs[0].n
    if any(s.n != sub_size for s in subs):
        raise QuboError("All subproblems in a batch must have the same size")
    if sub_size > batch_size:
        raise QuboError(f"Subproblem size {sub_size} exceeds batch size {batch_size}")
    if indices is not None and len(indices) != len(subs):
        raise QuboError("One index list per subproblem is required")

    per_problem = batch_size // sub_size
    problems, placements = [], []
    for start in range(0, len(subs), per_problem):
        group = subs[start:start + per_problem]
        q = np.zeros((batch_size, batch_size))
        b = np.zeros(batch_size)
        offset = 0.0
        for slot, sub in enumerate(group):
            lo = slot * sub_size
            q[lo:lo + sub_size, lo:lo + sub_size] = sub.q
            b[lo:lo + sub_size] = sub.b
            offset += sub.offset
            variables = list(indices[start + slot]) if indices is not None else list(range(sub_size))
            placements.append(Placement(len(problems), lo, variables))
        problems.append(QuboProblem(q, b, offset))

    logger.debug(f"Packed {len(subs)} subproblems of size {sub_size} into {len(problems)} problems")
    return SubproblemBatch(problems, placements, list(subs), sub_size, batch_size)


def disassemble_batch(batch: SubproblemBatch, results: Sequence[SampleSet]) -> List[SampleSet]:
    """Project every batch read onto each block and re-aggregate per subproblem"""
    if len(results) != len(batch.problems):
        raise QuboError(f"Expected {len(batch.problems)} sample sets, got {len(results)}")

    per_patch = []
    for placement, sub in zip(batch.placements, batch.subproblems):
        samples = results[placement.problem]
        block = samples.solutions[:, placement.offset:placement.offset + batch.sub_size]
        seen: Dict[bytes, int] = {}
        rows, counts = [], []
        for row, count in zip(block, samples.occurrences):
            key = row.tobytes()
            if key in seen:
                counts[seen[key]] += int(count)
            else:
                seen[key] = len(rows)
                rows.append(row)
                counts.append(int(count))
        solutions = np.array(rows, dtype=np.int8).reshape(len(rows), batch.sub_size)
        per_patch.append(SampleSet(solutions, energies(sub, solutions), np.array(counts)))
    return per_patch


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def problem_to_dict(p: QuboProblem) -> Dict:
    rows, cols = np.nonzero(p.upper)
    return {
        'n': p.n,
        'q': [[int(i), int(j), float(p.upper[i, j])] for i, j in zip(rows, cols)],
        'b': [float(v) for v in p.b],
        'offset': p.offset,
    }


def problem_from_dict(data: Dict) -> QuboProblem:
    n = int(data['n'])
    upper = np.zeros((n, n))
    for i, j, v in data['q']:
        if j < i:
            i, j = j, i
        upper[i, j] = v
    return QuboProblem(upper + np.triu(upper, 1).T, np.array(data['b'], dtype=np.float64), float(data['offset']))


def canonical_json(p: QuboProblem) -> str:
    return json.dumps(problem_to_dict(p), sort_keys=True, separators=(',', ':'))


def problem_hash(p: QuboProblem) -> str:
    """SHA-256 (32 bytes, hex) over the canonical serialization"""
    return hashlib.sha256(canonical_json(p).encode('utf-8')).hexdigest()


def dump_problem(p: QuboProblem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(p), indent=1))
