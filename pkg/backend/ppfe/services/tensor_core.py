"""
Dense linear algebra, seeded randomness and the Jacobi SVD.

Matrices are plain float64 numpy arrays; every public operation returns a
fresh array and checks that the result is finite.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from ..utils.config import get_settings
from ..utils.errors import ConvergenceError, DimensionMismatchError, NonFiniteError, RankError
from ..utils.helpers import stable_label

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

_SEED_MASK = (1 << 64) - 1


def as_matrix(x: npt.ArrayLike) -> Matrix:
    """Coerce to a 2-D float64 array (vectors become a single column)"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionMismatchError("as_matrix", arr.shape)
    return arr


def ensure_finite(x: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf entries")
    return x


class Rng:
    """
    Seeded, splittable random stream.

    Backed by numpy's PCG64 bit generator seeded through a SeedSequence whose
    spawn key is the label path, so ``Rng(s).child("round", 3, 7)`` is the same
    stream in every process and independent of sibling streams.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.path: Tuple[int, ...] = tuple(int(p) for p in path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *labels: Union[int, str]) -> "Rng":
        """Derive an independent stream from (seed, path, labels)"""
        return Rng(self.seed, self.path + tuple(stable_label(label) for label in labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def standard_normal(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self._generator.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._generator.uniform(low, high, size)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> npt.NDArray[np.int64]:
        return self._generator.choice(n, size=size, replace=replace)

    def gamma(self, shape: float, size) -> np.ndarray:
        return self._generator.gamma(shape, 1.0, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


@dataclass(frozen=True)
class SvdResult:
    """a = u @ diag(s) @ vt with s non-increasing"""

    u: Matrix
    s: Vector
    vt: Matrix

    @property
    def rank_capacity(self) -> int:
        return int(self.s.shape[0])


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError("matmul", a.shape, b.shape)
    return ensure_finite(a @ b, "matmul result")


def frobenius(a: Matrix) -> float:
    return float(np.linalg.norm(a, "fro"))


def gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    """I.i.d. normal matrix; std=0 yields a constant matrix"""
    if std < 0:
        raise ValueError(f"Standard deviation must be non-negative, got {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return mean + std * rng.standard_normal((rows, cols))


def _complete_orthonormal(u: Matrix, valid: np.ndarray) -> Matrix:
    """Replace columns of u flagged invalid with an orthonormal completion"""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if valid[j]]
    candidates = iter(np.eye(m))
    out = u.copy()
    for j in range(k):
        if valid[j]:
            continue
        for e in candidates:
            w = e.copy()
            # two Gram-Schmidt passes
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-6:
                w /= norm
                basis.append(w)
                out[:, j] = w
                break
    return out


def svd(a: Matrix, max_sweeps: Optional[int] = None, tolerance: Optional[float] = None) -> SvdResult:
    """
    Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Column pairs of the working matrix are rotated until every pair is
    orthogonal to within ``tolerance`` relative to the column norms. Wide
    inputs are handled through the transpose.
    """
    settings = get_settings()
    max_sweeps = settings.svd_max_sweeps if max_sweeps is None else max_sweeps
    tolerance = settings.svd_tolerance if tolerance is None else tolerance

    a = ensure_finite(as_matrix(a), "svd input")
    m, n = a.shape
    if m < n:
        r = svd(a.T, max_sweeps, tolerance)
        return SvdResult(u=r.vt.T.copy(), s=r.s, vt=r.u.T.copy())

    work = a.copy()
    v = np.eye(n)
    worst = 0.0
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(work[:, p] @ work[:, p])
                beta = float(work[:, q] @ work[:, q])
                gamma = float(work[:, p] @ work[:, q])
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = abs(gamma) / math.sqrt(alpha * beta)
                worst = max(worst, off)
                if off <= tolerance:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp = work[:, p].copy()
                work[:, p] = c * wp - s * work[:, q]
                work[:, q] = s * wp + c * work[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            logger.debug(f"Jacobi SVD of {m}x{n} converged in {sweep} sweeps")
            break
    else:
        raise ConvergenceError(max_sweeps, worst)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    vt = v[:, order].T.copy()

    cutoff = sigma[0] * 1e-14 if sigma.size and sigma[0] > 0 else 0.0
    valid = sigma > cutoff
    u = np.zeros((m, n))
    u[:, valid] = work[:, valid] / sigma[valid]
    if not np.all(valid):
        u = _complete_orthonormal(u, valid)
    return SvdResult(u=u, s=sigma, vt=vt)


def reconstruct(r: SvdResult) -> Matrix:
    return (r.u * r.s) @ r.vt


def truncate_svd(r: SvdResult, rank: int) -> Tuple[Matrix, Matrix]:
    """
    Best rank-r factors (A, B) with A = U_r diag(s_r) and B = V_r^T.

    The squared Frobenius error of A @ B equals the tail energy sum(s[rank:]**2).
    """
    if not 1 <= rank <= r.rank_capacity:
        raise RankError(f"rank {rank} outside [1, {r.rank_capacity}]")
    left = r.u[:, :rank] * r.s[:rank]
    right = r.vt[:rank, :].copy()
    return left, right


def tail_energy(r: SvdResult, rank: int) -> float:
    return float(np.sum(r.s[rank:] ** 2))


def reduction_factor(rows: int, cols: int, rank: int) -> float:
    """Parameter reduction of a rank-r factorization: rows*cols / (r*(rows+cols))"""
    if rank <= 0:
        raise RankError(f"rank must be positive, got {rank}")
    return (rows * cols) / (rank * (rows + cols))
