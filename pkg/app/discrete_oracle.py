"""Finite-difference oracle: the tridiagonal discretization of the operator on the same noise."""

import logging

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import solve_banded

from app.errors import ConvergenceError, PathCoverageError, RangeError
from app.models import BrownianPath, TridiagonalMatrix, TridiagonalOperator
from app.paths import PathService
from app.scaling import MAX_BISECTION_ITERATIONS

logger = logging.getLogger(__name__)

MIN_INTERIOR_NODES = 8
MAX_ORACLE_EIGENVALUES = 32
MAX_INVERSE_ITERATIONS = 100
RESIDUAL_RTOL = 1e-8


def _gershgorin(diag: np.ndarray, offdiag: np.ndarray) -> tuple[float, float]:
    radius = np.zeros(len(diag))
    radius[:-1] += np.abs(offdiag)
    radius[1:] += np.abs(offdiag)
    return float(np.min(diag - radius)), float(np.max(diag + radius))


def sturm_counts(diag: np.ndarray, offdiag: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Number of eigenvalues <= x for every shift in x, from the LDL^T pivots of A - x I."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    scale = max(float(np.max(np.abs(diag))), float(np.max(np.abs(offdiag), initial=0.0)), 1.0)
    tiny = np.finfo(float).eps * scale
    squares = (offdiag * offdiag).tolist()
    rows = diag.tolist()
    pivot = rows[0] - x
    pivot[pivot == 0] = -tiny
    count = (pivot < 0).astype(int)
    for i in range(1, len(rows)):
        pivot = rows[i] - x - squares[i - 1] / pivot
        pivot[pivot == 0] = -tiny
        count += pivot < 0
    return count


def bisect_eigenvalues(diag: np.ndarray, offdiag: np.ndarray, indices: np.ndarray, tol: float) -> np.ndarray:
    """Eigenvalues number ``indices`` (1 = smallest) by simultaneous Sturm bisection."""
    lower, upper = _gershgorin(diag, offdiag)
    indices = np.asarray(indices)
    lo = np.full(len(indices), lower)
    hi = np.full(len(indices), upper)
    for _ in range(MAX_BISECTION_ITERATIONS):
        if len(indices) == 0 or np.max(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        enough = sturm_counts(diag, offdiag, mid) >= indices
        hi = np.where(enough, mid, hi)
        lo = np.where(enough, lo, mid)
    else:
        raise ConvergenceError(f"Sturm bisection did not reach tol={tol}")
    return 0.5 * (lo + hi)


def _matvec(matrix: TridiagonalMatrix, v: np.ndarray) -> np.ndarray:
    out = matrix.diag * v
    out[:-1] += matrix.offdiag * v[1:]
    out[1:] += matrix.offdiag * v[:-1]
    return out


class OracleService:
    """Service for the finite-difference discretization and its Sturm-sequence spectrum."""

    @staticmethod
    def build(path: BrownianPath, beta: float, T: float, n: int, t0: float = 0.0) -> TridiagonalOperator:
        """Dirichlet discretization on t_i = t0 + i dx, dx = (T - t0)/(n + 1).

        The noise entry of node i is the cell average (B(t_i + dx/2) - B(t_i - dx/2))/dx.
        """
        if n < MIN_INTERIOR_NODES:
            raise RangeError(f"need at least {MIN_INTERIOR_NODES} interior nodes, got {n}")
        if not path.covers(t0, T):
            raise PathCoverageError(f"path [{path.t0}, {path.t1}] does not cover [{t0}, {T}]")
        dx = (T - t0) / (n + 1)
        times = t0 + dx * np.arange(1, n + 1, dtype=float)
        noise = (PathService.values_at(path, times + dx / 2) - PathService.values_at(path, times - dx / 2)) / dx
        diag = 2.0 / dx**2 + beta * times / 4 + noise
        offdiag = np.full(n - 1, -1.0 / dx**2)
        return TridiagonalOperator(diag=diag, offdiag=offdiag, dx=dx, T=T, beta=beta, times=times)

    @staticmethod
    def sturm_count(op: TridiagonalMatrix, a: float) -> int:
        """Number of eigenvalues <= -a."""
        return int(sturm_counts(op.diag, op.offdiag, np.array([-a]))[0])

    @staticmethod
    def eigenvalues(op: TridiagonalMatrix, k_max: int, tol: float = 1e-8) -> np.ndarray:
        """The k_max smallest eigenvalues, increasing, each within tol."""
        if not 1 <= k_max <= min(op.n, MAX_ORACLE_EIGENVALUES):
            raise RangeError(f"k_max must be in [1, {min(op.n, MAX_ORACLE_EIGENVALUES)}], got {k_max}")
        return bisect_eigenvalues(op.diag, op.offdiag, np.arange(1, k_max + 1), tol)

    @staticmethod
    def eigenvector(op: TridiagonalMatrix, lam: float, tol: float = RESIDUAL_RTOL) -> np.ndarray:
        """Unit eigenvector for the eigenvalue near lam by shifted inverse iteration.

        Converged when the residual against the Rayleigh quotient is below
        tol max(1, ||A||_inf); the first nonzero component is made positive.
        """
        n = op.n
        norm_inf = float(np.max(np.abs(op.diag))) + 2.0 * float(np.max(np.abs(op.offdiag), initial=0.0))
        banded = np.zeros((3, n))
        banded[0, 1:] = op.offdiag
        banded[2, :-1] = op.offdiag
        shift = lam
        v = np.random.default_rng(0).standard_normal(n)
        v /= np.linalg.norm(v)
        for iteration in range(1, MAX_INVERSE_ITERATIONS + 1):
            banded[1] = op.diag - shift
            try:
                w = solve_banded((1, 1), banded, v)
            except LinAlgError:
                shift += 8 * np.finfo(float).eps * max(1.0, norm_inf) * iteration
                logger.debug(f"singular shift at lambda={lam}; moved to {shift!r}")
                continue
            v = w / np.linalg.norm(w)
            Av = _matvec(op, v)
            residual = float(np.linalg.norm(Av - float(v @ Av) * v))
            if iteration >= 2 and residual <= tol * max(1.0, norm_inf):
                break
        else:
            raise ConvergenceError(
                f"inverse iteration at lambda={lam} did not converge in {MAX_INVERSE_ITERATIONS} steps"
            )
        leading = np.flatnonzero(np.abs(v) > np.finfo(float).eps * np.max(np.abs(v)))
        if len(leading) and v[leading[0]] < 0:
            v = -v
        return v
