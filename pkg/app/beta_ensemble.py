"""Gaussian beta-ensemble through its tridiagonal model, and the rescaled soft edge."""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import dblquad

from app.discrete_oracle import bisect_eigenvalues, sturm_counts
from app.errors import RangeError
from app.models import EnsembleSample, TridiagonalMatrix, Verdict

logger = logging.getLogger(__name__)

MOMENT_RTOL = 0.02
EIGENVALUE_TOL = 1e-10


def _off_diagonal(rng: np.random.Generator, N: int, beta: float, size: Tuple[int, ...] = ()) -> np.ndarray:
    # chi with beta (N - i) degrees of freedom, i = 1..N-1
    dof = beta * np.arange(N - 1, 0, -1, dtype=float)
    return np.sqrt(rng.gamma(dof / 2, 2.0, size=size + (N - 1,))) / math.sqrt(beta)


def gap_moment_quadrature(beta: float) -> float:
    """E[(mu_1 - mu_2)^2] under the N = 2 joint density, by 2-d quadrature."""
    edge = 12.0 * math.sqrt(2.0 / beta)

    def weight(y: float, x: float) -> float:
        return abs(x - y) ** beta * math.exp(-beta / 4 * (x * x + y * y))

    numerator, _ = dblquad(lambda y, x: (x - y) ** 2 * weight(y, x), -edge, edge, -edge, edge, epsabs=1e-12)
    denominator, _ = dblquad(weight, -edge, edge, -edge, edge, epsabs=1e-12)
    return numerator / denominator


class EnsembleService:
    """Service for sampling the tridiagonal beta-ensemble."""

    @staticmethod
    def sample_tridiagonal(N: int, beta: float, seed: int) -> TridiagonalMatrix:
        """Matrix whose eigenvalues have density prod |mu_i - mu_j|^beta exp(-beta/4 sum mu_i^2).

        Diagonal N(0, 2/beta); off-diagonal i is chi_{beta (N - i)} / sqrt(beta).
        """
        if N < 1 or beta <= 0:
            raise RangeError(f"need N >= 1 and beta > 0, got N={N}, beta={beta}")
        rng = np.random.default_rng(seed)
        diag = rng.normal(0.0, math.sqrt(2.0 / beta), N)
        return TridiagonalMatrix(diag=diag, offdiag=_off_diagonal(rng, N, beta))

    @staticmethod
    def sample_batch(N: int, beta: float, n_samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """(diag, offdiag) of n_samples independent matrices, shapes (n_samples, N) and (n_samples, N - 1)."""
        if N < 1 or beta <= 0 or n_samples < 1:
            raise RangeError(f"need N >= 1, beta > 0, n_samples >= 1, got {N}, {beta}, {n_samples}")
        rng = np.random.default_rng(seed)
        diag = rng.normal(0.0, math.sqrt(2.0 / beta), (n_samples, N))
        return diag, _off_diagonal(rng, N, beta, (n_samples,))

    @staticmethod
    def eigenvalues(matrix: TridiagonalMatrix, k_top: Optional[int] = None, tol: float = EIGENVALUE_TOL) -> np.ndarray:
        """The k_top largest eigenvalues (all by default), decreasing."""
        k_top = matrix.n if k_top is None else k_top
        if not 1 <= k_top <= matrix.n:
            raise RangeError(f"k_top must be in [1, {matrix.n}], got {k_top}")
        indices = np.arange(matrix.n, matrix.n - k_top, -1)
        return bisect_eigenvalues(matrix.diag, matrix.offdiag, indices, tol)

    @staticmethod
    def edge_rescale(mu: np.ndarray, N: int, k_max: int) -> np.ndarray:
        """N^{1/6} (2 sqrt(N) - mu_i) for the top k_max eigenvalues."""
        mu = np.asarray(mu, dtype=float)
        if not 1 <= k_max <= min(N, len(mu)):
            raise RangeError(f"k_max must be in [1, {min(N, len(mu))}], got {k_max}")
        return N ** (1.0 / 6.0) * (2.0 * math.sqrt(N) - mu[:k_max])

    @staticmethod
    def sample(N: int, beta: float, seed: int, k_max: int = 1) -> EnsembleSample:
        """One matrix draw with its full spectrum and rescaled top k_max."""
        mu = EnsembleService.eigenvalues(EnsembleService.sample_tridiagonal(N, beta, seed))
        return EnsembleSample(N=N, beta=beta, mu=mu, edge_rescaled=EnsembleService.edge_rescale(mu, N, k_max))

    @staticmethod
    def semicircle_fraction(matrix: TridiagonalMatrix) -> float:
        """Fraction of eigenvalues inside [-2 sqrt(N), 2 sqrt(N)]."""
        edge = 2.0 * math.sqrt(matrix.n)
        below, inside = sturm_counts(matrix.diag, matrix.offdiag, np.array([-edge, edge]))
        return float(inside - below) / matrix.n

    @staticmethod
    def moment_gate(beta: float, n_samples: int = 100_000, seed: int = 0, rtol: float = MOMENT_RTOL) -> Verdict:
        """N = 1 variance and N = 2 gap second moment against the exact density."""
        one, _ = EnsembleService.sample_batch(1, beta, n_samples, seed)
        variance = float(np.var(one[:, 0], ddof=1))
        diag, off = EnsembleService.sample_batch(2, beta, n_samples, seed + 1)
        gap2 = float(np.mean((diag[:, 0] - diag[:, 1]) ** 2 + 4.0 * off[:, 0] ** 2))
        expected_gap2 = gap_moment_quadrature(beta)
        variance_error = abs(variance / (2.0 / beta) - 1.0)
        gap_error = abs(gap2 / expected_gap2 - 1.0)
        passed = variance_error <= rtol and gap_error <= rtol
        logger.info(f"moment gate beta={beta}: variance error {variance_error:.4f}, gap error {gap_error:.4f}")
        return Verdict(
            name="ensemble-moments",
            passed=passed,
            statistic=max(variance_error, gap_error),
            threshold=rtol,
            details={
                "variance": variance,
                "variance_expected": 2.0 / beta,
                "gap2": gap2,
                "gap2_expected": expected_gap2,
            },
        )
