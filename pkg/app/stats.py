"""Goodness-of-fit machinery for the limit laws, and the OU exit-time transform."""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import pbdv

from app.errors import RangeError, SeriesTruncationError
from app.models import (
    Distribution,
    KSResult,
    OUExitEstimate,
    OUExitSpec,
    PointProcessSample,
    QuantileGrid,
    Verdict,
)

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.01
MIN_KS_SAMPLE = 8
MIN_POISSON_REPLICAS = 100
MIN_MCKEAN_SAMPLES = 300
MIN_EXPECTED_PER_BIN = 5.0
DEGENERATE_INTENSITY = 0.5
MIN_SERIES_TERMS = 10
MAX_SERIES_B = 10.0
SERIES_RTOL = 1e-10
OU_EXIT_HORIZON = 40.0


def _scipy_name(distribution: Distribution) -> str:
    match distribution:
        case Distribution.EXPONENTIAL:
            return "expon"
        case Distribution.GUMBEL:
            return "gumbel_r"
        case Distribution.UNIFORM:
            return "uniform"
        case Distribution.NORMAL:
            return "norm"
        case _:
            raise RangeError(f"unknown distribution {distribution!r}")


def _finite_or_none(values: np.ndarray) -> List[Optional[float]]:
    return [float(v) if math.isfinite(v) else None for v in values]


def _poisson_chi_square(values: np.ndarray, mu: float) -> Tuple[float, int]:
    """Chi-square of one cell's count histogram against Poisson(mu), bins merged to expected >= 5."""
    R = len(values)
    top = int(max(values.max(initial=0), stats.poisson.ppf(1 - 1e-9, mu)))
    observed = np.bincount(np.minimum(values.astype(int), top), minlength=top + 1)
    probabilities = stats.poisson.pmf(np.arange(top + 1), mu)
    probabilities[-1] = stats.poisson.sf(top - 1, mu)
    groups_observed: List[float] = []
    groups_expected: List[float] = []
    acc_observed = acc_expected = 0.0
    for o, e in zip(observed.tolist(), (R * probabilities).tolist()):
        acc_observed += o
        acc_expected += e
        if acc_expected >= MIN_EXPECTED_PER_BIN:
            groups_observed.append(acc_observed)
            groups_expected.append(acc_expected)
            acc_observed = acc_expected = 0.0
    if acc_expected > 0 or acc_observed > 0:
        if groups_expected:
            groups_observed[-1] += acc_observed
            groups_expected[-1] += acc_expected
        else:
            groups_observed.append(acc_observed)
            groups_expected.append(acc_expected)
    if len(groups_expected) < 2:
        return 0.0, 0
    o, e = np.array(groups_observed), np.array(groups_expected)
    return float(np.sum((o - e) ** 2 / e)), len(groups_expected) - 1


class StatsService:
    """Service for the statistical tests of the limit theorems."""

    @staticmethod
    def ks_statistic(sample: Sequence[float], distribution: Distribution) -> KSResult:
        """One-sample Kolmogorov-Smirnov D with its asymptotic p-value."""
        sample = np.asarray(sample, dtype=float)
        if len(sample) < MIN_KS_SAMPLE:
            logger.warning(f"KS on {len(sample)} points; the asymptotic p-value needs at least {MIN_KS_SAMPLE}")
        result = stats.kstest(sample, _scipy_name(distribution), method="asymp")
        return KSResult(statistic=float(result.statistic), p_value=float(np.clip(result.pvalue, 0.0, 1.0)))

    @staticmethod
    def two_sample_ks(x: Sequence[float], y: Sequence[float]) -> KSResult:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if min(len(x), len(y)) < MIN_KS_SAMPLE:
            logger.warning(f"two-sample KS on {len(x)} and {len(y)} points")
        result = stats.ks_2samp(x, y, method="asymp")
        return KSResult(statistic=float(result.statistic), p_value=float(np.clip(result.pvalue, 0.0, 1.0)))

    @staticmethod
    def quantile_grid(n: int) -> QuantileGrid:
        """Knots t_j = -ln(1 - j 2^-n), each cell carrying Exp(1) mass 2^-n; the last knot is +inf."""
        if n < 0:
            raise RangeError(f"grid depth must be >= 0, got {n}")
        j = np.arange(2**n, dtype=float)
        knots = np.append(-np.log1p(-j / 2**n), np.inf)
        return QuantileGrid(n=n, knots=knots)

    @staticmethod
    def interval_counts(pp: PointProcessSample, grid: QuantileGrid) -> np.ndarray:
        """Number of points in each cell [t_j, t_{j+1})."""
        cells = np.searchsorted(grid.knots, pp.points, side="right") - 1
        return np.bincount(cells, minlength=grid.cells)[: grid.cells]

    @staticmethod
    def interval_counts_2d(
        x_points: Sequence[float], t_points: Sequence[float], r_edges: Sequence[float], grid: QuantileGrid
    ) -> np.ndarray:
        """Counts of the points (x, t) in the cells (r_{i-1}, r_i] x [t_j, t_{j+1}).

        Points outside the r-range are dropped.
        """
        x, t = np.asarray(x_points, dtype=float), np.asarray(t_points, dtype=float)
        edges = np.asarray(r_edges, dtype=float)
        rows = np.searchsorted(edges, x, side="left") - 1
        columns = np.searchsorted(grid.knots, t, side="right") - 1
        inside = (rows >= 0) & (rows < len(edges) - 1) & (columns >= 0) & (columns < grid.cells)
        counts = np.zeros((len(edges) - 1, grid.cells), dtype=int)
        np.add.at(counts, (rows[inside], columns[inside]), 1)
        return counts

    @staticmethod
    def poisson_intensities(r_edges: Sequence[float], grid: QuantileGrid) -> np.ndarray:
        """(e^{r_i} - e^{r_{i-1}}) 2^-n for every (r-interval, grid cell)."""
        mass = np.diff(np.exp(np.asarray(r_edges, dtype=float)))
        return np.outer(mass, np.full(grid.cells, 2.0**-grid.n))

    @staticmethod
    def poisson_test(counts: np.ndarray, intensities: np.ndarray, alpha: float = DEFAULT_ALPHA) -> Verdict:
        """Test that the cells are independent Poisson variables with the given means.

        Three families at level alpha/3 each: dispersion index per cell
        (Bonferroni over cells), chi-square of the pooled per-cell count
        histograms, and the largest cross-cell correlation.
        """
        counts = np.asarray(counts, dtype=float)
        R = counts.shape[0]
        counts = counts.reshape(R, -1)
        mu = np.ravel(np.asarray(intensities, dtype=float))
        if R < MIN_POISSON_REPLICAS:
            raise RangeError(f"Poisson test needs at least {MIN_POISSON_REPLICAS} replicas, got {R}")
        if counts.shape[1] != len(mu):
            raise RangeError(f"{counts.shape[1]} cells but {len(mu)} intensities")
        level = alpha / 3

        degenerate = (counts.sum(axis=0) == 0) & (mu > DEGENERATE_INTENSITY)
        if degenerate.any():
            cells = np.flatnonzero(degenerate).tolist()
            logger.warning(f"degenerate Poisson cells (all zero, intensity > {DEGENERATE_INTENSITY}): {cells}")

        means = counts.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dispersion = counts.var(axis=0, ddof=1) / means
        tested = (mu > 0) & (means > 0)
        spread = np.sqrt(2.0 / (R - 1) + 1.0 / (R * np.where(mu > 0, mu, 1.0)))
        z = (dispersion - 1.0) / spread
        dispersion_p = np.where(tested, 2.0 * stats.norm.sf(np.abs(np.nan_to_num(z))), 1.0)
        n_tested = max(int(tested.sum()), 1)
        dispersion_passed = bool(np.all(dispersion_p > level / n_tested))

        chi_total, dof_total = 0.0, 0
        for j in np.flatnonzero(mu > 0):
            statistic, dof = _poisson_chi_square(counts[:, j], mu[j])
            chi_total += statistic
            dof_total += dof
        chi_p = float(stats.chi2.sf(chi_total, dof_total)) if dof_total > 0 else 1.0
        chi_passed = chi_p > level

        m = counts.shape[1]
        max_correlation, correlation_bound = 0.0, math.inf
        if m > 1:
            with np.errstate(divide="ignore", invalid="ignore"):
                correlation = np.corrcoef(counts, rowvar=False)
            pairs = correlation[np.triu_indices(m, k=1)]
            pairs = pairs[np.isfinite(pairs)]
            max_correlation = float(np.max(np.abs(pairs), initial=0.0))
            n_pairs = m * (m - 1) // 2
            correlation_bound = max(3.0, float(stats.norm.isf(level / (2 * n_pairs)))) / math.sqrt(R)
        correlation_passed = max_correlation <= correlation_bound

        passed = dispersion_passed and chi_passed and correlation_passed and not degenerate.any()
        return Verdict(
            name="poisson",
            passed=passed,
            statistic=chi_total,
            p_value=chi_p,
            threshold=alpha,
            details={
                "replicas": R,
                "dispersion_indices": _finite_or_none(dispersion),
                "dispersion_p_values": _finite_or_none(dispersion_p),
                "dispersion_passed": dispersion_passed,
                "chi2_dof": dof_total,
                "chi2_passed": chi_passed,
                "max_correlation": max_correlation,
                "correlation_bound": correlation_bound if math.isfinite(correlation_bound) else None,
                "correlation_passed": correlation_passed,
                "degenerate_cells": np.flatnonzero(degenerate).tolist(),
            },
        )

    @staticmethod
    def mckean_exponential_test(gamma_samples: Sequence[float], m_a: float, alpha: float = DEFAULT_ALPHA) -> Verdict:
        """KS of gamma_a / m(a) against Exp(1)."""
        gamma = np.asarray(gamma_samples, dtype=float)
        if len(gamma) < MIN_MCKEAN_SAMPLES:
            raise RangeError(f"McKean test needs at least {MIN_MCKEAN_SAMPLES} samples, got {len(gamma)}")
        ks = StatsService.ks_statistic(gamma / m_a, Distribution.EXPONENTIAL)
        return Verdict(
            name="mckean-exponential",
            passed=ks.p_value > alpha,
            statistic=ks.statistic,
            p_value=ks.p_value,
            threshold=alpha,
            details={"n": len(gamma), "D": ks.statistic, "p": ks.p_value, "m(a)": m_a},
        )

    @staticmethod
    def gumbel_fit_test(sample: Sequence[float], alpha: float = DEFAULT_ALPHA) -> Verdict:
        """Location/scale MLE of a Gumbel law, then KS of the standardized sample."""
        sample = np.asarray(sample, dtype=float)
        loc, scale = stats.gumbel_r.fit(sample)
        ks = StatsService.ks_statistic((sample - loc) / scale, Distribution.GUMBEL)
        return Verdict(
            name="gumbel-fit",
            passed=ks.p_value > alpha,
            statistic=ks.statistic,
            p_value=ks.p_value,
            threshold=alpha,
            details={"n": len(sample), "loc": float(loc), "scale": float(scale)},
        )

    @staticmethod
    def multiple_hit_probability(p: float) -> float:
        """P(N >= 2) for N ~ Poisson(p)."""
        return -math.expm1(-p) - p * math.exp(-p)

    @staticmethod
    def ecdf_overlay(sample: Sequence[float], distribution: Distribution) -> Dict[str, List[float]]:
        """Columns x, ecdf, reference for plotting the sample ECDF against the reference CDF."""
        x = np.sort(np.asarray(sample, dtype=float))
        ecdf = np.arange(1, len(x) + 1) / len(x)
        reference = getattr(stats, _scipy_name(distribution)).cdf(x)
        return {"x": x.tolist(), "ecdf": ecdf.tolist(), "reference": reference.tolist()}


class OUExitService:
    """Service for the Laplace transform of the OU exit time H."""

    @staticmethod
    def ou_exit_laplace(spec: OUExitSpec, terms: int = 200) -> float:
        """E[exp(-theta nu H)] = 1 / (1 + sum_k nu (nu + 2) ... (nu + 2k - 2) b^{2k} / (2k)!)."""
        if terms < MIN_SERIES_TERMS:
            raise RangeError(f"need at least {MIN_SERIES_TERMS} series terms, got {terms}")
        if spec.b > MAX_SERIES_B:
            raise RangeError(f"series used only for b <= {MAX_SERIES_B}, got {spec.b}")
        b2, nu = spec.b**2, spec.nu
        term = nu * b2 / 2
        total = term
        for k in range(2, terms + 1):
            term *= (nu + 2 * k - 2) * b2 / ((2 * k - 1) * (2 * k))
            total += term
        k = terms + 1
        ratio = (nu + 2 * k - 2) * b2 / ((2 * k - 1) * (2 * k))
        tail = term * ratio / (1 - ratio) if ratio < 1 else math.inf
        if tail > SERIES_RTOL * (1 + total):
            raise SeriesTruncationError(f"{terms} terms leave a tail of {tail:.3g} at b={spec.b}, nu={nu}")
        return 1.0 / (1.0 + total)

    @staticmethod
    def ou_exit_closed_form(spec: OUExitSpec) -> float:
        """2 D_{-nu}(0) / (e^{b^2/4} (D_{-nu}(-b) + D_{-nu}(b))) with parabolic cylinder functions."""
        nu, b = spec.nu, spec.b
        at_zero = pbdv(-nu, 0.0)[0]
        return 2.0 * at_zero / (math.exp(b * b / 4) * (pbdv(-nu, -b)[0] + pbdv(-nu, b)[0]))

    @staticmethod
    def ou_exit_bound(spec: OUExitSpec, C: float = 3.0) -> float:
        """C / (1 + (nu/b^2) e^{b^2/2})."""
        return C / (1.0 + spec.nu / spec.b**2 * math.exp(spec.b**2 / 2))

    @staticmethod
    def ou_exit_mc(
        spec: OUExitSpec, n_paths: int, dt: float, seed: int, t_max: Optional[float] = None
    ) -> OUExitEstimate:
        """Monte Carlo of E[exp(-theta nu H)] for dU = -theta U dt + dW from 0.

        Euler-Maruyama with a Brownian-bridge check for crossings inside a step.
        Paths still inside at t_max are stopped there and reported; by default
        t_max makes their contribution smaller than exp(-40).
        """
        if n_paths < 1 or dt <= 0:
            raise RangeError(f"need n_paths >= 1 and dt > 0, got {n_paths}, {dt}")
        rate = spec.theta * spec.nu
        t_max = OU_EXIT_HORIZON / rate if t_max is None else t_max
        barrier = spec.barrier
        rng = np.random.default_rng(seed)
        exit_times = np.full(n_paths, t_max)
        alive = np.arange(n_paths)
        position = np.zeros(n_paths)
        sqrt_dt = math.sqrt(dt)
        t = 0.0
        while len(alive) and t < t_max:
            u = position[alive]
            step = u - spec.theta * u * dt + sqrt_dt * rng.standard_normal(len(alive))
            with np.errstate(over="ignore"):
                crossing = np.exp(-2.0 * (barrier - u) * (barrier - step) / dt) + np.exp(
                    -2.0 * (barrier + u) * (barrier + step) / dt
                )
            outside = np.abs(step) >= barrier
            exited = outside | (rng.random(len(alive)) < crossing)
            t += dt
            exit_times[alive[exited]] = t
            position[alive] = step
            alive = alive[~exited]
        unfinished = len(alive)
        if unfinished:
            logger.info(f"{unfinished} of {n_paths} OU paths still inside at t_max={t_max}")
        weights = np.exp(-rate * exit_times)
        return OUExitEstimate(
            mean=float(weights.mean()),
            stderr=float(weights.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else math.nan,
            n_paths=n_paths,
            n_unfinished=unfinished,
        )
