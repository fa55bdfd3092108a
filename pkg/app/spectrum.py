"""Eigenvalues, eigenfunctions and microscopic shapes from Riccati explosion counts."""

import logging
import math
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from app.errors import BracketError, ConvergenceError, NoCrossingError, RangeError, StitchMismatchError
from app.models import (
    BrownianPath,
    CrossingEvent,
    CrossingResult,
    DriftSpec,
    Eigenfunction,
    ExcursionSummary,
    MeasureHistogram,
    RiccatiTrajectory,
    ScalingParams,
    ShapeProfile,
    SpectralResult,
)
from app.paths import PathService
from app.riccati import RiccatiService
from app.scaling import MAX_BISECTION_ITERATIONS

logger = logging.getLogger(__name__)

DEFAULT_X_MAX = 6.0
DEFAULT_SHAPE_POINTS = 241
BRACKET_LIMIT = 1e8
STITCH_FACTOR = 10.0
MAX_HORIZON_DOUBLINGS = 8


def _interpolate_level(t: np.ndarray, z: np.ndarray, i: int, level: float) -> float:
    """Time where the segment (t[i], z[i]) -> (t[i+1], z[i+1]) meets level."""
    if not math.isfinite(z[i]):
        return float(t[i])
    if not math.isfinite(z[i + 1]) or z[i] == z[i + 1]:
        return float(t[i + 1])
    return float(t[i] + (t[i + 1] - t[i]) * (z[i] - level) / (z[i] - z[i + 1]))


def _nearest_index(times: np.ndarray, t: float) -> int:
    right = min(int(np.searchsorted(times, t)), len(times) - 1)
    if right > 0 and t - times[right - 1] < times[right] - t:
        return right - 1
    return right


def _descents(traj: RiccatiTrajectory, a_L: float) -> Iterator[CrossingResult]:
    """Successive descents of Z from +sqrt(a_L) to -sqrt(a_L)."""
    after: Optional[float] = None
    while True:
        try:
            crossing = SpectrumService.extract_crossing(traj, a_L, after)
        except NoCrossingError as e:
            logger.debug(f"excursions end: {e}")
            return
        yield crossing
        after = crossing.event.theta


class SpectrumService:
    """Service for the spectrum of the stochastic Airy operator on [t0, T]."""

    @staticmethod
    def eigenvalue_count(path: BrownianPath, beta: float, T: float, a: float, t0: float = 0.0) -> int:
        """Number of Dirichlet eigenvalues <= -a on [t0, T].

        Counts explosions of Z_a from +inf on (t0, T]; an explosion exactly at T
        counts.
        """
        traj = RiccatiService.integrate_forward(
            path, DriftSpec(a, beta), t0, math.inf, T, stride=0, locate=False
        )
        return len(traj.explosions)

    @staticmethod
    def eigenvalue_bisect(
        path: BrownianPath, beta: float, T: float, k: int, tol: float = 1e-6, t0: float = 0.0
    ) -> float:
        """lambda_k by bisection on the transition of the count from k - 1 to k."""
        if k < 1:
            raise RangeError(f"k must be >= 1, got {k}")
        if tol <= 0:
            raise RangeError(f"tol must be positive, got {tol}")

        def count(lam: float) -> int:
            return SpectrumService.eigenvalue_count(path, beta, T, -lam, t0)

        lo, hi, width = -1.0, 1.0, 2.0
        count_lo, count_hi = count(lo), count(hi)
        while count_lo >= k:
            hi, count_hi = lo, count_lo
            lo -= width
            width *= 2
            if abs(lo) > BRACKET_LIMIT:
                raise BracketError(f"no lower bracket for lambda_{k} above {-BRACKET_LIMIT}")
            count_lo = count(lo)
        while count_hi < k:
            lo, count_lo = hi, count_hi
            hi += width
            width *= 2
            if hi > BRACKET_LIMIT:
                raise BracketError(f"no upper bracket for lambda_{k} below {BRACKET_LIMIT}")
            count_hi = count(hi)

        for _ in range(MAX_BISECTION_ITERATIONS):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            n = count(mid)
            if n >= k:
                hi, count_hi = mid, n
            else:
                lo, count_lo = mid, n
        else:
            raise ConvergenceError(f"lambda_{k} bisection did not reach tol={tol}")
        if count_hi - count_lo >= 2:
            logger.warning(
                f"count jumps from {count_lo} to {count_hi} within tol={tol} near lambda_{k}={0.5 * (lo + hi):.8g}"
            )
        return 0.5 * (lo + hi)

    @staticmethod
    def localization_center(times: np.ndarray, values: np.ndarray) -> float:
        """First point where |phi| reaches its maximum."""
        return float(times[int(np.argmax(np.abs(values)))])

    @staticmethod
    def reconstruct_eigenfunction(
        path: BrownianPath,
        beta: float,
        T: float,
        lam: float,
        tol: float = 1e-6,
        t0: float = 0.0,
        a_L: Optional[float] = None,
    ) -> Eigenfunction:
        """L2-normalized phi_k from the forward and backward diffusions at a = -lambda_k.

        The forward reconstruction is used up to the stitch point, the backward
        one after it. Given a_L, the stitch point is the zero upsilon of the
        descent of Z through [-sqrt(a_L), sqrt(a_L)] where the two amplitudes
        are largest; otherwise, or when Z never descends, it is the grid point
        maximizing the product of the two amplitudes.
        """
        drift = DriftSpec(-lam, beta)
        forward = RiccatiService.integrate_forward(path, drift, t0, math.inf, T, tol, stride=1)
        backward = RiccatiService.integrate_backward(path, drift, T, -math.inf, t0, tol, stride=1)
        times = forward.times
        if len(times) != len(backward.times):
            raise StitchMismatchError("forward and backward samples are not on the same grid")

        amplitude = forward.log_abs + backward.log_abs
        s = int(np.argmax(amplitude))
        stitch = float(times[s])
        if a_L is not None:
            upsilons = [crossing.event.upsilon for crossing in _descents(forward, a_L)]
            if upsilons:
                nearest = [_nearest_index(times, u) for u in upsilons]
                best = int(np.argmax(amplitude[nearest]))
                s, stitch = nearest[best], upsilons[best]
            else:
                logger.debug(f"no descent through +-sqrt(a_L) at lambda={lam:.6g}; stitching at the amplitude peak")

        z_forward, z_backward = forward.values[s], backward.values[s]
        if abs(z_forward - z_backward) > STITCH_FACTOR * tol * max(1.0, abs(z_forward)):
            raise StitchMismatchError(
                f"log-slopes disagree at t={times[s]:.6g}: Z={z_forward:.10g}, Z-hat={z_backward:.10g}"
            )

        flip = forward.signs[s] * backward.signs[s]
        phi = np.empty(len(times))
        phi[: s + 1] = forward.signs[: s + 1] * np.exp(forward.log_abs[: s + 1] - forward.log_abs[s])
        phi[s + 1 :] = flip * backward.signs[s + 1 :] * np.exp(backward.log_abs[s + 1 :] - backward.log_abs[s])
        phi /= math.sqrt(trapezoid(phi * phi, times))
        nonzero = np.flatnonzero(phi)
        if len(nonzero) and phi[nonzero[0]] < 0:
            phi = -phi

        zeros = np.concatenate(
            [forward.explosions[forward.explosions < stitch], backward.explosions[backward.explosions > stitch]]
        )
        return Eigenfunction(
            times=times,
            values=phi,
            center=SpectrumService.localization_center(times, phi),
            stitch_time=stitch,
            zeros=zeros,
            forward=forward,
            backward=backward,
        )

    @staticmethod
    def measure_histogram(times: np.ndarray, phi: np.ndarray, L: float, bins: int = 50) -> MeasureHistogram:
        """m_k(dx) = L phi_k(xL)^2 dx as a normalized histogram in x = t/L."""
        edges = np.linspace(times[0] / L, times[-1] / L, bins + 1)
        mass = cumulative_trapezoid(phi * phi, times, initial=0.0)
        per_bin = np.diff(np.interp(edges * L, times, mass))
        density = per_bin / (per_bin.sum() * np.diff(edges))
        return MeasureHistogram(edges=edges, density=density)

    @staticmethod
    def shape_profiles(
        phi: Eigenfunction,
        path: BrownianPath,
        U: float,
        a_L: float,
        x_max: float = DEFAULT_X_MAX,
        n_points: int = DEFAULT_SHAPE_POINTS,
    ) -> ShapeProfile:
        """h(x) = sqrt2/a_L^{1/4} phi(U + x/sqrt a_L) and b(x) = (B(U + x/sqrt a_L) - B(U))/sqrt a_L.

        Distances are sup-norms to 1/cosh and -2 tanh on [-x_max, x_max]. phi
        is oriented so that h(0) > 0.
        """
        root = math.sqrt(a_L)
        x = np.linspace(-x_max, x_max, n_points)
        t = U + x / root
        if t[0] < phi.times[0] or t[-1] > phi.times[-1]:
            raise RangeError(
                f"U +- x_max/sqrt(a_L) = [{t[0]:.6g}, {t[-1]:.6g}] leaves [{phi.times[0]}, {phi.times[-1]}]"
            )
        values = np.interp(t, phi.times, phi.values)
        orientation = np.sign(np.interp(U, phi.times, phi.values)) or 1.0
        h = orientation * math.sqrt(2.0) / a_L**0.25 * values
        b = (PathService.values_at(path, t) - PathService.values_at(path, [U])[0]) / root
        return ShapeProfile(
            x=x,
            h=h,
            b=b,
            h_distance=float(np.max(np.abs(h - 1.0 / np.cosh(x)))),
            b_distance=float(np.max(np.abs(b + 2.0 * np.tanh(x)))),
        )

    @staticmethod
    def extract_crossing(traj: RiccatiTrajectory, a_L: float, after: Optional[float] = None) -> CrossingResult:
        """First descent of Z from +sqrt(a_L) to -sqrt(a_L) after time ``after``.

        Returns the crossing times together with the sup-distance of Z on
        [iota, theta] to the tanh profile centered at upsilon.
        """
        root = math.sqrt(a_L)
        t, z = traj.times, traj.values
        start = 0 if after is None else int(np.searchsorted(t, after, side="right"))
        downs = np.flatnonzero((z[start:-1] > -root) & (z[start + 1 :] <= -root)) + start
        for j in downs.tolist():
            above = np.flatnonzero(z[start : j + 1] >= root)
            if len(above) == 0:
                continue
            i = int(above[-1]) + start
            theta = _interpolate_level(t, z, j, -root)
            iota = _interpolate_level(t, z, i, root)
            sign_change = np.flatnonzero((z[i:j + 1] > 0) & (z[i + 1 : j + 2] <= 0))
            m = int(sign_change[-1]) + i
            upsilon = _interpolate_level(t, z, m, 0.0)
            later = traj.explosions[traj.explosions > theta]
            zeta = float(later[0]) if len(later) else None

            window = (t >= iota) & (t <= theta)
            profile = -root * np.tanh(root * (t[window] - upsilon))
            ends = np.array([iota, theta])
            end_values = np.array([root, -root])
            distance = max(
                float(np.max(np.abs(z[window] - profile), initial=0.0)),
                float(np.max(np.abs(end_values + root * np.tanh(root * (ends - upsilon))))),
            )
            return CrossingResult(CrossingEvent(upsilon=upsilon, theta=theta, iota=iota, zeta=zeta), distance)
        raise NoCrossingError(f"no descent from {root:.6g} to {-root:.6g} after t={after}")

    @staticmethod
    def excursion_starts(traj: RiccatiTrajectory, a_L: float) -> ExcursionSummary:
        """Starting times iota of the successive excursions to -sqrt(a_L), and whether each ends in an explosion."""
        root = math.sqrt(a_L)
        t, z = traj.times, traj.values
        starts: List[float] = []
        exploded: List[bool] = []
        for crossing in _descents(traj, a_L):
            event = crossing.event
            back = np.flatnonzero((t > event.theta) & (z >= root))
            returned = float(t[back[0]]) if len(back) else math.inf
            starts.append(event.iota)
            exploded.append(event.zeta is not None and event.zeta <= returned)
        return ExcursionSummary(starts=np.array(starts), exploded=np.array(exploded, dtype=bool))

    @staticmethod
    def crossing_durations(event: CrossingEvent, a_L: float) -> Tuple[float, float, float]:
        """(theta - upsilon, zeta - theta, 3/8 ln a_L / sqrt a_L); zeta - theta is nan without an explosion."""
        reference = 0.375 * math.log(a_L) / math.sqrt(a_L)
        to_explosion = event.zeta - event.theta if event.zeta is not None else math.nan
        return event.theta - event.upsilon, to_explosion, reference

    @staticmethod
    def horizon_certificate(
        path_factory: Callable[[float], BrownianPath], beta: float, k: int, T: float, tol: float
    ) -> float:
        """Smallest T (by doubling) whose lambda_k moves by less than tol when T doubles."""
        bisect_tol = tol / 10
        previous = SpectrumService.eigenvalue_bisect(path_factory(T), beta, T, k, bisect_tol)
        for _ in range(MAX_HORIZON_DOUBLINGS):
            current = SpectrumService.eigenvalue_bisect(path_factory(2 * T), beta, 2 * T, k, bisect_tol)
            if abs(current - previous) < tol:
                logger.debug(f"lambda_{k} stable to {tol} at T={T}")
                return T
            T, previous = 2 * T, current
        raise ConvergenceError(f"lambda_{k} still moving after {MAX_HORIZON_DOUBLINGS} horizon doublings (T={T})")

    @staticmethod
    def solve(
        path: BrownianPath,
        beta: float,
        T: float,
        k_max: int,
        tol: float = 1e-6,
        params: Optional[ScalingParams] = None,
        bins: int = 50,
    ) -> SpectralResult:
        """The first k_max eigenpairs with centers, Riccati logs and, given params, the measures m_k."""
        lambdas = np.array([SpectrumService.eigenvalue_bisect(path, beta, T, k, tol) for k in range(1, k_max + 1)])
        a_L = params.a_L if params is not None else None
        eigenfunctions = [
            SpectrumService.reconstruct_eigenfunction(path, beta, T, lam, tol, a_L=a_L) for lam in lambdas
        ]
        measures = []
        if params is not None:
            measures = [
                SpectrumService.measure_histogram(ef.times, ef.values, params.L, bins) for ef in eigenfunctions
            ]
        return SpectralResult(
            lambdas=lambdas,
            eigenfunctions=eigenfunctions,
            centers=np.array([ef.center for ef in eigenfunctions]),
            chis=[ef.forward for ef in eigenfunctions],
            measures=measures,
        )
