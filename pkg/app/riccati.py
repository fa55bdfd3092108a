"""Riccati diffusions with explosions.

Z = phi'/phi for phi'' = (a + beta t/4 + xi) phi. The integrator carries the
projective pair (q, p) ~ (phi, phi'), so an explosion of Z to -inf followed by
the restart from +inf is simply a sign change of q. Each path cell is one
Strang step: exact flow of phi'' = c phi over half the cell (c frozen at the
cell midpoint), the noise kick p += dB q, then the other half.

Backward diffusions run the same engine in reversed traversal on -Z-hat,
whose equation in the reversed clock has the forward form.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from app.errors import (
    CertificateError,
    ConvergenceError,
    IntegrationError,
    PathCoverageError,
    RangeError,
    SAOError,
)
from app.models import BrownianPath, Chart, Direction, DriftSpec, RiccatiTrajectory, Scheme
from app.paths import PathService

logger = logging.getLogger(__name__)

Z_SWITCH_FACTOR = 8.0
MAX_REFINE_DEPTH = 40
DEFAULT_TOL_FRACTION = 1e-6
HOMOGENEOUS_CHUNK_CELLS = 2**17


def z_switch(a: float) -> float:
    """Chart-change threshold 8 max(1, sqrt(a))."""
    return Z_SWITCH_FACTOR * max(1.0, math.sqrt(max(a, 0.0)))


def _flow(c: float, tau: float) -> Tuple[float, float]:
    """(C, S) with q' = C q + S p, p' = c S q + C p over time tau."""
    if c > 0:
        root = math.sqrt(c)
        return math.cosh(root * tau), math.sinh(root * tau) / root
    if c < 0:
        root = math.sqrt(-c)
        return math.cos(root * tau), math.sin(root * tau) / root
    return 1.0, tau


def _flow_arrays(c: np.ndarray, tau: np.ndarray, a: float) -> Tuple[np.ndarray, np.ndarray]:
    root = np.sqrt(np.abs(c))
    x = root * tau
    positive = c > 0
    if np.any(positive & (x > 700.0)) or np.any(~positive & (x >= math.pi / 2)):
        raise IntegrationError(f"path step too coarse for a={a}: sqrt|c| dt/2 up to {float(x.max()):.3g}", a=a)
    hyperbolic = np.where(positive, x, 0.0)
    C = np.where(positive, np.cosh(hyperbolic), np.cos(x))
    numerator = np.where(positive, np.sinh(hyperbolic), np.sin(x))
    S = np.divide(numerator, root, out=np.array(tau, dtype=float, copy=True), where=root > 0)
    return C, S


def _crossed(q0: float, q1: float) -> bool:
    return (q0 > 0 and q1 <= 0) or (q0 < 0 and q1 >= 0)


def _initial_state(x: float) -> Tuple[float, float]:
    if math.isinf(x):
        return 0.0, 1.0
    norm = 1.0 + abs(x)
    return 1.0 / norm, x / norm


def _ratio(q: float, p: float) -> float:
    if q == 0:
        return math.copysign(math.inf, p)
    return p / q


@dataclass
class _Sweep:
    times: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    log_abs: List[float] = field(default_factory=list)
    signs: List[float] = field(default_factory=list)
    explosions: List[float] = field(default_factory=list)
    final_value: float = math.inf
    t_stop: float = 0.0
    restart_gap: float = 0.0


def _cell(
    drift: DriftSpec, t_a: float, t_b: float, b_a: float, b_b: float, kick_sign: float
) -> Tuple[float, float, float, float]:
    """(C, S, c, kick) of the Strang step for the cell traversed from t_a to t_b."""
    c = drift.a + drift.beta * (t_a + t_b) / 8
    C, S = _flow(c, abs(t_b - t_a) / 2)
    return C, S, c, kick_sign * (b_b - b_a)


def _cell_step(
    drift: DriftSpec, t_a: float, t_b: float, b_a: float, b_b: float, q: float, p: float, kick_sign: float
) -> Tuple[float, float, bool]:
    C, S, c, kick = _cell(drift, t_a, t_b, b_a, b_b, kick_sign)
    q1, p1 = C * q + S * p, c * S * q + C * p
    p1 += kick * q1
    q2, p2 = C * q1 + S * p1, c * S * q1 + C * p1
    norm = abs(q2) + abs(p2)
    return q2 / norm, p2 / norm, _crossed(q, q1) or _crossed(q1, q2)


def _cell_crossings(
    drift: DriftSpec, t_a: float, t_b: float, b_a: float, b_b: float, q: float, p: float, kick_sign: float
) -> List[float]:
    """Zeros of q inside the cell, solved on the analytic half-step flows."""
    C, S, c, kick = _cell(drift, t_a, t_b, b_a, b_b, kick_sign)
    tau = abs(t_b - t_a) / 2
    direction = 1.0 if t_b > t_a else -1.0
    found = []
    q1, p1 = C * q + S * p, c * S * q + C * p
    halves = ((0.0, q, p, q1), (tau, q1, p1 + kick * q1, None))
    for offset, q_start, p_start, q_end in halves:
        if q_end is None:
            q_end = C * q_start + S * p_start
        if not _crossed(q_start, q_end):
            continue
        if q_end == 0:
            found.append(t_a + direction * (offset + tau))
            continue

        def height(s: float, q_start=q_start, p_start=p_start) -> float:
            Cs, Ss = _flow(c, s)
            return Cs * q_start + Ss * p_start

        root = brentq(height, 0.0, tau, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
        found.append(t_a + direction * (offset + root))
    return found


def _locate_in_cell(
    path: BrownianPath,
    drift: DriftSpec,
    t_a: float,
    t_b: float,
    b_a: float,
    b_b: float,
    q: float,
    p: float,
    kick_sign: float,
    tol: float,
) -> List[float]:
    """Explosion times in one path cell, refined by Brownian-bridge bisection down to tol."""
    coarse = _cell_crossings(drift, t_a, t_b, b_a, b_b, q, p, kick_sign)
    if len(coarse) != 1 or abs(t_b - t_a) <= tol:
        return coarse
    lo_t, hi_t, lo_b, hi_b = t_a, t_b, b_a, b_b
    depth = 0
    while abs(hi_t - lo_t) > tol:
        depth += 1
        if depth > MAX_REFINE_DEPTH:
            raise ConvergenceError(f"explosion near t={coarse[0]} needs more than {MAX_REFINE_DEPTH} bisections")
        if lo_t < hi_t:
            mid_b = PathService.midpoint(path, lo_t, hi_t, lo_b, hi_b)
        else:
            mid_b = PathService.midpoint(path, hi_t, lo_t, hi_b, lo_b)
        mid_t = 0.5 * (lo_t + hi_t)
        q1, p1, crossed = _cell_step(drift, lo_t, mid_t, lo_b, mid_b, q, p, kick_sign)
        if crossed:
            hi_t, hi_b = mid_t, mid_b
            continue
        _, _, crossed_second = _cell_step(drift, mid_t, hi_t, mid_b, hi_b, q1, p1, kick_sign)
        if not crossed_second:
            logger.debug(f"refined dynamics lost the crossing near t={coarse[0]}; keeping the cell estimate")
            return coarse
        lo_t, lo_b, q, p = mid_t, mid_b, q1, p1
    refined = _cell_crossings(drift, lo_t, hi_t, lo_b, hi_b, q, p, kick_sign)
    return refined[:1] or coarse


def _splitting_sweep(
    path: BrownianPath,
    drift: DriftSpec,
    i_start: int,
    i_stop: int,
    x_start: float,
    kick_sign: float,
    tol: float,
    stride: int,
    max_explosions: Optional[int],
    locate: bool,
) -> _Sweep:
    step = 1 if i_stop > i_start else -1
    index = np.arange(i_start, i_stop + step, step)
    ts = path.grid[index]
    bs = path.values[index]
    t_from, t_to = ts[:-1], ts[1:]
    c = drift.a + drift.beta * (t_from + t_to) / 8
    C, S = _flow_arrays(c, np.abs(t_to - t_from) / 2, drift.a)
    cS_list = (c * S).tolist()
    C_list, S_list = C.tolist(), S.tolist()
    kicks = (kick_sign * (bs[1:] - bs[:-1])).tolist()
    t_list, b_list = ts.tolist(), bs.tolist()

    sweep = _Sweep(t_stop=t_list[-1])
    q, p = _initial_state(x_start)
    log_amp = 0.0
    if stride > 0:
        sweep.times.append(t_list[0])
        sweep.values.append(_ratio(q, p))
        sweep.log_abs.append(math.log(abs(q)) if q != 0 else -math.inf)
        sweep.signs.append(float(np.sign(q)))
    last = len(C_list) - 1
    for n in range(len(C_list)):
        Cn, Sn, cSn = C_list[n], S_list[n], cS_list[n]
        q1 = Cn * q + Sn * p
        p1 = cSn * q + Cn * p + kicks[n] * q1
        q2 = Cn * q1 + Sn * p1
        p2 = cSn * q1 + Cn * p1
        if _crossed(q, q1) or _crossed(q1, q2):
            if locate:
                found = _locate_in_cell(
                    path, drift, t_list[n], t_list[n + 1], b_list[n], b_list[n + 1], q, p, kick_sign, tol
                )
            else:
                found = [t_list[n + 1]] * (int(_crossed(q, q1)) + int(_crossed(q1, q2)))
            sweep.explosions.extend(found)
        norm = abs(q2) + abs(p2)
        log_amp += math.log(norm)
        q, p = q2 / norm, p2 / norm
        stop = max_explosions is not None and len(sweep.explosions) >= max_explosions
        if stride > 0 and ((n + 1) % stride == 0 or n == last or stop):
            sweep.times.append(t_list[n + 1])
            sweep.values.append(_ratio(q, p))
            sweep.log_abs.append(math.log(abs(q)) + log_amp if q != 0 else -math.inf)
            sweep.signs.append(float(np.sign(q)))
        if stop:
            sweep.t_stop = t_list[n + 1]
            break
    sweep.final_value = _ratio(q, p)
    return sweep


def _semi_implicit_sweep(
    path: BrownianPath,
    drift: DriftSpec,
    i_start: int,
    i_stop: int,
    x_start: float,
    kick_sign: float,
    stride: int,
    max_explosions: Optional[int],
) -> _Sweep:
    """Drift-implicit Euler-Maruyama in z, explicit Euler-Maruyama in w = -1/z near blow-up.

    A start at +inf follows the deterministic entrance sqrt(c) coth(sqrt(c) tau) until it drops
    below the chart switch; restarts after an explosion stay in the w-chart.
    """
    step = 1 if i_stop > i_start else -1
    index = np.arange(i_start, i_stop + step, step)
    ts = path.grid[index].tolist()
    bs = path.values[index].tolist()
    threshold = z_switch(drift.a)
    entering = math.isinf(x_start)
    chart, z, w = (Chart.W, math.inf, 0.0) if math.isinf(x_start) else (Chart.Z, x_start, 0.0)
    if chart == Chart.Z and abs(z) > threshold:
        chart, w = Chart.W, -1.0 / z

    sweep = _Sweep(t_stop=ts[-1])

    def current() -> float:
        if chart == Chart.Z:
            return z
        return -1.0 / w if w != 0 else math.inf

    def record(t: float) -> None:
        sweep.times.append(t)
        sweep.values.append(current())
        sweep.log_abs.append(math.nan)
        sweep.signs.append(0.0)

    if stride > 0:
        record(ts[0])
    for n in range(len(ts) - 1):
        h = abs(ts[n + 1] - ts[n])
        sweep.restart_gap = max(sweep.restart_gap, h)
        c = drift.a + drift.beta * (ts[n] + ts[n + 1]) / 8
        kick = kick_sign * (bs[n + 1] - bs[n])
        if entering:
            # deterministic entrance from +inf: sqrt(c) coth(sqrt(c) tau) while above the switch
            C, S = _flow(drift.a + drift.beta * (ts[0] + ts[n + 1]) / 8, abs(ts[n + 1] - ts[0]))
            entry = _ratio(S, C)
            if entry <= threshold:
                entering, chart, z = False, Chart.Z, entry
            else:
                w = -1.0 / entry
            step_w = False
        elif chart == Chart.Z:
            r = z + c * h + kick
            discriminant = 1.0 + 4.0 * h * r
            if discriminant >= 0:
                z = 2.0 * r / (1.0 + math.sqrt(discriminant))
                if abs(z) > threshold:
                    chart, w = Chart.W, -1.0 / z
                step_w = False
            else:
                # no implicit root: this step is taken in the w-chart
                chart, w = Chart.W, -1.0 / z
                step_w = True
        else:
            step_w = True
        if step_w:
            w_next = w + (-1.0 + c * w * w + w**3) * h + w * w * kick
            if w > 0 and w_next <= 0:
                sweep.explosions.append(ts[n] + (ts[n + 1] - ts[n]) * w / (w - w_next))
            w = w_next
            if w != 0 and abs(w) >= 1.0 / threshold:
                chart, z = Chart.Z, -1.0 / w
        stop = max_explosions is not None and len(sweep.explosions) >= max_explosions
        if stride > 0 and ((n + 1) % stride == 0 or n == len(ts) - 2 or stop):
            record(ts[n + 1])
        if stop:
            sweep.t_stop = ts[n + 1]
            break
    sweep.final_value = current()
    return sweep


class RiccatiService:
    """Service for forward, backward and homogeneous Riccati diffusions."""

    @staticmethod
    def _indices(path: BrownianPath, t_lo: float, t_hi: float) -> Tuple[int, int]:
        if not t_lo < t_hi:
            raise RangeError(f"integration interval needs t_lo < t_hi, got [{t_lo}, {t_hi}]")
        if not path.covers(t_lo, t_hi):
            raise PathCoverageError(f"path [{path.t0}, {path.t1}] does not cover [{t_lo}, {t_hi}]")
        return PathService.grid_index(path, t_lo), PathService.grid_index(path, t_hi)

    @staticmethod
    def _run(
        path: BrownianPath,
        drift: DriftSpec,
        i_start: int,
        i_stop: int,
        x_start: float,
        kick_sign: float,
        tol: float,
        stride: int,
        max_explosions: Optional[int],
        scheme: Scheme,
        locate: bool,
    ) -> _Sweep:
        if tol <= 0:
            raise RangeError(f"tol must be positive, got {tol}")
        match scheme:
            case Scheme.SPLITTING:
                return _splitting_sweep(
                    path, drift, i_start, i_stop, x_start, kick_sign, tol, stride, max_explosions, locate
                )
            case Scheme.SEMI_IMPLICIT:
                return _semi_implicit_sweep(path, drift, i_start, i_stop, x_start, kick_sign, stride, max_explosions)
            case _:
                raise RangeError(f"unknown scheme {scheme!r}")

    @staticmethod
    def integrate_forward(
        path: BrownianPath,
        drift: DriftSpec,
        t0: float,
        x0: float,
        t1: float,
        tol: Optional[float] = None,
        stride: int = 1,
        max_explosions: Optional[int] = None,
        scheme: Scheme = Scheme.SPLITTING,
        locate: bool = True,
    ) -> RiccatiTrajectory:
        """Z_a^{(t0, x0)} on [t0, t1] with explosion times and restarts from +inf.

        ``stride`` thins the stored samples (0 stores none); ``max_explosions``
        stops the integration once that many explosions are recorded.
        """
        i0, i1 = RiccatiService._indices(path, t0, t1)
        tol = DEFAULT_TOL_FRACTION * (t1 - t0) if tol is None else tol
        sweep = RiccatiService._run(path, drift, i0, i1, x0, 1.0, tol, stride, max_explosions, scheme, locate)
        return RiccatiTrajectory(
            direction=Direction.FORWARD,
            a=drift.a,
            beta=drift.beta,
            t_start=t0,
            x_start=x0,
            t_stop=sweep.t_stop,
            times=np.array(sweep.times),
            values=np.array(sweep.values),
            log_abs=np.array(sweep.log_abs),
            signs=np.array(sweep.signs),
            explosions=np.array(sweep.explosions),
            scheme=scheme,
            restart_gap=sweep.restart_gap,
            final_value=sweep.final_value,
        )

    @staticmethod
    def integrate_backward(
        path: BrownianPath,
        drift: DriftSpec,
        t_end: float,
        x_end: float,
        t0: float,
        tol: Optional[float] = None,
        stride: int = 1,
        max_explosions: Optional[int] = None,
        scheme: Scheme = Scheme.SPLITTING,
        locate: bool = True,
    ) -> RiccatiTrajectory:
        """Z-hat_a^{(t_end, x_end)} on [t0, t_end], explosions to +inf and restarts from -inf.

        Samples and explosion times are returned in increasing time order.
        """
        i0, i_end = RiccatiService._indices(path, t0, t_end)
        tol = DEFAULT_TOL_FRACTION * (t_end - t0) if tol is None else tol
        sweep = RiccatiService._run(path, drift, i_end, i0, -x_end, -1.0, tol, stride, max_explosions, scheme, locate)
        return RiccatiTrajectory(
            direction=Direction.BACKWARD,
            a=drift.a,
            beta=drift.beta,
            t_start=t_end,
            x_start=x_end,
            t_stop=sweep.t_stop,
            times=np.array(sweep.times[::-1]),
            values=-np.array(sweep.values[::-1]),
            log_abs=np.array(sweep.log_abs[::-1]),
            signs=np.array(sweep.signs[::-1]),
            explosions=np.sort(np.array(sweep.explosions)),
            scheme=scheme,
            restart_gap=sweep.restart_gap,
            final_value=-sweep.final_value,
        )

    @staticmethod
    def hat_Z_canonical(
        path: BrownianPath, a: float, beta: float, horizon_T: float, tol: float, stride: int = 1
    ) -> RiccatiTrajectory:
        """Backward diffusion with Z-hat(+inf) = -inf, certified by doubling the horizon.

        Integrates from horizon_T and from 2 horizon_T, each started at minus the
        well bottom, and compares the two on [t0, horizon_T / 2] as angles on the
        projective line. The discrepancy is stored in ``certificate``.
        """
        drift = DriftSpec(a, beta)
        t0 = path.t0
        if not path.covers(t0, 2 * horizon_T):
            raise PathCoverageError(f"certificate needs the path on [{t0}, {2 * horizon_T}]")

        def terminal(t: float) -> float:
            return -drift.well_bottom(t) if drift.coefficient(t) > 0 else -math.inf

        near = RiccatiService.integrate_backward(path, drift, horizon_T, terminal(horizon_T), t0, tol, stride=1)
        far = RiccatiService.integrate_backward(path, drift, 2 * horizon_T, terminal(2 * horizon_T), t0, tol, stride=1)
        window = near.times <= horizon_T / 2
        count = int(np.count_nonzero(window))
        angle = np.abs(np.arctan(near.values[:count]) - np.arctan(far.values[:count])) % np.pi
        discrepancy = float(np.max(np.minimum(angle, np.pi - angle))) if count else 0.0
        if discrepancy > tol:
            raise CertificateError(
                f"horizon doubling moved Z-hat by {discrepancy:.3g} > {tol} on [{t0}, {horizon_T / 2}] at a={a}"
            )
        if stride > 1:
            keep = np.zeros(len(near.times), dtype=bool)
            keep[::stride] = True
            keep[-1] = True
            near = dataclasses.replace(
                near,
                times=near.times[keep],
                values=near.values[keep],
                log_abs=near.log_abs[keep],
                signs=near.signs[keep],
            )
        return dataclasses.replace(near, certificate=discrepancy)

    @staticmethod
    def explosion_count(traj: RiccatiTrajectory, t_lo: float, t_hi: float) -> int:
        """Number of explosions in (t_lo, t_hi]."""
        lo, hi = traj.span
        slack = 1e-9 * max(1.0, abs(lo), abs(hi))
        if t_lo > t_hi or t_lo < lo - slack or t_hi > hi + slack:
            raise RangeError(f"({t_lo}, {t_hi}] not inside the trajectory span [{lo}, {hi}]")
        return int(np.count_nonzero((traj.explosions > t_lo) & (traj.explosions <= t_hi)))

    @staticmethod
    def coupled_sweep(
        path: BrownianPath,
        a_grid: Sequence[float],
        beta: float,
        t0: float,
        t1: float,
        tol: Optional[float] = None,
        stride: int = 1,
    ) -> List[RiccatiTrajectory]:
        """Forward diffusions from +inf for every a, all driven by the same path."""
        grid = np.asarray(a_grid, dtype=float)
        if grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise RangeError("a_grid must be non-empty and strictly increasing")
        trajectories = []
        for a in grid.tolist():
            try:
                trajectories.append(
                    RiccatiService.integrate_forward(path, DriftSpec(a, beta), t0, math.inf, t1, tol, stride)
                )
            except SAOError as e:
                logger.error(f"coupled sweep failed at a={a}: {e}")
                raise IntegrationError(f"a={a}: {e}", a=a) from e
        return trajectories

    @staticmethod
    def chart_step(value: float, chart: Chart, c: float, h: float, kick: float) -> float:
        """One Strang step of length h in the z-chart or the w = -1/z chart."""
        match chart:
            case Chart.Z:
                q, p = 1.0, value
            case Chart.W:
                q, p = -value, 1.0
        C, S = _flow(c, h / 2)
        q, p = C * q + S * p, c * S * q + C * p
        p += kick * q
        q, p = C * q + S * p, c * S * q + C * p
        match chart:
            case Chart.Z:
                return _ratio(q, p)
            case Chart.W:
                return -q / p if p != 0 else math.copysign(math.inf, -q)

    @staticmethod
    def homogeneous_explosion_times(
        seed: int,
        a: float,
        horizon: float,
        dt: float,
        max_explosions: Optional[int] = None,
        tol: Optional[float] = None,
        chunk_cells: int = HOMOGENEOUS_CHUNK_CELLS,
    ) -> np.ndarray:
        """Explosion times of X_a (beta = 0) from +inf on [0, horizon].

        The path is generated in chunks of chunk_cells cells that share the noise of one long path.
        """
        drift = DriftSpec(a, 0.0)
        chunk = dt * chunk_cells
        tol = DEFAULT_TOL_FRACTION * chunk if tol is None else tol
        times: List[float] = []
        t, x = 0.0, math.inf
        while t < horizon - 1e-12 * horizon:
            path = PathService.generate(t, min(t + chunk, horizon), dt, seed, origin=0.0)
            remaining = None if max_explosions is None else max_explosions - len(times)
            traj = RiccatiService.integrate_forward(path, drift, path.t0, x, path.t1, tol, 0, remaining)
            times.extend(traj.explosions.tolist())
            if max_explosions is not None and len(times) >= max_explosions:
                break
            t, x = path.t1, traj.final_value
        explosions = np.array([e for e in times if e <= horizon])
        logger.debug(f"homogeneous X_{a} seed={seed}: {len(explosions)} explosions on [0, {horizon}]")
        return explosions
