"""Per-kind Monte Carlo pipelines: one replica at a time, then the verdicts over all replicas."""

import logging
import math
from typing import Any, Dict, List, Tuple

import numpy as np

from app.beta_ensemble import EnsembleService
from app.errors import ConvergenceError, NoCrossingError, RangeError, SAOError
from app.models import (
    Distribution,
    ExperimentConfig,
    ExperimentKind,
    OUExitSpec,
    PointProcessSample,
    ReplicaRecord,
    TridiagonalMatrix,
    Verdict,
)
from app.paths import PathService
from app.riccati import RiccatiService
from app.scaling import ScalingService
from app.spectrum import SpectrumService
from app.stats import MIN_KS_SAMPLE, MIN_MCKEAN_SAMPLES, MIN_POISSON_REPLICAS, OUExitService, StatsService

logger = logging.getLogger(__name__)

SPECTRUM_HORIZON_IN_L = 8.0
EXPLOSION_HORIZON_IN_L = 6.0
R_GRID_HALF_WIDTH = 2
MCKEAN_HORIZON_IN_M = 60.0
POISSON_HORIZON_IN_M = 10.0
ENSEMBLE_T0 = 8.0
HORIZON_TOL = 1e-3
SPECTRUM_R_EDGES = (-math.inf, -1.0, 0.0)
SERIES_AGREEMENT = 1e-8
SMALL_X_RTOL = 0.5

Values = Dict[str, float]
Arrays = Dict[str, List[float]]


def _betas(config: ExperimentConfig) -> List[float]:
    return list(config.betas) if config.betas else [config.beta]


def _tag(beta: float) -> str:
    return f"@{beta:g}"


def _skipped(name: str, reason: str) -> Verdict:
    return Verdict(name=name, passed=False, gated=False, details={"skipped": reason})


def _column(records: List[ReplicaRecord], key: str) -> np.ndarray:
    return np.array([r.values[key] for r in records if key in r.values], dtype=float)


def _first_of(records: List[ReplicaRecord], key: str) -> np.ndarray:
    return np.array([r.arrays[key][0] for r in records if r.arrays.get(key)], dtype=float)


# Replica pipelines
def _spectrum_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    arrays: Arrays = {}
    for beta in _betas(config):
        params = ScalingService.scaling_params(beta)
        path = PathService.generate(0.0, config.T or SPECTRUM_HORIZON_IN_L * params.L, config.dt, seed)
        result = SpectrumService.solve(path, beta, path.t1, config.k_max, config.tol, params)
        tag = _tag(beta)
        arrays["lambda" + tag] = result.lambdas.tolist()
        arrays["rescaled" + tag] = [ScalingService.rescale_eigenvalue(lam, params) for lam in result.lambdas]
        arrays["center" + tag] = (result.centers / params.L).tolist()
    return {}, arrays


def _explosions_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    params = ScalingService.scaling_params(config.beta)
    root = math.sqrt(params.a_L)
    r = config.epsilon * np.arange(-R_GRID_HALF_WIDTH, R_GRID_HALF_WIDTH + 1)
    a_grid = params.a_L - r / (4 * root)
    path = PathService.generate(0.0, config.T or EXPLOSION_HORIZON_IN_L * params.L, config.dt, seed)
    trajectories = RiccatiService.coupled_sweep(path, a_grid[::-1], config.beta, 0.0, path.t1, config.tol)[::-1]

    grid = StatsService.quantile_grid(config.n)
    counts = np.array(
        [StatsService.interval_counts(PointProcessSample(traj.explosions / params.L), grid) for traj in trajectories]
    )
    increments = np.diff(counts, axis=0, prepend=0)

    centered = trajectories[R_GRID_HALF_WIDTH]
    excursions = SpectrumService.excursion_starts(centered, params.a_L)
    values: Values = {
        "monotone": float(np.all(increments >= 0)),
        "excursions": float(len(excursions.starts)),
        "explosion_fraction": excursions.explosion_fraction,
        "descent_ratio": math.nan,
        "tanh_distance": math.nan,
    }
    try:
        crossing = SpectrumService.extract_crossing(centered, params.a_L)
        descent, _, reference = SpectrumService.crossing_durations(crossing.event, params.a_L)
        values["descent_ratio"] = descent / reference
        values["tanh_distance"] = crossing.tanh_distance
    except NoCrossingError as e:
        logger.debug(f"no crossing at a_L for seed {seed}: {e}")
    return values, {"increments": increments.ravel().astype(float).tolist()}


def _mckean_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    m_a = ScalingService.mean_explosion_time(config.a)
    horizon = (config.T or MCKEAN_HORIZON_IN_M) * m_a
    times = RiccatiService.homogeneous_explosion_times(seed, config.a, horizon, config.dt, 1, config.tol)
    if len(times) == 0:
        raise ConvergenceError(f"no explosion of X_{config.a} before t={horizon:.6g}")
    return {"gamma": float(times[0])}, {}


def _poisson_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    m_a = ScalingService.mean_explosion_time(config.a)
    horizon = (config.T or POISSON_HORIZON_IN_M) * m_a
    times = RiccatiService.homogeneous_explosion_times(seed, config.a, horizon, config.dt, tol=config.tol)
    counts, _ = np.histogram(times, np.linspace(0.0, horizon, config.cells + 1))
    return {"explosions": float(len(times))}, {"counts": counts.astype(float).tolist()}


def _shape_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    values: Values = {}
    for beta in _betas(config):
        params = ScalingService.scaling_params(beta)
        path = PathService.generate(0.0, config.T or SPECTRUM_HORIZON_IN_L * params.L, config.dt, seed)
        lam = SpectrumService.eigenvalue_bisect(path, beta, path.t1, 1, config.tol)
        ef = SpectrumService.reconstruct_eigenfunction(path, beta, path.t1, lam, config.tol, a_L=params.a_L)
        tag = _tag(beta)
        values["h_distance" + tag] = values["b_distance" + tag] = values["tanh_distance" + tag] = math.nan
        try:
            profile = SpectrumService.shape_profiles(ef, path, ef.center, params.a_L, x_max=config.x_max)
            values["h_distance" + tag] = profile.h_distance
            values["b_distance" + tag] = profile.b_distance
        except RangeError as e:
            logger.debug(f"shape window does not fit at beta={beta}, seed {seed}: {e}")
        try:
            values["tanh_distance" + tag] = SpectrumService.extract_crossing(ef.forward, params.a_L).tanh_distance
        except NoCrossingError as e:
            logger.debug(f"no crossing for chi_1 at beta={beta}, seed {seed}: {e}")
    return values, {}


def _ensemble_edge_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    beta = config.beta
    T = config.T
    if T is None:
        T = SpectrumService.horizon_certificate(
            lambda t: PathService.generate(0.0, t, config.dt, seed), beta, 1, ENSEMBLE_T0, HORIZON_TOL
        )
    path = PathService.generate(0.0, T, config.dt, seed)
    lam = SpectrumService.eigenvalue_bisect(path, beta, path.t1, 1, config.tol)
    mu_sao, _ = ScalingService.invert_conventions(lam, 0.0, beta)
    draws = max(1, config.ensemble_samples // config.replicas)
    diags, offdiags = EnsembleService.sample_batch(config.N, beta, draws, seed)
    top = [EnsembleService.eigenvalues(TridiagonalMatrix(d, o), k_top=1) for d, o in zip(diags, offdiags)]
    edge = [float(EnsembleService.edge_rescale(mu, config.N, 1)[0]) for mu in top]
    return {"mu_sao": mu_sao, "T": path.t1}, {"edge_ensemble": edge}


def _ou_exit_replica(config: ExperimentConfig, seed: int) -> Tuple[Values, Arrays]:
    spec = OUExitSpec(theta=config.theta, nu=config.nu, b=config.b)
    estimate = OUExitService.ou_exit_mc(spec, config.n_paths, config.dt, seed)
    return {"mean": estimate.mean, "stderr": estimate.stderr, "unfinished": float(estimate.n_unfinished)}, {}


def run_replica(payload: Dict[str, Any], replica_id: int, seed: int) -> ReplicaRecord:
    """One replica of the configured experiment; domain errors are recorded, not raised."""
    config = ExperimentConfig.model_validate(payload)
    try:
        match config.kind:
            case ExperimentKind.SPECTRUM:
                values, arrays = _spectrum_replica(config, seed)
            case ExperimentKind.EXPLOSIONS:
                values, arrays = _explosions_replica(config, seed)
            case ExperimentKind.MCKEAN:
                values, arrays = _mckean_replica(config, seed)
            case ExperimentKind.POISSON:
                values, arrays = _poisson_replica(config, seed)
            case ExperimentKind.SHAPE:
                values, arrays = _shape_replica(config, seed)
            case ExperimentKind.ENSEMBLE_EDGE:
                values, arrays = _ensemble_edge_replica(config, seed)
            case ExperimentKind.OU_EXIT:
                values, arrays = _ou_exit_replica(config, seed)
    except SAOError as e:
        logger.error(f"replica {replica_id} (seed {seed}) failed: {e}")
        return ReplicaRecord(replica_id=replica_id, seed=seed, ok=False, error=f"{type(e).__name__}: {e}")
    logger.debug(f"replica {replica_id} (seed {seed}) done")
    return ReplicaRecord(replica_id=replica_id, seed=seed, values=values, arrays=arrays)


# Verdicts
def _spectrum_summary(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    summary: Dict[str, Any] = {"n": len(records)}
    verdicts: List[Verdict] = []
    statistics = {}
    for beta in _betas(config):
        tag = _tag(beta)
        # the Gumbel law is stated for -4 sqrt(a_L)(lambda_1 + a_L)
        sample = -_first_of(records, "rescaled" + tag)
        summary["mean_rescaled_1" + tag] = float(np.mean(-sample)) if len(sample) else math.nan
        if len(sample) < MIN_KS_SAMPLE:
            verdicts.append(_skipped("gumbel-fit" + tag, f"{len(sample)} samples"))
            continue
        gumbel = StatsService.gumbel_fit_test(sample, config.alpha)
        verdicts.append(gumbel.model_copy(update={"name": "gumbel-fit" + tag}))
        statistics[beta] = gumbel.statistic
        if beta == _betas(config)[0]:
            loc, scale = gumbel.details["loc"], gumbel.details["scale"]
            summary["ecdf"] = StatsService.ecdf_overlay((sample - loc) / scale, Distribution.GUMBEL)

        centers = _first_of(records, "center" + tag)
        ks = StatsService.ks_statistic(centers, Distribution.EXPONENTIAL)
        verdicts.append(
            Verdict(
                name="centers-exponential" + tag,
                passed=ks.p_value > config.alpha,
                gated=False,
                statistic=ks.statistic,
                p_value=ks.p_value,
                threshold=config.alpha,
            )
        )

        if len(records) >= MIN_POISSON_REPLICAS and config.k_max >= 5:
            grid = StatsService.quantile_grid(config.n)
            counts = np.array(
                [
                    StatsService.interval_counts_2d(
                        r.arrays["rescaled" + tag], r.arrays["center" + tag], SPECTRUM_R_EDGES, grid
                    ).ravel()
                    for r in records
                ]
            )
            poisson = StatsService.poisson_test(
                counts, StatsService.poisson_intensities(SPECTRUM_R_EDGES, grid), config.alpha
            )
            verdicts.append(poisson.model_copy(update={"name": "spectrum-poisson" + tag, "gated": False}))

    if len(statistics) >= 2:
        ordered = [statistics[beta] for beta in sorted(statistics, reverse=True)]
        verdicts.append(
            Verdict(
                name="gumbel-trend",
                passed=bool(np.all(np.diff(ordered) <= 0)),
                gated=False,
                details={"betas": sorted(statistics, reverse=True), "ks_distances": ordered},
            )
        )
    return summary, verdicts


def _explosions_summary(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    r = config.epsilon * np.arange(-R_GRID_HALF_WIDTH, R_GRID_HALF_WIDTH + 1)
    grid = StatsService.quantile_grid(config.n)
    summary: Dict[str, Any] = {
        "n": len(records),
        "r_grid": r.tolist(),
        "explosion_fraction": float(np.nanmean(_column(records, "explosion_fraction"))) if records else math.nan,
        "descent_ratio": float(np.nanmedian(_column(records, "descent_ratio"))) if records else math.nan,
    }
    monotone = _column(records, "monotone")
    verdicts = [
        Verdict(
            name="monotone-counts",
            passed=bool(len(monotone) and np.all(monotone == 1.0)),
            statistic=float(np.mean(monotone)) if len(monotone) else None,
        ),
        Verdict(
            name="explosion-fraction",
            passed=abs(summary["explosion_fraction"] - 0.5) <= 0.25,
            gated=False,
            statistic=summary["explosion_fraction"],
            threshold=0.5,
        ),
    ]
    if len(records) < MIN_POISSON_REPLICAS:
        verdicts.append(_skipped("poisson", f"{len(records)} replicas"))
        return summary, verdicts
    counts = np.array([r.arrays["increments"] for r in records])
    intensities = StatsService.poisson_intensities(np.concatenate([[-np.inf], r]), grid)
    verdicts.append(StatsService.poisson_test(counts, intensities, config.alpha))
    return summary, verdicts


def _small_x_deviation(rescaled: np.ndarray, a: float) -> Verdict:
    """Largest gap between P(gamma/m <= x) and 1 - e^-x for (ln a)^-3 <= x <= 1, relative to 1 - e^-x."""
    lower = math.log(a) ** -3 if a > 1 else 0.0
    x = np.sort(rescaled)
    window = (x >= lower) & (x <= 1.0)
    if not window.any():
        return _skipped("mckean-small-x", f"no samples in [{lower:.3g}, 1]")
    ecdf = np.arange(1, len(x) + 1)[window] / len(x)
    reference = -np.expm1(-x[window])
    deviation = float(np.max(np.abs(ecdf - reference) / reference))
    return Verdict(
        name="mckean-small-x",
        passed=deviation <= SMALL_X_RTOL,
        gated=False,
        statistic=deviation,
        threshold=SMALL_X_RTOL,
        details={"x_min": lower, "samples": int(window.sum())},
    )


def _mckean_summary(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    gamma = _column(records, "gamma")
    m_a = ScalingService.mean_explosion_time(config.a)
    summary: Dict[str, Any] = {"n": len(gamma), "m(a)": m_a}
    verdicts: List[Verdict] = []
    if len(gamma) >= MIN_MCKEAN_SAMPLES:
        test = StatsService.mckean_exponential_test(gamma, m_a, config.alpha)
        verdicts.append(test)
        summary.update({"D": test.details["D"], "p": test.details["p"]})
        summary["ecdf"] = StatsService.ecdf_overlay(gamma / m_a, Distribution.EXPONENTIAL)
        verdicts.append(_small_x_deviation(gamma / m_a, config.a))
    else:
        verdicts.append(_skipped("mckean-exponential", f"{len(gamma)} samples"))
    if len(gamma) >= 2:
        stderr = float(np.std(gamma, ddof=1) / math.sqrt(len(gamma)))
        mean = float(np.mean(gamma))
        summary.update({"mean_gamma": mean, "stderr": stderr})
        verdicts.append(
            Verdict(
                name="mckean-mean",
                passed=abs(mean - m_a) <= 3 * stderr,
                statistic=mean,
                threshold=3 * stderr,
                details={"m(a)": m_a},
            )
        )
    return summary, verdicts


def _poisson_summary(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    units = config.T or POISSON_HORIZON_IN_M
    summary: Dict[str, Any] = {"n": len(records), "intensity": units / config.cells}
    if len(records) < MIN_POISSON_REPLICAS:
        return summary, [_skipped("poisson", f"{len(records)} replicas")]
    counts = np.array([r.arrays["counts"] for r in records])
    intensities = np.full(config.cells, units / config.cells)
    return summary, [StatsService.poisson_test(counts, intensities, config.alpha)]


def _trend(name: str, key: str, medians: Dict[float, float]) -> Verdict:
    """Passes when the median distance does not grow as beta decreases."""
    if len(medians) < 2:
        return _skipped(name, f"fewer than two betas with a finite median {key}")
    betas = sorted(medians, reverse=True)
    ordered = [medians[beta] for beta in betas]
    return Verdict(
        name=name,
        passed=bool(np.all(np.diff(ordered) <= 0)),
        details={"betas": betas, "median_" + key: ordered},
    )


def _shape_summary(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    summary: Dict[str, Any] = {"n": len(records)}
    medians: Dict[str, Dict[float, float]] = {"h_distance": {}, "tanh_distance": {}}
    for beta in _betas(config):
        tag = _tag(beta)
        for key in ("h_distance", "b_distance", "tanh_distance"):
            column = _column(records, key + tag)
            finite = column[np.isfinite(column)]
            summary["median_" + key + tag] = float(np.median(finite)) if len(finite) else math.nan
            if key in medians and len(finite):
                medians[key][beta] = summary["median_" + key + tag]
    return summary, [
        _trend("shape-trend", "h_distance", medians["h_distance"]),
        _trend("tanh-trend", "tanh_distance", medians["tanh_distance"]),
    ]


def _ensemble_edge_summary(
    config: ExperimentConfig, records: List[ReplicaRecord]
) -> Tuple[Dict[str, Any], List[Verdict]]:
    sao = _column(records, "mu_sao")
    ensemble = np.array([x for r in records for x in r.arrays.get("edge_ensemble", [])], dtype=float)
    summary: Dict[str, Any] = {
        "n": len(sao),
        "n_sao": len(sao),
        "n_ensemble": len(ensemble),
        "median_mu_sao": float(np.median(sao)) if len(sao) else math.nan,
        "median_edge_ensemble": float(np.median(ensemble)) if len(ensemble) else math.nan,
    }
    if len(sao) < MIN_KS_SAMPLE:
        return summary, [_skipped("ensemble-edge", f"{len(sao)} samples")]
    ks = StatsService.two_sample_ks(sao, ensemble)
    return summary, [
        Verdict(
            name="ensemble-edge",
            passed=ks.p_value > config.alpha,
            statistic=ks.statistic,
            p_value=ks.p_value,
            threshold=config.alpha,
        )
    ]


def _ou_exit_summary(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    spec = OUExitSpec(theta=config.theta, nu=config.nu, b=config.b)
    series = OUExitService.ou_exit_laplace(spec)
    closed = OUExitService.ou_exit_closed_form(spec)
    bound = OUExitService.ou_exit_bound(spec)
    means, errors = _column(records, "mean"), _column(records, "stderr")
    summary: Dict[str, Any] = {"series": series, "closed_form": closed, "bound": bound, "n": len(means)}
    verdicts = [
        Verdict(
            name="ou-series-closed-form",
            passed=abs(series - closed) <= SERIES_AGREEMENT * max(1.0, abs(closed)),
            statistic=abs(series - closed),
            threshold=SERIES_AGREEMENT,
        )
    ]
    if len(means):
        mc = float(np.mean(means))
        stderr = float(np.sqrt(np.sum(errors**2)) / len(errors))
        summary.update({"mc": mc, "mc_stderr": stderr, "unfinished": float(np.sum(_column(records, "unfinished")))})
        verdicts.append(
            Verdict(name="ou-mc", passed=abs(mc - series) <= 3 * stderr, statistic=mc, threshold=3 * stderr)
        )
        verdicts.append(Verdict(name="ou-bound", passed=mc <= bound, gated=False, statistic=mc, threshold=bound))
    return summary, verdicts


def summarize(config: ExperimentConfig, records: List[ReplicaRecord]) -> Tuple[Dict[str, Any], List[Verdict]]:
    """Summary statistics and verdicts over the successful replicas."""
    ok = [r for r in records if r.ok]
    match config.kind:
        case ExperimentKind.SPECTRUM:
            return _spectrum_summary(config, ok)
        case ExperimentKind.EXPLOSIONS:
            return _explosions_summary(config, ok)
        case ExperimentKind.MCKEAN:
            return _mckean_summary(config, ok)
        case ExperimentKind.POISSON:
            return _poisson_summary(config, ok)
        case ExperimentKind.SHAPE:
            return _shape_summary(config, ok)
        case ExperimentKind.ENSEMBLE_EDGE:
            return _ensemble_edge_summary(config, ok)
        case ExperimentKind.OU_EXIT:
            return _ou_exit_summary(config, ok)
