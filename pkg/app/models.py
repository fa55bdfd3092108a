from sqlmodel import SQLModel, Field, JSON, Column
from pydantic import model_validator
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, List, Dict, Any, Tuple
from enum import Enum
import math

import numpy as np

from app.errors import ScalingDomainError, RangeError

SCHEMA_VERSION = "1.0"
BETA_MAX = 0.3


class ExperimentKind(str, Enum):
    SPECTRUM = "spectrum"
    EXPLOSIONS = "explosions"
    MCKEAN = "mckean"
    POISSON = "poisson"
    SHAPE = "shape"
    ENSEMBLE_EDGE = "ensemble-edge"
    OU_EXIT = "ou-exit"


class RunStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


class Scheme(str, Enum):
    SPLITTING = "splitting"
    SEMI_IMPLICIT = "semi_implicit"


class Chart(str, Enum):
    Z = "z"
    W = "w"


class Distribution(str, Enum):
    EXPONENTIAL = "exp"
    GUMBEL = "gumbel"
    UNIFORM = "uniform01"
    NORMAL = "normal01"


class ALSource(str, Enum):
    INVERSE = "inverse"
    ASYMPTOTIC = "asymptotic"


# Persistent models (stored in database)
class ExperimentRun(SQLModel, table=True):
    __tablename__ = "experiment_runs"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    kind: ExperimentKind
    seed: int = Field(description="Run-level seed; replica seeds derive from it")
    replicas: int
    status: RunStatus = Field(default=RunStatus.RUNNING)
    passed: Optional[bool] = Field(default=None)
    config: Dict[str, Any] = Field(default_factory=dict, sa_column=Column(JSON))
    verdicts: List[Dict[str, Any]] = Field(
        default_factory=list, sa_column=Column(JSON), description="Serialized verdicts of the finished run"
    )
    summary: Dict[str, Any] = Field(
        default_factory=dict, sa_column=Column(JSON), description="Scalar summary entries of the finished run"
    )
    report_path: Optional[str] = Field(default=None, max_length=500)
    wall_time: Optional[float] = Field(default=None, description="Wall time in seconds")
    error_message: Optional[str] = Field(default=None, max_length=1000)
    created_at: datetime = Field(default_factory=datetime.utcnow)
    completed_at: Optional[datetime] = Field(default=None)


# Non-persistent schemas (configs, reports, verdicts)
class ExperimentConfig(SQLModel, table=False):
    kind: ExperimentKind
    beta: Optional[float] = Field(default=None, gt=0, description="Inverse temperature")
    a: Optional[float] = Field(default=None, description="Spectral parameter of the homogeneous diffusion")
    T: Optional[float] = Field(default=None, gt=0, description="Horizon; for mckean/poisson in units of m(a)")
    replicas: int = Field(default=1, ge=1)
    n: int = Field(default=3, ge=0, le=12, description="Depth of the exponential-quantile grid")
    epsilon: float = Field(default=1.0, gt=0, description="Spacing of the r-grid around a_L")
    dt: float = Field(default=1e-3, gt=0)
    tol: float = Field(default=1e-6, gt=0)
    seed: int = Field(default=0, ge=0)
    out: Optional[str] = Field(default=None, description="Report path (JSON); sidecars are written next to it")
    workers: int = Field(default=1, ge=1)
    k_max: int = Field(default=1, ge=1, le=10)
    N: int = Field(default=200, ge=1, description="Matrix size of the beta-ensemble")
    ensemble_samples: int = Field(default=10_000, ge=8)
    betas: List[float] = Field(default_factory=list, description="Beta sweep for trend experiments")
    cells: int = Field(default=8, ge=2)
    alpha: float = Field(default=0.01, gt=0, lt=1)
    theta: float = Field(default=1.0, gt=0)
    nu: float = Field(default=1.0, gt=0, le=1)
    b: float = Field(default=1.0, gt=0, le=10)
    n_paths: int = Field(default=10_000, ge=1)
    x_max: float = Field(default=3.0, gt=0)
    record: bool = Field(default=False, description="Record the run in the experiment registry")

    @model_validator(mode="after")
    def check_kind_requirements(self) -> "ExperimentConfig":
        match self.kind:
            case ExperimentKind.SPECTRUM | ExperimentKind.SHAPE:
                sweep = self.betas or ([self.beta] if self.beta is not None else [])
                if not sweep:
                    raise ValueError(f"{self.kind.value} requires beta or betas")
                if any(not 0 < beta <= BETA_MAX for beta in sweep):
                    raise ValueError(f"{self.kind.value} requires every beta in (0, {BETA_MAX}]")
            case ExperimentKind.EXPLOSIONS:
                if self.beta is None or self.beta > BETA_MAX:
                    raise ValueError(f"explosions requires beta in (0, {BETA_MAX}]")
            case ExperimentKind.MCKEAN | ExperimentKind.POISSON:
                if self.a is None or self.a <= 0:
                    raise ValueError(f"{self.kind.value} requires a > 0")
            case ExperimentKind.ENSEMBLE_EDGE:
                if self.beta is None:
                    raise ValueError("ensemble-edge requires beta")
            case ExperimentKind.OU_EXIT:
                pass
        return self


class ReplicaRecord(SQLModel, table=False):
    replica_id: int
    seed: int
    ok: bool = Field(default=True)
    error: Optional[str] = Field(default=None)
    values: Dict[str, float] = Field(default_factory=dict)
    arrays: Dict[str, List[float]] = Field(default_factory=dict)


class Verdict(SQLModel, table=False):
    name: str
    passed: bool
    gated: bool = Field(default=True, description="Monitored verdicts are reported but never fail a run")
    statistic: Optional[float] = Field(default=None)
    p_value: Optional[float] = Field(default=None)
    threshold: Optional[float] = Field(default=None)
    details: Dict[str, Any] = Field(default_factory=dict)


class ExperimentReport(SQLModel, table=False):
    schema_version: str = Field(default=SCHEMA_VERSION)
    config: ExperimentConfig
    replicas: List[ReplicaRecord] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    verdicts: List[Verdict] = Field(default_factory=list)
    wall_time: float = Field(default=0.0)
    versions: Dict[str, str] = Field(default_factory=dict)
    run_failed: bool = Field(default=False)

    @property
    def passed(self) -> bool:
        return not self.run_failed and all(v.passed for v in self.verdicts if v.gated)


# Numerical containers
@dataclass(frozen=True)
class ScalingParams:
    beta: float
    L: float
    a_L: float
    c_beta: float
    a_L_source: ALSource = ALSource.INVERSE

    def __post_init__(self):
        if not 0 < self.beta <= BETA_MAX:
            raise ScalingDomainError(f"beta={self.beta} outside (0, {BETA_MAX}]")
        if self.a_L <= 0 or self.L <= 0:
            raise ScalingDomainError(f"non-positive scale: L={self.L}, a_L={self.a_L}")


@dataclass(frozen=True)
class ConventionConversion:
    """Eigenvalue and time coordinate of the L-convention, with the factors used."""

    lam: float
    phi_time: float
    energy_factor: float
    time_factor: float
    amplitude_factor: float


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Seeded Brownian motion sampled on a (possibly locally refined) grid, B(t0) = 0."""

    t0: float
    t1: float
    dt: float
    origin: float
    seed: int
    sigma: float
    grid: np.ndarray
    values: np.ndarray
    refinement_level: int = 0
    refinements: Tuple[Tuple[float, float, float], ...] = ()

    @property
    def n_points(self) -> int:
        return len(self.grid)

    def covers(self, t_lo: float, t_hi: float) -> bool:
        slack = 1e-9 * max(1.0, abs(self.t0), abs(self.t1))
        return self.t0 - slack <= t_lo and t_hi <= self.t1 + slack


@dataclass(frozen=True)
class DriftSpec:
    a: float
    beta: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise RangeError(f"beta must be nonnegative, got {self.beta}")

    def coefficient(self, t: float) -> float:
        """a + beta t / 4 at original time t."""
        return self.a + self.beta * t / 4

    def well_bottom(self, t: float) -> float:
        """sqrt(a + beta t / 4), the stable point of the frozen drift at time t."""
        level = self.coefficient(t)
        if level < 0:
            raise RangeError(f"no potential well at t={t}: a + beta t/4 = {level}")
        return math.sqrt(level)


@dataclass(frozen=True, eq=False)
class RiccatiTrajectory:
    """Samples of Z (forward) or Z-hat (backward) in increasing time order.

    log_abs and signs describe the solution phi of the underlying linear
    equation whose Riccati log is Z, up to a constant factor.
    """

    direction: Direction
    a: float
    beta: float
    t_start: float
    x_start: float
    t_stop: float
    times: np.ndarray
    values: np.ndarray
    log_abs: np.ndarray
    signs: np.ndarray
    explosions: np.ndarray
    scheme: Scheme = Scheme.SPLITTING
    restart_gap: float = 0.0
    final_value: float = math.inf
    certificate: Optional[float] = None

    @property
    def span(self) -> Tuple[float, float]:
        return (min(self.t_start, self.t_stop), max(self.t_start, self.t_stop))


@dataclass(frozen=True)
class CrossingEvent:
    upsilon: float
    theta: float
    iota: float
    zeta: Optional[float] = None


@dataclass(frozen=True)
class CrossingResult:
    event: CrossingEvent
    tanh_distance: float


@dataclass(frozen=True, eq=False)
class Eigenfunction:
    times: np.ndarray
    values: np.ndarray
    center: float
    stitch_time: float
    zeros: np.ndarray
    forward: Optional[RiccatiTrajectory] = None
    backward: Optional[RiccatiTrajectory] = None


@dataclass(frozen=True, eq=False)
class ShapeProfile:
    x: np.ndarray
    h: np.ndarray
    b: np.ndarray
    h_distance: float
    b_distance: float


@dataclass(frozen=True, eq=False)
class MeasureHistogram:
    edges: np.ndarray
    density: np.ndarray


@dataclass(frozen=True, eq=False)
class SpectralResult:
    lambdas: np.ndarray
    eigenfunctions: List[Eigenfunction]
    centers: np.ndarray
    chis: List[RiccatiTrajectory]
    measures: List[MeasureHistogram] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class ExcursionSummary:
    starts: np.ndarray
    exploded: np.ndarray

    @property
    def explosion_fraction(self) -> float:
        if len(self.exploded) == 0:
            return math.nan
        return float(np.mean(self.exploded))


@dataclass(frozen=True, eq=False)
class TridiagonalMatrix:
    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        if len(self.offdiag) != max(len(self.diag) - 1, 0):
            raise RangeError(f"offdiag length {len(self.offdiag)} does not match diag length {len(self.diag)}")

    @property
    def n(self) -> int:
        return len(self.diag)

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)


@dataclass(frozen=True, eq=False)
class TridiagonalOperator(TridiagonalMatrix):
    """Finite-difference Dirichlet discretization on interior nodes ``times``."""

    dx: float
    T: float
    beta: float
    times: np.ndarray


@dataclass(frozen=True, eq=False)
class EnsembleSample:
    N: int
    beta: float
    mu: np.ndarray
    edge_rescaled: np.ndarray


@dataclass(frozen=True, eq=False)
class PointProcessSample:
    points: np.ndarray
    replica_id: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if np.any(points < 0) or np.any(np.diff(points) < 0):
            raise RangeError("point process sample must be sorted and nonnegative")
        object.__setattr__(self, "points", points)


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    n: int
    knots: np.ndarray

    @property
    def cells(self) -> int:
        return 2**self.n


@dataclass(frozen=True)
class OUExitSpec:
    theta: float
    nu: float
    b: float

    def __post_init__(self):
        if self.theta <= 0 or self.b < 0 or not 0 < self.nu <= 1:
            raise RangeError(f"invalid OU exit spec theta={self.theta}, nu={self.nu}, b={self.b}")

    @property
    def barrier(self) -> float:
        return self.b / math.sqrt(2 * self.theta)


@dataclass(frozen=True)
class OUExitEstimate:
    mean: float
    stderr: float
    n_paths: int
    n_unfinished: int


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
