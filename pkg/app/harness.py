"""Experiment harness: seeded replicas in a process pool, verdicts, JSON/CSV reports and the self-test."""

import csv
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from itertools import repeat
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import scipy
from sqlalchemy.exc import SQLAlchemyError

from app.errors import SAOError
from app.experiments import run_replica, summarize
from app.models import DriftSpec, ExperimentConfig, ExperimentKind, ExperimentReport, OUExitSpec, Verdict
from app.paths import PathService
from app.riccati import RiccatiService
from app.services import RunService
from app.spectrum import SpectrumService
from app.stats import OUExitService

logger = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.01
PACKAGE_NAME = "sao-toolkit"
TABLE_HEADER = ("item", "value", "status")
FIXED_COLUMNS = ["replica_id", "seed", "ok", "error"]
ARRAY_SUFFIX = "[]"
SELFTEST_RTOL = 1e-4


def _finite(value: Any) -> Any:
    """Plain JSON data with non-finite floats replaced by None."""
    match value:
        case dict():
            return {key: _finite(item) for key, item in value.items()}
        case list() | tuple():
            return [_finite(item) for item in value]
        case np.ndarray():
            return _finite(value.tolist())
        case np.generic():
            return _finite(value.item())
        case float() if not math.isfinite(value):
            return None
        case _:
            return value


def _format(value: Any) -> str:
    match value:
        case bool():
            return str(value)
        case int() | float() | np.floating():
            return f"{value:.6g}"
        case None:
            return "-"
        case _:
            return str(value)


def _sidecar(path: Path, name: str) -> Path:
    return path.with_name(f"{path.stem}_{name}.csv")


class HarnessService:
    """Service for running experiments and reading and writing their reports."""

    @staticmethod
    def replica_seed(seed: int, replica_id: int) -> int:
        """Independent 64-bit seed of one replica, a pure function of (seed, replica_id)."""
        return int(np.random.SeedSequence([seed, replica_id]).generate_state(1, np.uint64)[0])

    @staticmethod
    def versions() -> Dict[str, str]:
        try:
            package = version(PACKAGE_NAME)
        except PackageNotFoundError:
            logger.debug(f"{PACKAGE_NAME} is not installed; reporting its version as unknown")
            package = "unknown"
        return {
            PACKAGE_NAME: package,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        }

    @staticmethod
    def run(config: ExperimentConfig) -> ExperimentReport:
        """Run all replicas of the configured experiment and evaluate the verdicts.

        Replica records come back sorted by replica id, so the report does not
        depend on the number of workers.
        """
        start = time.perf_counter()
        run_id = None
        if config.record:
            try:
                run_id = RunService.create_run(config).id
            except SQLAlchemyError as e:
                logger.warning(f"could not record run in the registry: {e}")

        payload = config.model_dump(mode="json")
        ids = range(config.replicas)
        seeds = [HarnessService.replica_seed(config.seed, i) for i in ids]
        logger.info(f"{config.kind.value}: {config.replicas} replicas on {config.workers} worker(s)")
        if config.workers == 1:
            records = [run_replica(payload, i, s) for i, s in zip(ids, seeds)]
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                records = list(pool.map(run_replica, repeat(payload), ids, seeds))
        records.sort(key=lambda r: r.replica_id)

        failures = sum(1 for r in records if not r.ok)
        run_failed = failures > MAX_FAILURE_FRACTION * config.replicas
        if run_failed:
            logger.error(f"{failures} of {config.replicas} replicas failed")
        evaluation_error = None
        try:
            summary, verdicts = summarize(config, records)
        except SAOError as e:
            logger.error(f"could not evaluate {config.kind.value}: {e}")
            evaluation_error = f"{type(e).__name__}: {e}"
            summary, verdicts, run_failed = {"error": str(e)}, [], True
        summary["failures"] = failures

        report = ExperimentReport(
            config=config,
            replicas=records,
            summary=summary,
            verdicts=verdicts,
            wall_time=time.perf_counter() - start,
            versions=HarnessService.versions(),
            run_failed=run_failed,
        )
        for verdict in verdicts:
            status = "monitor" if not verdict.gated else ("PASS" if verdict.passed else "FAIL")
            logger.info(f"{verdict.name}: {status} (statistic={verdict.statistic}, p={verdict.p_value})")

        report_path = HarnessService.persist(report, config.out) if config.out else None
        if run_id is not None:
            try:
                if evaluation_error is not None:
                    RunService.fail_run(run_id, evaluation_error)
                else:
                    RunService.complete_run(run_id, report, str(report_path) if report_path else None)
            except (SQLAlchemyError, SAOError) as e:
                logger.warning(f"could not complete run {run_id} in the registry: {e}")
        return report

    @staticmethod
    def persist(report: ExperimentReport, path: Union[str, Path]) -> Path:
        """Write the JSON report with a per-replica CSV sidecar and, when present, the ECDF sidecar.

        Replica arrays live only in the CSV, space-separated in columns named key[].
        Non-finite floats are written as null; replica values read back as nan.
        """
        path = Path(path)
        document = _finite(report.model_dump())
        for record in document["replicas"]:
            record.pop("arrays")
        scalar_keys = sorted({key for r in report.replicas for key in r.values})
        array_keys = sorted({key for r in report.replicas for key in r.arrays})
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(document, indent=2, sort_keys=True, allow_nan=False))
            with _sidecar(path, "replicas").open("w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(FIXED_COLUMNS + scalar_keys + [key + ARRAY_SUFFIX for key in array_keys])
                for r in report.replicas:
                    writer.writerow(
                        [r.replica_id, r.seed, r.ok, r.error or ""]
                        + [repr(float(r.values[key])) if key in r.values else "" for key in scalar_keys]
                        + [" ".join(repr(float(x)) for x in r.arrays.get(key, [])) for key in array_keys]
                    )
            ecdf = report.summary.get("ecdf")
            if ecdf:
                with _sidecar(path, "ecdf").open("w", newline="") as handle:
                    writer = csv.writer(handle)
                    writer.writerow(["x", "ecdf", "reference"])
                    writer.writerows(zip(ecdf["x"], ecdf["ecdf"], ecdf["reference"]))
        except OSError as e:
            logger.error(f"could not write report to {path}: {e}")
            raise OSError(f"could not write report to {path}: {e}") from e
        logger.info(f"report written to {path}")
        return path

    @staticmethod
    def load(path: Union[str, Path]) -> ExperimentReport:
        """Read a report written by persist, restoring replica arrays from the CSV sidecar."""
        path = Path(path)
        document = json.loads(path.read_text())
        for record in document["replicas"]:
            record["values"] = {key: math.nan if v is None else v for key, v in record["values"].items()}
        sidecar = _sidecar(path, "replicas")
        if sidecar.exists():
            with sidecar.open(newline="") as handle:
                rows = {int(row["replica_id"]): row for row in csv.DictReader(handle)}
            for record in document["replicas"]:
                row = rows.get(record["replica_id"])
                if row is None or not record["ok"]:
                    continue
                record["arrays"] = {
                    column[: -len(ARRAY_SUFFIX)]: [float(x) for x in row[column].split()]
                    for column in row
                    if column.endswith(ARRAY_SUFFIX)
                }
        return ExperimentReport.model_validate(document)

    @staticmethod
    def render_table(rows: Sequence[Tuple[str, str, str]]) -> str:
        """Fixed-width table with the item / value / status header and a rule line."""
        widths = [max([len(TABLE_HEADER[i])] + [len(row[i]) for row in rows]) for i in range(3)]
        lines = [TABLE_HEADER, *rows]
        rendered = ["  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in lines]
        rendered.insert(1, "  ".join("-" * width for width in widths))
        return "\n".join(rendered)

    @staticmethod
    def report_summary(report: ExperimentReport) -> str:
        """Text table of verdicts and scalar summary entries."""
        rows: List[Tuple[str, str, str]] = []
        for verdict in report.verdicts:
            status = "monitor" if not verdict.gated else ("PASS" if verdict.passed else "FAIL")
            value = _format(verdict.statistic)
            if verdict.p_value is not None:
                value += f" (p={verdict.p_value:.3g})"
            rows.append((verdict.name, value, status))
            if verdict.name == "poisson":
                for j, index in enumerate(verdict.details.get("dispersion_indices", [])):
                    rows.append((f"dispersion[{j}]", _format(index), ""))
        for key, value in sorted(report.summary.items()):
            if isinstance(value, (bool, int, float)):
                rows.append((key, _format(value), ""))
        return HarnessService.render_table(rows)

    @staticmethod
    def selftest() -> List[Verdict]:
        """Deterministic checks against closed forms, and worker-count independence."""
        verdicts = []

        # Z' = -1 - Z^2 from +inf at 0 is cot t
        path = PathService.zero(0.0, 1.0, 1e-3)
        traj = RiccatiService.integrate_forward(path, DriftSpec(a=-1.0), 0.0, math.inf, 0.5)
        error = abs(traj.values[-1] / (1.0 / math.tan(0.5)) - 1.0)
        verdicts.append(Verdict(name="cot-oracle", passed=error <= SELFTEST_RTOL, statistic=error))

        lam = SpectrumService.eigenvalue_bisect(path, 0.0, 1.0, 1, 1e-8)
        error = abs(lam / math.pi**2 - 1.0)
        verdicts.append(Verdict(name="sine-spectrum", passed=error <= SELFTEST_RTOL, statistic=error))

        spec = OUExitSpec(theta=1.0, nu=1.0, b=1.0)
        expected = math.exp(-0.5)
        errors = [
            abs(OUExitService.ou_exit_laplace(spec) - expected),
            abs(OUExitService.ou_exit_closed_form(spec) - expected),
        ]
        verdicts.append(Verdict(name="ou-exit-forms", passed=max(errors) <= 1e-10, statistic=max(errors)))

        config = ExperimentConfig(kind=ExperimentKind.MCKEAN, a=0.5, T=20.0, replicas=4, dt=1e-2, seed=7)
        serial = HarnessService.run(config)
        parallel = HarnessService.run(config.model_copy(update={"workers": 2}))
        same = [r.model_dump() for r in serial.replicas] == [r.model_dump() for r in parallel.replicas]
        verdicts.append(Verdict(name="worker-determinism", passed=same))

        for verdict in verdicts:
            logger.info(f"selftest {verdict.name}: {'PASS' if verdict.passed else 'FAIL'}")
        return verdicts
