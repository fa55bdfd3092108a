"""Experiment registry: finished runs recorded in the experiment_runs table."""

import math
from datetime import datetime
from typing import List, Optional

from sqlmodel import desc, select

from app.database import get_session
from app.errors import RangeError
from app.models import ExperimentConfig, ExperimentReport, ExperimentRun, RunStatus


class RunService:
    """Service for managing experiment runs."""

    @staticmethod
    def create_run(config: ExperimentConfig) -> ExperimentRun:
        """Create a new running entry for a configuration."""
        with get_session() as session:
            run = ExperimentRun(
                kind=config.kind,
                seed=config.seed,
                replicas=config.replicas,
                config=config.model_dump(mode="json"),
            )
            session.add(run)
            session.commit()
            session.refresh(run)
            return run

    @staticmethod
    def get_run(run_id: int) -> Optional[ExperimentRun]:
        """Get run by ID."""
        with get_session() as session:
            return session.get(ExperimentRun, run_id)

    @staticmethod
    def list_runs(limit: int = 50) -> List[ExperimentRun]:
        """Most recent runs first."""
        with get_session() as session:
            statement = select(ExperimentRun).order_by(desc(ExperimentRun.created_at)).limit(limit)
            return list(session.exec(statement).all())

    @staticmethod
    def complete_run(run_id: int, report: ExperimentReport, report_path: Optional[str] = None) -> ExperimentRun:
        """Store the verdicts and outcome of a finished run."""
        with get_session() as session:
            run = session.get(ExperimentRun, run_id)
            if run is None:
                raise RangeError(f"Run {run_id} not found")
            run.status = RunStatus.FAILED if report.run_failed else RunStatus.COMPLETED
            run.passed = report.passed
            run.verdicts = [verdict.model_dump(mode="json") for verdict in report.verdicts]
            run.summary = {
                key: value
                for key, value in report.summary.items()
                if isinstance(value, (bool, int, float)) and math.isfinite(value)
            }
            run.wall_time = report.wall_time
            run.report_path = report_path
            run.completed_at = datetime.utcnow()
            session.add(run)
            session.commit()
            session.refresh(run)
            return run

    @staticmethod
    def fail_run(run_id: int, message: str) -> ExperimentRun:
        """Mark a run as failed with an error message."""
        with get_session() as session:
            run = session.get(ExperimentRun, run_id)
            if run is None:
                raise RangeError(f"Run {run_id} not found")
            run.status = RunStatus.FAILED
            run.passed = False
            run.error_message = message[:1000]
            run.completed_at = datetime.utcnow()
            session.add(run)
            session.commit()
            session.refresh(run)
            return run
