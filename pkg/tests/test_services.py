"""Tests for the experiment registry."""

from datetime import datetime

import pytest

from app.errors import RangeError
from app.models import ExperimentConfig, ExperimentKind, ExperimentReport, RunStatus, Verdict
from app.services import RunService


@pytest.fixture()
def sample_config():
    """Small OU exit configuration."""
    return ExperimentConfig(kind=ExperimentKind.OU_EXIT, replicas=3, seed=11, n_paths=100)


@pytest.fixture()
def sample_report(sample_config):
    """Finished report with one gated and one monitored verdict."""
    return ExperimentReport(
        config=sample_config,
        verdicts=[
            Verdict(name="ou-mc", passed=True, statistic=0.6, threshold=0.01),
            Verdict(name="ou-bound", passed=False, gated=False, statistic=0.6, threshold=0.5),
        ],
        summary={"n": 3, "mc": 0.61, "series": float("nan"), "ecdf": {"x": [0.1]}},
        wall_time=1.5,
    )


class TestRunService:
    """Test RunService functionality."""

    def test_create_run(self, new_db, sample_config):
        """A new run is running with its configuration stored."""
        run = RunService.create_run(sample_config)

        assert run.id is not None
        assert run.kind == ExperimentKind.OU_EXIT
        assert run.seed == 11
        assert run.replicas == 3
        assert run.status == RunStatus.RUNNING
        assert run.passed is None
        assert run.config["kind"] == "ou-exit"
        assert run.config["n_paths"] == 100
        assert isinstance(run.created_at, datetime)

    def test_get_run(self, new_db, sample_config):
        """Test getting run by ID."""
        created = RunService.create_run(sample_config)
        assert created.id is not None

        retrieved = RunService.get_run(created.id)

        assert retrieved is not None
        assert retrieved.id == created.id
        assert retrieved.kind == created.kind

    def test_get_nonexistent_run(self, new_db):
        """Test getting a run that does not exist."""
        assert RunService.get_run(999) is None

    def test_list_runs(self, new_db, sample_config):
        """Runs are listed newest first and the limit is honored."""
        ids = [RunService.create_run(sample_config.model_copy(update={"seed": seed})).id for seed in range(3)]

        runs = RunService.list_runs()
        assert len(runs) == 3
        assert {run.id for run in runs} == set(ids)
        assert runs[0].created_at >= runs[-1].created_at
        assert len(RunService.list_runs(limit=2)) == 2

    def test_list_runs_empty(self, new_db):
        """Test listing runs from an empty registry."""
        assert RunService.list_runs() == []

    def test_complete_run(self, new_db, sample_config, sample_report):
        """Completion stores outcome, verdicts and wall time."""
        run = RunService.create_run(sample_config)
        assert run.id is not None

        completed = RunService.complete_run(run.id, sample_report, "runs/ou.json")

        assert completed.status == RunStatus.COMPLETED
        assert completed.passed is True
        assert completed.report_path == "runs/ou.json"
        assert completed.wall_time == 1.5
        assert completed.completed_at is not None
        assert [v["name"] for v in completed.verdicts] == ["ou-mc", "ou-bound"]
        assert completed.verdicts[1]["gated"] is False
        assert completed.summary == {"n": 3, "mc": 0.61}

    def test_complete_failed_run(self, new_db, sample_config, sample_report):
        """A report with too many failed replicas marks the run failed."""
        run = RunService.create_run(sample_config)
        assert run.id is not None

        completed = RunService.complete_run(run.id, sample_report.model_copy(update={"run_failed": True}))

        assert completed.status == RunStatus.FAILED
        assert completed.passed is False

    def test_complete_nonexistent_run(self, new_db, sample_report):
        """Completing an unknown run raises."""
        with pytest.raises(RangeError):
            RunService.complete_run(999, sample_report)

    def test_fail_run(self, new_db, sample_config):
        """Failure stores the message."""
        run = RunService.create_run(sample_config)
        assert run.id is not None

        failed = RunService.fail_run(run.id, "worker pool crashed")

        assert failed.status == RunStatus.FAILED
        assert failed.passed is False
        assert failed.error_message == "worker pool crashed"
        assert failed.completed_at is not None

    def test_fail_nonexistent_run(self, new_db):
        """Failing an unknown run raises."""
        with pytest.raises(RangeError):
            RunService.fail_run(999, "gone")
