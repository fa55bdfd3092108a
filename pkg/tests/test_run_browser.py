"""Tests for the row formatting of the run browser."""

from datetime import datetime

from app.models import ExperimentKind, ExperimentRun, RunStatus
from app.run_browser import format_run_rows, format_summary_rows, format_verdict_rows, outcome_label


def _run(**overrides) -> ExperimentRun:
    fields = dict(
        id=4,
        kind=ExperimentKind.MCKEAN,
        seed=9,
        replicas=500,
        status=RunStatus.COMPLETED,
        passed=True,
        wall_time=12.34,
        created_at=datetime(2026, 3, 1, 14, 5),
    )
    fields.update(overrides)
    return ExperimentRun(**fields)


class TestRunRows:
    """Registry rows as table rows."""

    def test_completed_run(self):
        """All columns are filled for a finished run."""
        (row,) = format_run_rows([_run()])
        assert row == {
            "id": 4,
            "kind": "mckean",
            "seed": 9,
            "replicas": 500,
            "status": "✅ completed",
            "outcome": "PASS",
            "wall_time": "12.3s",
            "date": "01/03/2026 14:05",
        }

    def test_running_run(self):
        """A running entry has no outcome or wall time yet."""
        (row,) = format_run_rows([_run(status=RunStatus.RUNNING, passed=None, wall_time=None)])
        assert row["status"] == "⏳ running"
        assert row["outcome"] == "-"
        assert row["wall_time"] == ""

    def test_outcome_label(self):
        """Failed runs read FAIL."""
        assert outcome_label(_run(passed=False)) == "FAIL"

    def test_order_is_kept(self):
        """Rows follow the given order."""
        rows = format_run_rows([_run(id=2), _run(id=1)])
        assert [row["id"] for row in rows] == [2, 1]


class TestVerdictRows:
    """Stored verdicts as table rows."""

    def test_statuses(self):
        """Gated verdicts read PASS or FAIL and monitored ones read monitor."""
        run = _run(
            verdicts=[
                {"name": "mckean-exponential", "passed": True, "gated": True, "statistic": 0.0312, "p_value": 0.41},
                {"name": "mckean-mean", "passed": False, "statistic": 17.2},
                {"name": "explosion-fraction", "passed": False, "gated": False},
            ]
        )
        rows = format_verdict_rows(run)
        assert [row["status"] for row in rows] == ["PASS", "FAIL", "monitor"]
        assert rows[0]["statistic"] == "0.0312"
        assert rows[0]["p_value"] == "0.41"
        assert rows[1]["p_value"] == ""
        assert rows[2]["statistic"] == ""

    def test_no_verdicts(self):
        """A run without verdicts has no rows."""
        assert format_verdict_rows(_run()) == []


class TestSummaryRows:
    """Stored summary entries as table rows."""

    def test_sorted_and_formatted(self):
        """Entries are sorted by key and floats shortened."""
        rows = format_summary_rows(_run(summary={"n": 500, "D": 0.0312345678, "m(a)": 17.25}))
        assert rows == [
            {"key": "D", "value": "0.0312346"},
            {"key": "m(a)", "value": "17.25"},
            {"key": "n", "value": "500"},
        ]

