"""Run browser: registry rows with their verdicts."""

from typing import Any, Dict, List

from nicegui import ui

from app.models import ExperimentRun, RunStatus
from app.services import RunService

STATUS_LABELS = {
    RunStatus.RUNNING: "⏳ running",
    RunStatus.COMPLETED: "✅ completed",
    RunStatus.FAILED: "❌ failed",
}


def outcome_label(run: ExperimentRun) -> str:
    if run.passed is None:
        return "-"
    return "PASS" if run.passed else "FAIL"


def format_run_rows(runs: List[ExperimentRun]) -> List[Dict[str, Any]]:
    """Table rows for registry entries, newest first as given."""
    return [
        {
            "id": run.id,
            "kind": run.kind.value,
            "seed": run.seed,
            "replicas": run.replicas,
            "status": STATUS_LABELS.get(run.status, "unknown"),
            "outcome": outcome_label(run),
            "wall_time": f"{run.wall_time:.1f}s" if run.wall_time is not None else "",
            "date": run.created_at.strftime("%d/%m/%Y %H:%M"),
        }
        for run in runs
    ]


def format_verdict_rows(run: ExperimentRun) -> List[Dict[str, Any]]:
    rows = []
    for verdict in run.verdicts:
        statistic = verdict.get("statistic")
        p_value = verdict.get("p_value")
        rows.append(
            {
                "name": verdict["name"],
                "statistic": f"{statistic:.4g}" if statistic is not None else "",
                "p_value": f"{p_value:.3g}" if p_value is not None else "",
                "status": "monitor" if not verdict.get("gated", True) else ("PASS" if verdict["passed"] else "FAIL"),
            }
        )
    return rows


def format_summary_rows(run: ExperimentRun) -> List[Dict[str, Any]]:
    return [
        {"key": key, "value": f"{value:.6g}" if isinstance(value, float) else str(value)}
        for key, value in sorted(run.summary.items())
    ]


def create():
    """Create run browser pages."""

    @ui.page("/")
    async def index():
        await ui.context.client.connected()
        ui.colors(primary="#2563eb", secondary="#64748b", positive="#10b981", negative="#ef4444")

        with ui.column().classes("w-full max-w-4xl mx-auto p-6 gap-6"):
            ui.label("Stochastic Airy operator experiments").classes("text-3xl font-bold text-gray-800")
            ui.label("Runs recorded with --record are listed in the registry.").classes("text-gray-600")
            ui.button("Browse runs", on_click=lambda: ui.navigate.to("/runs")).classes(
                "bg-primary text-white px-6 py-3"
            )

    @ui.page("/runs")
    async def runs_page():
        await ui.context.client.connected()

        with ui.column().classes("w-full max-w-6xl mx-auto p-6 gap-6"):
            with ui.row().classes("w-full justify-between items-center"):
                ui.label("Experiment runs").classes("text-3xl font-bold text-gray-800")
                ui.button("← Back", on_click=lambda: ui.navigate.to("/")).props("outline")

            runs = RunService.list_runs()
            if not runs:
                with ui.card().classes("p-8 text-center"):
                    ui.label("No runs recorded yet").classes("text-2xl text-gray-500")
                return

            columns = [
                {"name": "id", "label": "Run", "field": "id", "align": "left"},
                {"name": "kind", "label": "Kind", "field": "kind", "align": "left"},
                {"name": "seed", "label": "Seed", "field": "seed", "align": "right"},
                {"name": "replicas", "label": "Replicas", "field": "replicas", "align": "right"},
                {"name": "status", "label": "Status", "field": "status", "align": "center"},
                {"name": "outcome", "label": "Outcome", "field": "outcome", "align": "center"},
                {"name": "wall_time", "label": "Wall time", "field": "wall_time", "align": "right"},
                {"name": "date", "label": "Started", "field": "date", "align": "center"},
            ]
            table = ui.table(columns=columns, rows=format_run_rows(runs), row_key="id").classes("w-full")
            table.props("flat bordered")

            def handle_row_click(e):
                show_run_details(e.args[1]["id"])

            table.on("rowClick", handle_row_click)

    def show_run_details(run_id: int):
        run = RunService.get_run(run_id)
        if run is None:
            ui.notify(f"Run {run_id} not found", type="negative")
            return

        with ui.dialog() as dialog, ui.card().classes("p-6 min-w-[600px]"):
            ui.label(f"Run {run.id}: {run.kind.value}").classes("text-xl font-bold")
            if run.error_message:
                ui.label(run.error_message).classes("text-negative")
            ui.label("Configuration").classes("font-semibold mt-2")
            ui.json_editor({"content": {"json": run.config}}).props("read-only")
            ui.label("Verdicts").classes("font-semibold mt-2")
            columns = [
                {"name": "name", "label": "Verdict", "field": "name", "align": "left"},
                {"name": "statistic", "label": "Statistic", "field": "statistic", "align": "right"},
                {"name": "p_value", "label": "p", "field": "p_value", "align": "right"},
                {"name": "status", "label": "Status", "field": "status", "align": "center"},
            ]
            ui.table(columns=columns, rows=format_verdict_rows(run)).classes("w-full").props("flat dense")
            if run.summary:
                ui.label("Summary").classes("font-semibold mt-2")
                summary_columns = [
                    {"name": "key", "label": "Entry", "field": "key", "align": "left"},
                    {"name": "value", "label": "Value", "field": "value", "align": "right"},
                ]
                ui.table(columns=summary_columns, rows=format_summary_rows(run)).classes("w-full").props("flat dense")
            ui.button("Close", on_click=dialog.close).classes("mt-4")
        dialog.open()
