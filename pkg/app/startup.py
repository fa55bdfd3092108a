from app.database import create_tables
import app.run_browser


def startup() -> None:
    """Initialize the run browser."""
    create_tables()
    app.run_browser.create()
