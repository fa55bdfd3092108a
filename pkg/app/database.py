import os
from sqlmodel import SQLModel, create_engine, Session
from sqlalchemy.pool import StaticPool

# Import all models to ensure they're registered.
from app.models import ExperimentRun  # noqa: F401

DATABASE_URL = os.environ.get("APP_DATABASE_URL", "sqlite:///sao_runs.db")


def _engine_options(url: str) -> dict:
    if url.startswith("postgresql"):
        return {"connect_args": {"connect_timeout": 15, "options": "-c statement_timeout=1000"}}
    if url.startswith("sqlite"):
        options: dict = {"connect_args": {"check_same_thread": False}}
        if url in ("sqlite://", "sqlite:///:memory:"):
            options["poolclass"] = StaticPool
        return options
    return {}


ENGINE = create_engine(DATABASE_URL, **_engine_options(DATABASE_URL))


def create_tables():
    SQLModel.metadata.create_all(ENGINE)


def get_session():
    return Session(ENGINE)


def reset_db():
    """Wipe all tables in the database. Use with caution - for testing only!"""
    SQLModel.metadata.drop_all(ENGINE)
    SQLModel.metadata.create_all(ENGINE)
