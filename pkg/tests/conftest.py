import os

# the registry must point at an in-memory database before app.database is imported
os.environ["APP_DATABASE_URL"] = "sqlite://"

import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from app.database import reset_db  # noqa: E402

settings.register_profile("default", max_examples=30, deadline=None)
settings.register_profile("ci", max_examples=100, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture()
def new_db():
    """Reset database for each test."""
    reset_db()
    yield
    reset_db()
