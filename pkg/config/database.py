"""
Database configuration and session management for the run ledger.

Nothing connects at import time; callers ask for a session factory for a URL
(the configured PCDS_DATABASE_URL by default).
"""
import os
from functools import lru_cache
from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker
from sqlalchemy.pool import StaticPool

from config.settings import get_settings


# Base class for ORM models
class Base(DeclarativeBase):
    pass


def make_engine(url: str) -> Engine:
    """SQLite engines share one connection so worker threads see the same ledger."""
    if url.startswith("sqlite"):
        path = url.split("sqlite:///", 1)[-1] if url.startswith("sqlite:///") else ""
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        return create_engine(
            url,
            connect_args={"check_same_thread": False},
            poolclass=StaticPool,
            echo=False,
        )
    return create_engine(url, echo=False)


def make_session_factory(url: str) -> sessionmaker:
    """Fresh engine for url with the ledger tables created."""
    from src.models.database import ArtifactDB, MilestoneDB, RunDB  # noqa: F401  registers the tables
    engine = make_engine(url)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@lru_cache(maxsize=None)
def get_session_factory(url: Optional[str] = None) -> sessionmaker:
    """Process-wide session factory per URL; None means the configured ledger."""
    return make_session_factory(url or get_settings().database_url)
