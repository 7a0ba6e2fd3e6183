"""
Creates the run-ledger tables in the database named by DATABASE_URL.

Run with `python -m scripts.database_setup` from the project root. The CLI
also creates the tables on demand, so this is only needed to prepare a shared
database ahead of time.
"""
import logging
import os
import sys

# Add the project root to the Python path to allow for absolute imports
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.core.config import settings
from app.core.logging import configure_logging
from app.db.database import SessionLocal, init_db
from app.db.models import RunRecord

logger = logging.getLogger(__name__)


def setup_database() -> int:
    """Creates the tables and returns the number of runs already recorded."""
    logger.info("Setting up run ledger at %s", settings.DATABASE_URL)
    init_db()
    db = SessionLocal()
    try:
        count = db.query(RunRecord).count()
        logger.info("Run ledger ready; %d runs recorded so far.", count)
        return count
    finally:
        db.close()


if __name__ == "__main__":
    configure_logging()
    setup_database()
