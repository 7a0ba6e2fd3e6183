from app.services.experiment_service import record_run
from scripts.database_setup import setup_database


def test_setup_counts_recorded_runs():
    before = setup_database()
    assert before >= 0
    assert record_run("gen-data", 1, {"design": "iv"}, "out/gen-data", [], 0) is not None
    assert setup_database() == before + 1
