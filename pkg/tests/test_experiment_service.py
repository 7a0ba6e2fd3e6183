import json

import numpy as np
import pytest

from app.core.config import settings
from app.core.errors import ConfigError
from app.core.panel import EbFit, Tau2Method
from app.services.dgp import MetaConfig, SimConfig
from app.services.experiment_service import (
    ConformalOptions,
    CoverageOptions,
    ExperimentService,
    SingleRunOptions,
    histogram_table,
    record_run,
)
from app.services.inference import IntervalMethod


@pytest.fixture
def service():
    return ExperimentService(threads=1)


class TestSingleRun:
    def test_all_three_intervals(self, service, small_sim):
        result = service.single_run(small_sim, SingleRunOptions(B=50))
        assert result.panel.labels[0] == "rct"
        assert result.sandwich.method is IntervalMethod.SANDWICH_WALD
        assert result.subsampling.method is IntervalMethod.SUBSAMPLING
        assert result.rct_only.method is IntervalMethod.RCT_ONLY
        assert result.ratio > 0
        summary = result.summary()
        assert set(summary["intervals"]) == {"sandwich", "subsampling", "rct_only"}
        assert summary["J"] == result.panel.J
        json.dumps(summary)

    def test_pipeline_returns_a_fit(self, service, iv_data):
        fit = service.iv_pipeline(Tau2Method.PAIRWISE)(iv_data)
        assert isinstance(fit, EbFit)


class TestConformalRun:
    def test_reports_every_mode(self, service):
        result = service.conformal(MetaConfig(J=40, seed=3), ConformalOptions())
        summary = result.summary()
        assert set(summary["intervals"]) == {"signed", "two_sided_abs", "train_centered"}
        assert set(summary["covered"]) == set(summary["intervals"])
        assert summary["fit"]["split_seed"] == 3
        assert summary["dkw_band"] > 0

    def test_split_seed_override(self, service):
        result = service.conformal(MetaConfig(J=40, seed=3), ConformalOptions(split_seed=9))
        assert result.fit.plan.seed == 9


class TestCoverage:
    def test_constant_pipeline_always_covers(self, service):
        table = service.coverage(CoverageOptions(scenario="constant", reps=100), SimConfig(), MetaConfig(), seed=0)
        row = table.iloc[0]
        assert row["method"] == "subsampling"
        assert row["coverage"] == 1.0
        assert row["coverage_se"] == 0.0

    def test_needs_enough_reps(self, service):
        with pytest.raises(ConfigError):
            service.coverage(CoverageOptions(scenario="constant", reps=99), SimConfig(), MetaConfig(), seed=0)

    def test_iv_table(self, service):
        sim = SimConfig(q=3, n_rct=50, n_obs=500)
        table = service.coverage(CoverageOptions(scenario="iv_exact", reps=100), sim, MetaConfig(), seed=1)
        assert set(table["method"]) == {"rct_only", "sandwich"}
        assert table["coverage"].between(0, 1).all()
        assert (table["nominal"] == pytest.approx(0.9)).all()

    def test_threads_do_not_change_the_table(self):
        options = CoverageOptions(scenario="meta_positive", reps=100)
        meta = MetaConfig(J=40)
        serial = ExperimentService(threads=1).coverage(options, SimConfig(), meta, seed=2)
        threaded = ExperimentService(threads=3).coverage(options, SimConfig(), meta, seed=2)
        assert serial.equals(threaded)
        assert len(serial) == 3


class TestHistogram:
    def test_counts(self):
        table = histogram_table(np.arange(100.0), bins=10)
        assert table["count"].tolist() == [10] * 10
        assert table["bin_lo"].iloc[0] == 0.0
        assert table["bin_hi"].iloc[-1] == 99.0

    def test_drops_non_finite(self):
        table = histogram_table([0.0, 1.0, np.nan, np.inf], bins=2)
        assert table["count"].sum() == 2

    def test_trim(self):
        values = np.concatenate([np.arange(96.0), [1e6, 2e6, -1e6, -2e6]])
        table = histogram_table(values, bins=4, trim=0.05)
        assert table["count"].sum() < 100
        assert table["bin_lo"].iloc[0] >= 0.0
        assert table["bin_hi"].iloc[-1] <= 95.0


class TestRecordRun:
    def test_stores_coverage_rows(self, service):
        from app.db.database import SessionLocal
        from app.db.models import CoverageRecord

        table = service.coverage(CoverageOptions(scenario="constant", reps=100), SimConfig(), MetaConfig(), seed=0)
        run_id = record_run("coverage", 0, {"run": {"reps": 100}}, "out/coverage", [], 0, coverage=table)
        assert run_id is not None
        db = SessionLocal()
        try:
            rows = db.query(CoverageRecord).filter(CoverageRecord.run_id == run_id).all()
        finally:
            db.close()
        assert [(r.method, r.coverage) for r in rows] == [("subsampling", 1.0)]

    def test_recording_can_be_switched_off(self, monkeypatch):
        monkeypatch.setattr(settings, "RECORD_RUNS", False)
        assert record_run("conformal", 0, {}, "out", [], 0) is None
