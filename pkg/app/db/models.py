from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from .database import Base


class RunRecord(Base):
    """
    One CLI invocation: the command, its seed and config snapshot, where the
    outputs went and how it ended.
    """
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True, nullable=False)
    seed = Column(Integer)
    version = Column(String)
    config_json = Column(Text)
    out_dir = Column(String)
    outputs_json = Column(Text)
    exit_code = Column(Integer, default=0)
    created_at = Column(DateTime)

    coverage = relationship("CoverageRecord", back_populates="run", cascade="all, delete-orphan")


class CoverageRecord(Base):
    """One (scenario, method) row of a coverage study."""
    __tablename__ = "coverage"

    id = Column(Integer, primary_key=True, index=True)
    scenario = Column(String, index=True)
    method = Column(String, index=True)
    reps = Column(Integer)
    coverage = Column(Float)
    mean_width = Column(Float)
    run_id = Column(Integer, ForeignKey("runs.id"))

    run = relationship("RunRecord", back_populates="coverage")
