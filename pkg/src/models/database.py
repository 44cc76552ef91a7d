"""
SQLAlchemy ORM models for the run ledger.
Maps to the runs, milestones and artifacts tables.
"""
from sqlalchemy import Column, Integer, String, Float, DateTime, ForeignKey, Enum as SQLEnum
from sqlalchemy.orm import relationship
from datetime import datetime
from config.database import Base
import enum

class RunStatusEnum(enum.Enum):
    """Run status enumeration."""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"

class ArtifactTypeEnum(enum.Enum):
    """Artifact type enumeration."""
    CHECKPOINT = "checkpoint"
    RENDER = "render"
    FRAME = "frame"
    METRICS = "metrics"
    MANIFEST = "manifest"
    BIAS_REPORT = "bias_report"
    DIAGNOSTIC = "diagnostic"

class RunDB(Base):
    """
    Run table - one row per fitting run or campaign.
    """
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    run_id = Column(String(255), unique=True, index=True, nullable=False)
    name = Column(String(255), nullable=False)
    objective = Column(String(32), nullable=False)
    seed = Column(Integer, nullable=False)
    out_dir = Column(String(1000), nullable=False)
    status = Column(SQLEnum(RunStatusEnum), default=RunStatusEnum.PENDING, nullable=False)
    total_nfe = Column(Integer, default=0)
    iterations = Column(Integer, default=0)
    final_mse = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.now, nullable=False)
    updated_at = Column(DateTime, default=datetime.now, onupdate=datetime.now, nullable=False)

    # Relationships
    milestones = relationship("MilestoneDB", back_populates="run", cascade="all, delete-orphan")
    artifacts = relationship("ArtifactDB", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<Run(id={self.id}, run_id='{self.run_id}', objective='{self.objective}')>"

class MilestoneDB(Base):
    """
    Milestone table - checkpoints at stage boundaries.
    """
    __tablename__ = "milestones"

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    run_id = Column(String(255), ForeignKey("runs.run_id"), nullable=False)
    label = Column(String(255), nullable=False)
    iteration = Column(Integer, nullable=False)
    stage = Column(String(32), nullable=False)
    n_p = Column(Integer, nullable=False)
    target_mse = Column(Float, nullable=False)
    created_at = Column(DateTime, default=datetime.now, nullable=False)

    # Relationships
    run = relationship("RunDB", back_populates="milestones")
    artifacts = relationship("ArtifactDB", back_populates="milestone")

    def __repr__(self):
        return f"<Milestone(id={self.id}, run_id='{self.run_id}', label='{self.label}')>"

class ArtifactDB(Base):
    """
    Artifact table - file paths written by a run.
    """
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    run_id = Column(String(255), ForeignKey("runs.run_id"), nullable=False)
    milestone_id = Column(Integer, ForeignKey("milestones.id"), nullable=True)
    artifact_type = Column(SQLEnum(ArtifactTypeEnum), nullable=False)
    file_path = Column(String(1000), nullable=False)
    size_bytes = Column(Integer, nullable=True)
    created_at = Column(DateTime, default=datetime.now, nullable=False)

    # Relationships
    run = relationship("RunDB", back_populates="artifacts")
    milestone = relationship("MilestoneDB", back_populates="artifacts")

    def __repr__(self):
        return f"<Artifact(id={self.id}, run_id='{self.run_id}', type='{self.artifact_type.value}')>"
