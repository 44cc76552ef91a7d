"""
Repository layer for run-ledger database operations.
Implements CRUD operations for runs, milestones and artifacts.
"""
from typing import List, Optional
from sqlalchemy.orm import Session
from src.models.database import RunDB, MilestoneDB, ArtifactDB, RunStatusEnum, ArtifactTypeEnum
from src.models.run import Run, Milestone, RunStatus
from datetime import datetime
import os

STATUS_TO_DB = {
    RunStatus.PENDING: RunStatusEnum.PENDING,
    RunStatus.RUNNING: RunStatusEnum.RUNNING,
    RunStatus.COMPLETED: RunStatusEnum.COMPLETED,
    RunStatus.FAILED: RunStatusEnum.FAILED,
}
STATUS_FROM_DB = {v: k for k, v in STATUS_TO_DB.items()}

class RunRepository:
    """Repository for run-related database operations."""

    def __init__(self, db: Session):
        self.db = db

    def create_run(self, run: Run) -> RunDB:
        """
        Create a new run in the database.

        Args:
            run: Run dataclass instance

        Returns:
            RunDB: Created database record
        """
        db_run = RunDB(
            run_id=run.run_id,
            name=run.name,
            objective=run.objective,
            seed=run.seed,
            out_dir=run.out_dir,
            status=STATUS_TO_DB.get(run.status, RunStatusEnum.PENDING),
            total_nfe=run.total_nfe,
            iterations=run.iterations,
            final_mse=run.final_mse,
            created_at=run.created_at or datetime.now(),
            updated_at=run.updated_at or datetime.now()
        )

        self.db.add(db_run)
        self.db.commit()
        self.db.refresh(db_run)

        return db_run

    def save_milestone(self, run_id: str, milestone: Milestone) -> MilestoneDB:
        """
        Save a milestone and its checkpoint/render artifacts.

        Args:
            run_id: Run identifier
            milestone: Milestone dataclass instance

        Returns:
            MilestoneDB: Created milestone record
        """
        db_milestone = MilestoneDB(
            run_id=run_id,
            label=milestone.label,
            iteration=milestone.iteration,
            stage=milestone.stage,
            n_p=milestone.n_p,
            target_mse=milestone.target_mse,
            created_at=milestone.created_at or datetime.now()
        )

        self.db.add(db_milestone)
        self.db.commit()
        self.db.refresh(db_milestone)

        if milestone.checkpoint_path:
            self.save_artifact(run_id, ArtifactTypeEnum.CHECKPOINT, milestone.checkpoint_path, db_milestone.id)
        if milestone.render_path:
            self.save_artifact(run_id, ArtifactTypeEnum.RENDER, milestone.render_path, db_milestone.id)

        return db_milestone

    def save_artifact(
        self, run_id: str, artifact_type: ArtifactTypeEnum, file_path: str, milestone_id: Optional[int] = None
    ) -> ArtifactDB:
        """
        Save an artifact path to the database.

        Args:
            run_id: Run identifier
            artifact_type: Kind of artifact
            file_path: Path to the artifact file
            milestone_id: Database ID of the owning milestone, if any

        Returns:
            ArtifactDB: Created artifact record
        """
        size_bytes = None
        if os.path.exists(file_path):
            size_bytes = os.path.getsize(file_path)

        db_artifact = ArtifactDB(
            run_id=run_id,
            milestone_id=milestone_id,
            artifact_type=artifact_type,
            file_path=file_path,
            size_bytes=size_bytes,
            created_at=datetime.now()
        )

        self.db.add(db_artifact)
        self.db.commit()
        self.db.refresh(db_artifact)

        return db_artifact

    def save_complete_run(self, run: Run) -> RunDB:
        """Save a finished run with all milestones."""
        db_run = self.create_run(run)
        for milestone in run.milestones:
            self.save_milestone(run.run_id, milestone)
        return db_run

    def get_run(self, run_id: str) -> Optional[RunDB]:
        return self.db.query(RunDB).filter(RunDB.run_id == run_id).first()

    def get_all_runs(self, limit: int = 100) -> List[RunDB]:
        """Most recent first."""
        return (
            self.db.query(RunDB)
            .order_by(RunDB.created_at.desc())
            .limit(limit)
            .all()
        )

    def get_runs_by_status(self, status: RunStatusEnum) -> List[RunDB]:
        return (
            self.db.query(RunDB)
            .filter(RunDB.status == status)
            .order_by(RunDB.created_at.desc())
            .all()
        )

    def get_milestones(self, run_id: str) -> List[MilestoneDB]:
        """Milestones of a run in iteration order."""
        return (
            self.db.query(MilestoneDB)
            .filter(MilestoneDB.run_id == run_id)
            .order_by(MilestoneDB.iteration)
            .all()
        )

    def get_artifacts(self, run_id: str, artifact_type: Optional[ArtifactTypeEnum] = None) -> List[ArtifactDB]:
        query = self.db.query(ArtifactDB).filter(ArtifactDB.run_id == run_id)
        if artifact_type is not None:
            query = query.filter(ArtifactDB.artifact_type == artifact_type)
        return query.order_by(ArtifactDB.id).all()

    def update_run_status(self, run_id: str, status: RunStatusEnum, **totals) -> bool:
        """
        Update the status of a run, optionally with total_nfe / iterations / final_mse.

        Returns:
            bool: True if the run exists
        """
        db_run = self.get_run(run_id)
        if db_run:
            db_run.status = status
            for key in ("total_nfe", "iterations", "final_mse"):
                if totals.get(key) is not None:
                    setattr(db_run, key, totals[key])
            db_run.updated_at = datetime.now()
            self.db.commit()
            return True
        return False

    def delete_run(self, run_id: str) -> bool:
        """Delete a run and all associated milestones and artifacts."""
        db_run = self.get_run(run_id)
        if db_run:
            self.db.delete(db_run)
            self.db.commit()
            return True
        return False

    def run_to_dataclass(self, db_run: RunDB) -> Run:
        """
        Convert database Run to dataclass Run.

        Args:
            db_run: RunDB instance

        Returns:
            Run dataclass instance
        """
        run = Run(
            name=db_run.name,
            objective=db_run.objective,
            seed=db_run.seed,
            out_dir=db_run.out_dir,
            status=STATUS_FROM_DB.get(db_run.status, RunStatus.PENDING),
            total_nfe=db_run.total_nfe or 0,
            iterations=db_run.iterations or 0,
            final_mse=db_run.final_mse,
            run_id=db_run.run_id,
            created_at=db_run.created_at,
            updated_at=db_run.updated_at
        )

        for db_milestone in self.get_milestones(db_run.run_id):
            checkpoint_path = None
            render_path = None

            for asset in db_milestone.artifacts:
                if asset.artifact_type == ArtifactTypeEnum.CHECKPOINT:
                    checkpoint_path = asset.file_path
                elif asset.artifact_type == ArtifactTypeEnum.RENDER:
                    render_path = asset.file_path

            run.milestones.append(Milestone(
                label=db_milestone.label,
                iteration=db_milestone.iteration,
                stage=db_milestone.stage,
                n_p=db_milestone.n_p,
                target_mse=db_milestone.target_mse,
                checkpoint_path=checkpoint_path,
                render_path=render_path,
                created_at=db_milestone.created_at
            ))

        return run
