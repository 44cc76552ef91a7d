from dataclasses import dataclass, field
from typing import List, Optional
from datetime import datetime
from enum import Enum

class RunStatus(Enum):
    """Status of a fitting run."""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"

@dataclass
class Milestone:
    label: str
    iteration: int
    stage: str
    n_p: int
    target_mse: float
    checkpoint_path: Optional[str] = None
    render_path: Optional[str] = None
    created_at: Optional[datetime] = None

    def __post_init__(self):
        if self.created_at is None:
            self.created_at = datetime.now()

@dataclass
class Run:
    name: str
    objective: str
    seed: int
    out_dir: str
    milestones: List[Milestone] = field(default_factory=list)
    status: RunStatus = RunStatus.PENDING
    total_nfe: int = 0
    iterations: int = 0
    final_mse: Optional[float] = None
    created_at: Optional[datetime] = None
    updated_at: Optional[datetime] = None
    run_id: Optional[str] = None  # Unique identifier

    def __post_init__(self):
        if self.created_at is None:
            self.created_at = datetime.now()
        if self.updated_at is None:
            self.updated_at = datetime.now()
        if self.run_id is None:
            # name, objective and seed plus a timestamp
            timestamp = int(self.created_at.timestamp())
            self.run_id = f"{self.name.replace(' ', '_')}_{self.objective}_s{self.seed}_{timestamp}"

    def add_milestone(self, milestone: Milestone):
        self.milestones.append(milestone)
        self.updated_at = datetime.now()

    def mark_running(self):
        self.status = RunStatus.RUNNING
        self.updated_at = datetime.now()

    def mark_completed(self, total_nfe: int, iterations: int, final_mse: float):
        """Mark run as completed with its final totals."""
        self.status = RunStatus.COMPLETED
        self.total_nfe = total_nfe
        self.iterations = iterations
        self.final_mse = final_mse
        self.updated_at = datetime.now()

    def mark_failed(self):
        """Mark run as failed."""
        self.status = RunStatus.FAILED
        self.updated_at = datetime.now()

    def to_dict(self):
        """Convert run to dictionary for the manifest."""
        return {
            "run_id": self.run_id,
            "name": self.name,
            "objective": self.objective,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "status": self.status.value,
            "total_nfe": self.total_nfe,
            "iterations": self.iterations,
            "final_mse": self.final_mse,
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "updated_at": self.updated_at.isoformat() if self.updated_at else None,
            "milestones": [
                {
                    "label": m.label,
                    "iteration": m.iteration,
                    "stage": m.stage,
                    "n_p": m.n_p,
                    "target_mse": m.target_mse,
                    "checkpoint_path": m.checkpoint_path,
                    "render_path": m.render_path,
                    "created_at": m.created_at.isoformat() if m.created_at else None
                }
                for m in self.milestones
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Run":
        """Inverse of to_dict, e.g. to import a manifest's run into the ledger."""
        def when(value):
            return datetime.fromisoformat(value) if value else None

        run = cls(
            name=data["name"],
            objective=data["objective"],
            seed=data["seed"],
            out_dir=data["out_dir"],
            status=RunStatus(data.get("status", "pending")),
            total_nfe=data.get("total_nfe", 0),
            iterations=data.get("iterations", 0),
            final_mse=data.get("final_mse"),
            created_at=when(data.get("created_at")),
            updated_at=when(data.get("updated_at")),
            run_id=data.get("run_id"),
        )
        for m in data.get("milestones", []):
            run.milestones.append(Milestone(
                label=m["label"],
                iteration=m["iteration"],
                stage=m["stage"],
                n_p=m["n_p"],
                target_mse=m["target_mse"],
                checkpoint_path=m.get("checkpoint_path"),
                render_path=m.get("render_path"),
                created_at=when(m.get("created_at")),
            ))
        return run
