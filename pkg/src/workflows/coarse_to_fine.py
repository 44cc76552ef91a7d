import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config.settings import RunConfig
from src.errors import NumericError
from src.models.run import Milestone, Run
from src.objectives.gradients import GradientEstimate, ObjectiveSetup, expected_nfe, run_objective
from src.objectives.kinds import InversionMode, ObjectiveKind, Stage
from src.splatting.camera import sample_pose
from src.splatting.renderer import render
from src.splatting.scene import SplatGradients, SplatScene, init_scene, save_scene
from src.utils.file_io import save_csv, save_image, save_json
from src.workflows.benchmark import Benchmark, build_benchmark, build_objective_setup, schedule_for
from src.workflows.optimizer import MomentumOptimizer

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "stage", "t", "n_p", "inversion", "loss", "target_mse", "nfe", "total_nfe")
MANIFEST_SCHEMA = "pcds-lab/run-manifest@1"
# a budgeted run stops after this many times its planned iterations even if the budget is not spent
BUDGET_ITERATION_CAP = 10


@dataclass
class IterationRecord:
    iteration: int
    stage: str
    t: int
    n_p: int
    inversion: str
    loss: float
    target_mse: float
    nfe: int
    total_nfe: int


@dataclass
class RunArtifacts:
    """Where a finished fit left its outputs, plus the headline numbers."""
    run: Run
    out_dir: str
    scene: SplatScene
    manifest_path: str
    metrics_path: str
    final_scene_path: str
    records: List[IterationRecord] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    renders: List[str] = field(default_factory=list)
    initial_mse: float = float("nan")

    @property
    def total_nfe(self) -> int:
        return self.run.total_nfe

    @property
    def iterations(self) -> int:
        return self.run.iterations

    @property
    def final_mse(self) -> Optional[float]:
        return self.run.final_mse


@dataclass
class StagePlan:
    stage: Stage
    n_p: int
    inversion: InversionMode
    t_range: Tuple[int, int]


class CoarseToFineFlow:
    """Coarse stage with one-step PCDS under DDPM noising, then the fine stage
    with DDIM inversion and a growing number of PCDS steps.

    Objectives other than PCDS run through the same loop; only the gradient
    estimator changes.
    """

    def __init__(
        self,
        config: RunConfig,
        out_dir: str,
        use_db: bool = False,
        session_factory: Optional[Callable] = None,
        benchmark: Optional[Benchmark] = None,
        setup: Optional[ObjectiveSetup] = None,
    ):
        self.config = config
        self.out_dir = out_dir
        self.use_db = use_db
        self.session_factory = session_factory
        self.benchmark = benchmark or build_benchmark(config)
        self.setup = setup or build_objective_setup(config, self.benchmark, schedule_for(config))
        self.objective = ObjectiveKind(config.objective)

    def plan(self, iteration: int) -> StagePlan:
        cfg = self.config
        if iteration < cfg.n_coarse:
            return StagePlan(Stage.COARSE, 1, InversionMode(cfg.coarse_inversion), tuple(cfg.coarse_t_range))
        return StagePlan(Stage.FINE, cfg.n_p_at(iteration - cfg.n_coarse), InversionMode.DDIM, tuple(cfg.fine_t_range))

    def milestone_labels(self) -> Dict[int, str]:
        """Planned stage boundaries (last iteration of each phase) keyed by iteration."""
        cfg = self.config
        labels = {}
        if cfg.n_coarse > 0 and cfg.n_fine > 0:
            labels[cfg.n_coarse - 1] = "coarse_end"
        end = cfg.n_coarse
        for iters, n_p in cfg.pcds_step_schedule[:-1]:
            end += iters
            if iters > 0:
                labels[end - 1] = f"fine_np{n_p}_end"
        return labels

    def _estimate(self, scene, pose, t, plan, noise) -> GradientEstimate:
        guidance = self.benchmark.guidance_for(pose, self.config.guidance)
        return run_objective(
            self.objective, self.setup, scene, pose, t, guidance,
            n_steps=plan.n_p, inversion=plan.inversion, noise=noise,
        )

    def projected_nfe(self, poses, t: int, plan: StagePlan) -> int:
        """Closed-form cost of one batch, checked against the budget before it runs."""
        rows = self.setup.sds_particles if self.objective is ObjectiveKind.SDS else None
        return sum(
            expected_nfe(
                self.objective, t, self.setup, self.benchmark.guidance_for(pose, self.config.guidance),
                plan.n_p, plan.inversion, rows,
            )
            for pose in poses
        )

    def _evaluate_batch(self, executor, scene, poses, t, plan, noise) -> List[GradientEstimate]:
        jobs = [(scene, pose, t, plan, noise[i]) for i, pose in enumerate(poses)]
        if executor is None:
            return [self._estimate(*job) for job in jobs]
        # map keeps submission order so the reduction below is deterministic
        return list(executor.map(lambda job: self._estimate(*job), jobs))

    def _dump_diagnostics(self, iteration, plan, t, poses, estimates, scene) -> str:
        path = os.path.join(self.out_dir, "diagnostics", f"nonfinite_iter{iteration:06d}.json")
        save_json(
            {
                "iteration": iteration,
                "stage": plan.stage.value,
                "t": t,
                "n_p": plan.n_p,
                "inversion": plan.inversion.value,
                "poses": [p.to_dict() for p in poses],
                "losses": [e.loss for e in estimates],
                "nfe": [e.nfe for e in estimates],
                "finite_gradients": [e.grads.is_finite() for e in estimates],
                "scene": scene.to_dict(),
            },
            path,
        )
        return path

    def _save_milestone(self, run: Run, label, iteration, plan, scene, target_mse) -> Milestone:
        checkpoint = os.path.join(self.out_dir, "checkpoints", f"{label}.json")
        save_scene(scene, checkpoint)
        image = render(scene, self.benchmark.eval_camera).pixels
        render_path = save_image(image, os.path.join(self.out_dir, "renders", f"{label}.png"), scale=4)
        milestone = Milestone(
            label=label,
            iteration=iteration,
            stage=plan.stage.value,
            n_p=plan.n_p,
            target_mse=target_mse,
            checkpoint_path=checkpoint,
            render_path=render_path,
        )
        run.add_milestone(milestone)
        return milestone

    def _write_manifest(self, run: Run, artifacts: Dict[str, object]) -> str:
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "run": run.to_dict(),
            "config": self.config.model_dump(mode="json"),
            **artifacts,
        }
        return save_json(manifest, os.path.join(self.out_dir, "manifest.json"))

    def run(self) -> RunArtifacts:
        cfg = self.config
        os.makedirs(self.out_dir, exist_ok=True)
        print(f"Starting {self.objective.value.upper()} fit '{cfg.name}' (seed {cfg.seed}) -> {self.out_dir}")
        print("=" * 60)

        run = Run(name=cfg.name, objective=self.objective.value, seed=cfg.seed, out_dir=self.out_dir)
        run.mark_running()

        db_session = None
        repo = None
        if self.use_db and self.session_factory is not None:
            from src.repositories.run_repository import RunRepository

            db_session = self.session_factory()
            repo = RunRepository(db_session)
            try:
                repo.create_run(run)
                print(f"✓ Run '{run.run_id}' recorded in the ledger")
            except Exception as e:
                print(f"⚠ Database error: {e}")

        records: List[IterationRecord] = []
        checkpoints: List[str] = []
        renders: List[str] = []
        executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        try:
            print("\n[Phase 1/3] Initializing scene and target...")
            rng = np.random.default_rng(cfg.seed)
            scene = init_scene(cfg.scene)
            optimizer = MomentumOptimizer(scene, cfg.learning_rates, cfg.momentum)
            initial_mse = self.benchmark.target_mse(scene)
            print(f"✓ {len(scene)} splats initialized, target MSE {initial_mse:.5f}")

            planned = cfg.n_coarse + cfg.n_fine
            budget = cfg.nfe_budget
            limit = planned if budget is None else max(planned, 1) * BUDGET_ITERATION_CAP
            labels = self.milestone_labels()
            rows = self.setup.sds_particles if self.objective is ObjectiveKind.SDS else 1
            size = self.benchmark.image_size

            print(f"\n[Phase 2/3] Optimizing ({cfg.n_coarse} coarse + {cfg.n_fine} fine iterations"
                  + (f", NFE budget {budget}" if budget is not None else "") + ")...")
            total_nfe = 0
            iteration = 0
            progress = tqdm(total=limit if budget is None else None, desc=self.objective.value)
            plan = self.plan(0)
            target_mse = initial_mse
            budget_spent = False
            while iteration < limit:
                step_plan = self.plan(iteration)
                lo, hi = step_plan.t_range
                t = int(rng.integers(lo, hi + 1))
                poses = [
                    sample_pose(rng, cfg.scene.mode, cfg.camera_radius, size, cfg.elevation_range_deg)
                    for _ in range(cfg.batch_size)
                ]
                if budget is not None and total_nfe + self.projected_nfe(poses, t, step_plan) > budget:
                    budget_spent = True
                    break
                plan = step_plan
                noise = rng.standard_normal((cfg.batch_size, rows, self.benchmark.dim))
                estimates = self._evaluate_batch(executor, scene, poses, t, plan, noise)

                grads = SplatGradients.zeros_like(scene)
                for estimate in estimates:
                    grads = grads + estimate.grads
                grads = grads.scaled(1.0 / len(estimates))
                loss = float(np.mean([e.loss for e in estimates]))
                nfe = sum(e.nfe for e in estimates)
                if not (math.isfinite(loss) and grads.is_finite()):
                    dump = self._dump_diagnostics(iteration, plan, t, poses, estimates, scene)
                    raise NumericError(f"non-finite loss or gradient at iteration {iteration}", dump)

                optimizer.step(scene, grads)
                total_nfe += nfe
                target_mse = self.benchmark.target_mse(scene)
                records.append(IterationRecord(
                    iteration, plan.stage.value, t, plan.n_p, plan.inversion.value, loss, target_mse, nfe, total_nfe
                ))
                if iteration in labels:
                    milestone = self._save_milestone(run, labels[iteration], iteration, plan, scene, target_mse)
                    checkpoints.append(milestone.checkpoint_path)
                    renders.append(milestone.render_path)
                    logger.info("milestone %s at iteration %d (mse %.5f)", milestone.label, iteration, target_mse)
                    if repo is not None:
                        try:
                            repo.save_milestone(run.run_id, milestone)
                        except Exception as e:
                            print(f"⚠ Error saving milestone {milestone.label}: {e}")
                iteration += 1
                progress.update(1)
                progress.set_postfix(mse=f"{target_mse:.4f}", nfe=total_nfe)
            progress.close()
            if budget is not None and not budget_spent:
                logger.warning("iteration cap %d reached with %d of %d NFE spent", limit, total_nfe, budget)
            print(f"✓ {iteration} iterations, {total_nfe} NFE, target MSE {initial_mse:.5f} -> {target_mse:.5f}")

            print("\n[Phase 3/3] Writing artifacts...")
            final = self._save_milestone(run, "final", max(iteration - 1, 0), plan, scene, target_mse)
            checkpoints.append(final.checkpoint_path)
            renders.append(final.render_path)
            final_scene_path = os.path.join(self.out_dir, "final_scene.splt")
            save_scene(scene, final_scene_path)
            metrics_path = save_csv((asdict(r) for r in records), os.path.join(self.out_dir, "metrics.csv"), METRIC_FIELDS)
            extras = {}
            if self.setup.trace is not None:
                extras["score_trace"] = self.setup.trace.to_csv(os.path.join(self.out_dir, "score_trace.csv"))
                print(f"✓ {len(self.setup.trace)} composed scores traced")
            run.mark_completed(total_nfe=total_nfe, iterations=iteration, final_mse=target_mse)
            manifest_path = self._write_manifest(run, {
                "initial_mse": initial_mse,
                "metrics": metrics_path,
                "final_scene": final_scene_path,
                "checkpoints": checkpoints,
                "renders": renders,
                **extras,
            })

            if repo is not None:
                try:
                    from src.models.database import ArtifactTypeEnum, RunStatusEnum

                    repo.save_milestone(run.run_id, final)
                    repo.save_artifact(run.run_id, ArtifactTypeEnum.METRICS, metrics_path)
                    repo.save_artifact(run.run_id, ArtifactTypeEnum.MANIFEST, manifest_path)
                    repo.update_run_status(
                        run.run_id, RunStatusEnum.COMPLETED,
                        total_nfe=total_nfe, iterations=iteration, final_mse=target_mse,
                    )
                    print(f"✓ Run status updated to: {run.status.value}")
                except Exception as e:
                    print(f"⚠ Error updating run status: {e}")

            print(f"✓ Manifest written to {manifest_path}")
            print("=" * 60)
            return RunArtifacts(
                run=run,
                out_dir=self.out_dir,
                scene=scene,
                manifest_path=manifest_path,
                metrics_path=metrics_path,
                final_scene_path=final_scene_path,
                records=records,
                checkpoints=checkpoints,
                renders=renders,
                initial_mse=initial_mse,
            )

        except Exception as e:
            run.mark_failed()
            extra = {"error": str(e)}
            if isinstance(e, NumericError) and e.dump_path:
                extra["diagnostics"] = e.dump_path
            try:
                self._write_manifest(run, extra)
            except Exception as write_error:
                logger.error("could not write failure manifest: %s", write_error)
            if repo is not None:
                try:
                    from src.models.database import ArtifactTypeEnum, RunStatusEnum

                    if isinstance(e, NumericError) and e.dump_path:
                        repo.save_artifact(run.run_id, ArtifactTypeEnum.DIAGNOSTIC, e.dump_path)
                    repo.update_run_status(run.run_id, RunStatusEnum.FAILED)
                    print(f"✓ Run status updated to: {run.status.value}")
                except Exception as db_error:
                    print(f"⚠ Error recording failure of run '{run.run_id}': {db_error}")
                    extra["ledger_error"] = str(db_error)
                    try:
                        self._write_manifest(run, extra)
                    except Exception as write_error:
                        logger.error("could not write failure manifest: %s", write_error)
            raise
        finally:
            if executor is not None:
                executor.shutdown()
            if db_session:
                db_session.close()


def run_coarse_to_fine(
    config: RunConfig,
    out_dir: str,
    use_db: bool = False,
    session_factory: Optional[Callable] = None,
) -> RunArtifacts:
    """Fit one scene with the configured objective and write its artifacts under out_dir."""
    return CoarseToFineFlow(config, out_dir, use_db=use_db, session_factory=session_factory).run()
