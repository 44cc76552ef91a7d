import argparse
import json
import logging
import math
import os
import sys

from config.settings import BiasConfig, DenoiserConfig, DistillConfig, get_settings, load_run_config
from src.errors import ArtifactError, ConfigError, LabError
from src.models.run import RunStatus
from src.objectives.kinds import ObjectiveKind

logger = logging.getLogger("pcds_lab")


def _load_config(args, **overrides):
    return load_run_config(args.config, args.preset, seed=args.seed, **overrides)


def _out_dir(args, default_name: str) -> str:
    base = args.out_dir or os.path.join(get_settings().out_dir, default_name)
    os.makedirs(base, exist_ok=True)
    return base


def _session_factory(args):
    if not args.db:
        return None
    from config.database import get_session_factory

    url = get_settings().database_url
    factory = get_session_factory(url)
    print(f"✓ Run ledger at: {url}")
    return factory


def _section_config(model, path, section):
    """Read one JSON section (e.g. "denoiser") of a config file into a pydantic model."""
    if not path:
        return model()
    from pydantic import ValidationError

    try:
        with open(path) as fh:
            data = json.load(fh)
        return model.model_validate(data.get(section, {}))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"could not read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid {section} section: {e}") from e


def cmd_train_denoiser(args):
    from src.workflows.campaigns import train_denoiser_campaign

    config = _load_config(args)
    denoiser = _section_config(DenoiserConfig, args.section_config, "denoiser")
    if args.iterations is not None:
        denoiser = denoiser.model_copy(update={"iterations": args.iterations})
    train_denoiser_campaign(config, denoiser, _out_dir(args, "denoiser"), args.samples)


def cmd_distill(args):
    from src.workflows.campaigns import distill_campaign

    config = _load_config(args)
    distill = _section_config(DistillConfig, args.section_config, "distill")
    if args.iterations is not None:
        distill = distill.model_copy(update={"iterations": args.iterations})
    distill_campaign(config, distill, _out_dir(args, "consistency"))


def cmd_fit(args):
    from src.workflows.campaigns import render_turntable
    from src.workflows.coarse_to_fine import run_coarse_to_fine

    config = _load_config(
        args, objective=args.objective, nfe_budget=args.nfe_budget, workers=args.workers, trace_scores=args.trace_scores
    )
    out_dir = _out_dir(args, config.name)
    artifacts = run_coarse_to_fine(config, out_dir, use_db=args.db, session_factory=_session_factory(args))
    if config.turntable_frames:
        render_turntable(
            artifacts.scene, config.turntable_frames, os.path.join(out_dir, "turntable"),
            radius=config.camera_radius, image_size=(config.model.benchmark.image_size,) * 2,
        )
    print(f"\n✓ Fit '{artifacts.run.run_id}' finished: {artifacts.iterations} iterations, "
          f"{artifacts.total_nfe} NFE, target MSE {artifacts.initial_mse:.5f} -> {artifacts.final_mse:.5f}")


def cmd_compare(args):
    from src.workflows.campaigns import compare_objectives

    config = _load_config(args, nfe_budget=args.nfe_budget, workers=args.workers)
    seeds = dict(pair.split("=", 1) for pair in args.seeds or [])
    try:
        seeds = {k: int(v) for k, v in seeds.items()}
    except ValueError as e:
        raise ConfigError(f"--seeds expects objective=int pairs: {e}") from e
    result = compare_objectives(
        config, args.objectives, _out_dir(args, f"{config.name}_compare"),
        seeds=seeds, use_db=args.db, session_factory=_session_factory(args),
    )
    print("\n" + "=" * 80)
    print(f"COMPARISON at {result.nfe_budget} NFE" + ("" if result.matched else " (unmatched seeds)"))
    print("=" * 80)
    for variant, run in result.runs.items():
        print(f"  {variant:>6}: {run.iterations:5d} iterations, {run.total_nfe:8d} NFE, final MSE {run.final_mse:.5f}")
    print("=" * 80)


def cmd_bias(args):
    from src.workflows.campaigns import run_bias_campaign

    config = _load_config(args, workers=args.workers, trace_scores=args.trace_scores)
    bias = _section_config(BiasConfig, args.section_config, "bias")
    updates = {"seed": args.seed if args.seed is not None else bias.seed}
    if args.samples is not None:
        updates["samples"] = args.samples
    if args.timesteps:
        updates["timesteps"] = args.timesteps
    if args.objectives:
        updates["objectives"] = [ObjectiveKind(o) for o in args.objectives]
    bias = BiasConfig.model_validate({**bias.model_dump(), **updates})
    run_bias_campaign(config, bias, _out_dir(args, f"{config.name}_bias"))


def cmd_render(args):
    from src.workflows.campaigns import render_turntable

    out_dir = _out_dir(args, "turntable")
    render_turntable(
        args.scene, args.frames, out_dir,
        elevation=math.radians(args.elevation), radius=args.radius, image_size=(args.size, args.size),
    )


def cmd_runs(args):
    """Inspect and maintain the run ledger."""
    from config.database import get_session_factory
    from src.models.database import ArtifactTypeEnum, RunStatusEnum
    from src.models.run import Run
    from src.repositories.run_repository import RunRepository

    if args.action != "list" and not args.target:
        raise ConfigError(f"runs {args.action} needs a target")
    db = get_session_factory(args.db_url)()
    repo = RunRepository(db)
    try:
        if args.action == "list":
            runs = repo.get_runs_by_status(RunStatusEnum(args.status)) if args.status else repo.get_all_runs(args.limit)
            if not runs:
                print("\nNo runs found in the ledger.")
                return 0
            print("\n" + "=" * 80)
            print("RECORDED RUNS")
            print("=" * 80)
            for idx, run in enumerate(runs, 1):
                mse = "-" if run.final_mse is None else f"{run.final_mse:.5f}"
                print(f"\n{idx}. {run.run_id}")
                print(f"   Objective: {run.objective} | Seed: {run.seed} | Status: {run.status.value}")
                print(f"   Iterations: {run.iterations} | NFE: {run.total_nfe} | Final MSE: {mse}")
                print(f"   Created: {run.created_at.strftime('%Y-%m-%d %H:%M:%S')}")
            print("=" * 80)
            return 0

        if args.action == "import":
            try:
                with open(args.target) as fh:
                    manifest = json.load(fh)
                run = Run.from_dict(manifest["run"])
            except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
                raise ArtifactError(f"could not read run manifest {args.target}: {e}") from e
            if repo.get_run(run.run_id):
                print(f"\n⚠ Run '{run.run_id}' is already in the ledger.")
                return 1
            repo.save_complete_run(run)
            if manifest.get("metrics"):
                repo.save_artifact(run.run_id, ArtifactTypeEnum.METRICS, manifest["metrics"])
            repo.save_artifact(run.run_id, ArtifactTypeEnum.MANIFEST, args.target)
            print(f"✓ Run '{run.run_id}' imported with {len(run.milestones)} milestones")
            return 0

        db_run = repo.get_run(args.target)
        if not db_run:
            print(f"\n⚠ Run '{args.target}' not found.")
            return 1
        if args.action == "delete":
            repo.delete_run(args.target)
            print(f"✓ Run '{args.target}' deleted")
            return 0

        run = repo.run_to_dataclass(db_run)
        print("\n" + "=" * 80)
        print(f"RUN: {run.run_id}")
        print("=" * 80)
        print(f"Objective: {run.objective} | Seed: {run.seed} | Status: {run.status.value}")
        print(f"Iterations: {run.iterations} | NFE: {run.total_nfe} | Final MSE: {run.final_mse}")
        print(f"Output: {run.out_dir}")
        print(f"\n{'-' * 80}")
        print("MILESTONES:")
        print(f"{'-' * 80}")
        for m in run.milestones:
            print(f"\n{m.label} (iteration {m.iteration}, {m.stage}, N_p={m.n_p}): target MSE {m.target_mse:.5f}")
            if m.checkpoint_path:
                print(f"Checkpoint: {m.checkpoint_path}")
            if m.render_path:
                print(f"Render: {m.render_path}")
        print("=" * 80)
        return 0
    finally:
        db.close()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--out-dir", default=None, help="directory for every output of this command")
    common.add_argument("--preset", default=None, help="start from a named preset (paper, toy)")
    common.add_argument("--config", default=None, help="JSON run configuration layered over the preset")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(description="Score-distillation lab: TRUE / SDS / ISM / PCDS on Gaussian splats")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-denoiser", parents=[common], help="fit the toy denoiser to the benchmark mixture")
    p.add_argument("--section-config", default=None, help="JSON file with a 'denoiser' section")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--samples", type=int, default=512, help="training samples per condition")
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("distill-consistency", parents=[common], help="distill a consistency function")
    p.add_argument("--section-config", default=None, help="JSON file with a 'distill' section")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("fit", parents=[common], help="run the coarse-to-fine optimization")
    p.add_argument("--objective", choices=[k.value for k in ObjectiveKind], default=None)
    p.add_argument("--nfe-budget", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--trace-scores", action="store_true", default=None, help="write score_trace.csv of guided compositions")
    p.add_argument("--db", action="store_true", help="mirror the run into the SQL ledger")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", parents=[common], help="compare objectives at equal NFE")
    p.add_argument("objectives", nargs="+", help="objectives to compare; the first sets the NFE budget (pcds1 / pcds3 = PCDS fixed at one / three steps)")
    p.add_argument("--seeds", nargs="*", default=None, help="per-objective seeds as objective=seed")
    p.add_argument("--nfe-budget", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--db", action="store_true", help="mirror the runs into the SQL ledger")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bias", parents=[common], help="measure gradient bias against TRUE")
    p.add_argument("--section-config", default=None, help="JSON file with a 'bias' section")
    p.add_argument("--objectives", nargs="*", choices=[k.value for k in ObjectiveKind], default=None)
    p.add_argument("--timesteps", nargs="*", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--trace-scores", action="store_true", default=None, help="write score_trace.csv of guided compositions")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("render", parents=[common], help="render a turntable of a saved scene")
    p.add_argument("scene", help="scene checkpoint (.json or SPLT1)")
    p.add_argument("--frames", type=int, default=36)
    p.add_argument("--elevation", type=float, default=15.0, help="degrees")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("runs", parents=[common], help="list, show, delete or import runs in the SQL ledger")
    p.add_argument("action", choices=["list", "show", "delete", "import"])
    p.add_argument("target", nargs="?", default=None, help="run id (show, delete) or manifest.json (import)")
    p.add_argument("--status", choices=[s.value for s in RunStatus], default=None)
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--db-url", default=None, help="ledger URL (default: PCDS_DATABASE_URL)")
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    print("=" * 80)
    print("PCDS LAB")
    print("Score distillation on Gaussian splats")
    print("=" * 80)
    try:
        code = args.func(args)
    except LabError as e:
        print(f"\n⚠ {type(e).__name__}: {e}")
        logger.debug("command failed", exc_info=True)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n⚠ Interrupted.")
        return 130
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
