import json
import math
import os

import numpy as np
import pytest
from PIL import Image

from config.database import make_session_factory
from config.settings import BiasConfig
from main import main
from src.errors import NumericError, ParameterError
from src.models.database import RunStatusEnum
from src.objectives.kinds import ObjectiveKind
from src.repositories.run_repository import RunRepository
from src.splatting.scene import SplatScene, load_scene, save_scene
from src.utils.file_io import read_csv
from src.workflows import coarse_to_fine
from src.workflows.benchmark import CANONICAL_VIEWS, build_benchmark
from src.workflows.campaigns import compare_objectives, render_turntable, run_bias_campaign, variant_config
from src.workflows.coarse_to_fine import CoarseToFineFlow, run_coarse_to_fine


def test_plan_and_milestones(tiny_config):
    flow = CoarseToFineFlow(tiny_config, "unused")
    assert [flow.plan(i).n_p for i in range(8)] == [1, 1, 1, 1, 1, 2, 3, 3]
    assert flow.plan(2).stage.value == "coarse" and flow.plan(3).stage.value == "fine"
    assert flow.plan(0).inversion.value == "ddpm" and flow.plan(3).inversion.value == "ddim"
    assert flow.milestone_labels() == {2: "coarse_end", 4: "fine_np1_end", 5: "fine_np2_end"}


def test_fit_writes_artifacts(tiny_config, tmp_path):
    out = str(tmp_path / "fit")
    artifacts = run_coarse_to_fine(tiny_config, out)

    assert artifacts.iterations == 7
    assert [m.label for m in artifacts.run.milestones] == ["coarse_end", "fine_np1_end", "fine_np2_end", "final"]
    for path in artifacts.checkpoints + artifacts.renders + [artifacts.final_scene_path, artifacts.metrics_path]:
        assert os.path.exists(path)

    rows = read_csv(artifacts.metrics_path)
    assert len(rows) == 7
    assert [r["stage"] for r in rows] == ["coarse"] * 3 + ["fine"] * 4
    assert int(rows[-1]["total_nfe"]) == artifacts.total_nfe == sum(r.nfe for r in artifacts.records)
    assert all(600 <= int(r["t"]) <= 700 for r in rows[:3])
    assert all(300 <= int(r["t"]) <= 500 for r in rows[3:])

    with open(artifacts.manifest_path) as fh:
        manifest = json.load(fh)
    assert manifest["run"]["status"] == "completed"
    assert manifest["config"]["seed"] == 3
    assert len(load_scene(artifacts.final_scene_path)) == 4


def test_fit_is_reproducible(tiny_config, tmp_path):
    first = run_coarse_to_fine(tiny_config, str(tmp_path / "a"))
    second = run_coarse_to_fine(tiny_config, str(tmp_path / "b"))
    with open(first.checkpoints[-1]) as a, open(second.checkpoints[-1]) as b:
        assert json.load(a) == json.load(b)
    assert first.total_nfe == second.total_nfe


def test_threaded_batch_matches_serial(tiny_config, tmp_path):
    serial = run_coarse_to_fine(tiny_config, str(tmp_path / "serial"))
    threaded = run_coarse_to_fine(tiny_config.model_copy(update={"workers": 2}), str(tmp_path / "threaded"))
    np.testing.assert_array_equal(serial.scene.to_vector(), threaded.scene.to_vector())
    assert serial.total_nfe == threaded.total_nfe


def test_nfe_budget_stops_the_run(tiny_config, tmp_path):
    config = tiny_config.model_copy(update={"nfe_budget": 10, "objective": ObjectiveKind.SDS})
    artifacts = run_coarse_to_fine(config, str(tmp_path / "budget"))
    # never overshoots; one more batch of the same cost would have
    assert artifacts.total_nfe <= 10
    assert artifacts.total_nfe + artifacts.records[-1].nfe > 10


def test_nonfinite_gradient_dumps_diagnostics(tiny_config, tmp_path, monkeypatch):
    real = coarse_to_fine.run_objective

    def poisoned(*args, **kwargs):
        estimate = real(*args, **kwargs)
        estimate.grads.color[:] = np.nan
        return estimate

    monkeypatch.setattr(coarse_to_fine, "run_objective", poisoned)
    out = str(tmp_path / "nan")
    with pytest.raises(NumericError) as info:
        run_coarse_to_fine(tiny_config, out)
    assert info.value.exit_code == 4
    assert os.path.exists(os.path.join(out, "diagnostics", "nonfinite_iter000000.json"))
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["run"]["status"] == "failed"
    assert manifest["diagnostics"] == info.value.dump_path


def test_ledger_records_run(tiny_config, tmp_path):
    factory = make_session_factory("sqlite://")
    artifacts = run_coarse_to_fine(tiny_config, str(tmp_path / "db"), use_db=True, session_factory=factory)
    session = factory()
    try:
        repo = RunRepository(session)
        stored = repo.get_run(artifacts.run.run_id)
        assert stored.status is RunStatusEnum.COMPLETED
        assert stored.total_nfe == artifacts.total_nfe
        assert [m.label for m in repo.get_milestones(artifacts.run.run_id)] == [
            "coarse_end", "fine_np1_end", "fine_np2_end", "final"
        ]
    finally:
        session.close()


def test_compare_matches_budgets(tiny_config, tmp_path):
    result = compare_objectives(tiny_config, ["pcds", "sds"], str(tmp_path / "cmp"))
    reference = result.runs["pcds"]
    assert result.nfe_budget == reference.total_nfe
    assert result.matched
    sds = result.runs["sds"]
    assert sds.total_nfe <= result.nfe_budget < sds.total_nfe + sds.records[-1].nfe
    rows = read_csv(result.comparison_path)
    assert [r["variant"] for r in rows] == ["pcds", "sds"]
    assert os.path.exists(result.image_path)


def test_compare_single_objective(tiny_config, tmp_path):
    result = compare_objectives(tiny_config, ["ism"], str(tmp_path / "single"))
    assert result.nfe_budget is None
    assert list(result.runs) == ["ism"]


def test_compare_flags_unmatched_seeds(tiny_config, tmp_path):
    result = compare_objectives(tiny_config, ["pcds", "pcds1"], str(tmp_path / "seeds"), seeds={"pcds1": 9})
    assert not result.matched
    with open(result.manifest_path) as fh:
        assert json.load(fh)["matched"] is False
    assert result.runs["pcds1"].run.seed == 9


def test_variant_names(tiny_config):
    assert variant_config(tiny_config, "pcds1").pcds_step_schedule == [(4, 1)]
    with pytest.raises(ParameterError):
        variant_config(tiny_config, "vsd")
    with pytest.raises(ParameterError):
        compare_objectives(tiny_config, ["sds", "sds"], "unused")


def test_turntable_of_isotropic_splat_is_constant(tmp_path):
    scene = SplatScene([[0.0, 0.0, 0.0]], [[math.log(0.4)] * 3], [[1.0, 0.0, 0.0, 0.0]], [[0.9, 0.1, 0.1]], [3.0], [0.0])
    result = render_turntable(scene, 4, str(tmp_path / "turn"), elevation=0.0, radius=4.0, image_size=(8, 8), scale=1)
    assert len(result.frames) == 4
    frames = [np.asarray(Image.open(p), dtype=np.int16) for p in result.frames]
    for frame in frames[1:]:
        assert np.max(np.abs(frame - frames[0])) <= 1
    assert frames[0][4, 4, 0] > frames[0][4, 4, 2]
    with open(result.camera_path) as fh:
        assert len(json.load(fh)) == 4


def test_bias_campaign_writes_report(tiny_config, tmp_path):
    bias = BiasConfig(objectives=[ObjectiveKind.TRUE, ObjectiveKind.SDS], timesteps=[400], samples=2)
    result = run_bias_campaign(tiny_config, bias, str(tmp_path / "bias"))
    assert [r["objective"] for r in read_csv(result.csv_path)] == ["true", "sds"]
    assert os.path.exists(result.manifest_path)


def test_benchmark_pose_dependent_conditions(tiny_config):
    config = tiny_config.model_copy(update={
        "scene": tiny_config.scene.model_copy(update={"mode": "3d"}),
        "guidance": tiny_config.guidance.model_copy(update={"pose_dependent": True}),
    })
    benchmark = build_benchmark(config)
    assert set(benchmark.conditions) == {b for b, _, _ in CANONICAL_VIEWS}
    side = [c for b, c in benchmark.conditions.items() if b.value == "side"][0]
    assert len(benchmark.mixture.condition_map[side]) == 2


def test_cli_fit_from_json_config(tiny_config, tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(tiny_config.model_dump_json())
    out = tmp_path / "cli"
    assert main(["fit", "--config", str(path), "--out-dir", str(out), "--objective", "sds"]) == 0
    with open(out / "manifest.json") as fh:
        assert json.load(fh)["run"]["objective"] == "sds"


def test_cli_render_saved_scene(tmp_path):
    path = str(tmp_path / "scene.json")
    save_scene(SplatScene([[0.0, 0.0, 0.0]], [[-1.0] * 3], [[1.0, 0.0, 0.0, 0.0]], [[0.2, 0.2, 0.8]], [1.0], [0.0]), path)
    assert main(["render", path, "--frames", "3", "--size", "8", "--out-dir", str(tmp_path / "frames")]) == 0
    assert os.path.exists(tmp_path / "frames" / "frame_002.png")


def test_cli_errors_map_to_exit_codes(tmp_path):
    assert main(["fit", "--preset", "huge", "--out-dir", str(tmp_path)]) == 2
    assert main(["render", str(tmp_path / "missing.splt"), "--out-dir", str(tmp_path)]) == 5


@pytest.mark.slow
def test_paper_preset_pcds_beats_baselines_at_equal_nfe(tmp_path):
    from config.settings import load_run_config

    config = load_run_config(preset="paper", workers=4)
    result = compare_objectives(config, ["pcds", "sds", "pcds1"], str(tmp_path / "paper"))
    pcds = result.runs["pcds"].final_mse
    assert pcds < result.runs["sds"].final_mse
    assert pcds < result.runs["pcds1"].final_mse


def test_projected_cost_matches_what_each_batch_spends(tiny_config, tmp_path, monkeypatch):
    projected = []
    real = CoarseToFineFlow.projected_nfe

    def recording(self, poses, t, plan):
        cost = real(self, poses, t, plan)
        projected.append(cost)
        return cost

    monkeypatch.setattr(CoarseToFineFlow, "projected_nfe", recording)
    artifacts = run_coarse_to_fine(tiny_config.model_copy(update={"nfe_budget": 10**6}), str(tmp_path / "proj"))
    assert projected == [r.nfe for r in artifacts.records]


def test_failure_is_logged_when_the_ledger_rejects_it(tiny_config, tmp_path, monkeypatch, capsys):
    real = coarse_to_fine.run_objective

    def poisoned(*args, **kwargs):
        estimate = real(*args, **kwargs)
        estimate.grads.color[:] = np.nan
        return estimate

    def offline(self, run_id, status, **totals):
        raise RuntimeError("ledger offline")

    monkeypatch.setattr(coarse_to_fine, "run_objective", poisoned)
    monkeypatch.setattr(RunRepository, "update_run_status", offline)
    out = str(tmp_path / "offline")
    with pytest.raises(NumericError):
        run_coarse_to_fine(tiny_config, out, use_db=True, session_factory=make_session_factory("sqlite://"))
    assert "⚠ Error recording failure of run" in capsys.readouterr().out
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["ledger_error"] == "ledger offline"
    assert manifest["run"]["status"] == "failed"


def test_fit_traces_guided_compositions(tiny_config, tmp_path):
    from src.diffusion.guidance import TRACE_FIELDS

    artifacts = run_coarse_to_fine(tiny_config.model_copy(update={"trace_scores": True}), str(tmp_path / "trace"))
    with open(artifacts.manifest_path) as fh:
        trace_path = json.load(fh)["score_trace"]
    with open(trace_path) as fh:
        assert fh.readline().strip().split(",") == list(TRACE_FIELDS)
    rows = read_csv(trace_path)
    # one composition per PCDS step per pose
    assert len(rows) == sum(r.n_p for r in artifacts.records) * tiny_config.batch_size
    assert {int(r["t"]) for r in rows} >= {r.t for r in artifacts.records}


def test_fit_without_tracing_writes_no_trace(tiny_config, tmp_path):
    artifacts = run_coarse_to_fine(tiny_config, str(tmp_path / "plain"))
    assert not os.path.exists(os.path.join(artifacts.out_dir, "score_trace.csv"))


def test_bias_campaign_traces_scores(tiny_config, tmp_path):
    from src.diffusion.guidance import TRACE_FIELDS

    bias = BiasConfig(objectives=[ObjectiveKind.TRUE, ObjectiveKind.PCDS], timesteps=[400], samples=2)
    result = run_bias_campaign(tiny_config.model_copy(update={"trace_scores": True}), bias, str(tmp_path / "bias"))
    assert os.path.exists(result.trace_path)
    rows = read_csv(result.trace_path)
    assert rows and list(rows[0]) == list(TRACE_FIELDS)
    assert {int(r["t"]) for r in rows} <= set(range(0, 401))


def test_compare_records_every_variant_in_the_ledger(tiny_config, tmp_path):
    factory = make_session_factory("sqlite://")
    result = compare_objectives(
        tiny_config, ["pcds", "pcds1", "pcds3"], str(tmp_path / "variants"), use_db=True, session_factory=factory
    )
    assert list(result.runs) == ["pcds", "pcds1", "pcds3"]
    fine_steps = {v: {r.n_p for r in a.records if r.stage == "fine"} for v, a in result.runs.items()}
    assert fine_steps["pcds1"] == {1} and fine_steps["pcds3"] == {3}
    for variant in ("pcds1", "pcds3"):
        assert result.runs[variant].total_nfe <= result.nfe_budget

    session = factory()
    try:
        repo = RunRepository(session)
        stored = {run.run_id: run for run in repo.get_all_runs()}
        assert len(stored) == 3
        for artifacts in result.runs.values():
            assert stored[artifacts.run.run_id].status is RunStatusEnum.COMPLETED
            assert stored[artifacts.run.run_id].total_nfe == artifacts.total_nfe
    finally:
        session.close()


def test_pinned_variants_name_their_runs(tiny_config):
    three = variant_config(tiny_config, "pcds3")
    assert three.pcds_step_schedule == [(4, 3)]
    assert three.objective is ObjectiveKind.PCDS
    assert three.name == "tiny-pcds3"


def test_cli_runs_import_show_and_delete(tiny_config, tmp_path, capsys):
    config_path = tmp_path / "tiny.json"
    config_path.write_text(tiny_config.model_dump_json())
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(config_path), "--out-dir", str(out)]) == 0
    with open(out / "manifest.json") as fh:
        run_id = json.load(fh)["run"]["run_id"]

    db = ["--db-url", f"sqlite:///{tmp_path / 'ledger' / 'runs.db'}"]
    assert main(["runs", "list", *db]) == 0
    assert "No runs found" in capsys.readouterr().out
    assert main(["runs", "import", str(out / "manifest.json"), *db]) == 0
    assert main(["runs", "import", str(out / "manifest.json"), *db]) == 1

    capsys.readouterr()
    assert main(["runs", "list", "--status", "completed", *db]) == 0
    assert run_id in capsys.readouterr().out
    assert main(["runs", "show", run_id, *db]) == 0
    shown = capsys.readouterr().out
    assert "coarse_end" in shown and "final" in shown

    assert main(["runs", "delete", run_id, *db]) == 0
    assert main(["runs", "show", run_id, *db]) == 1
    assert main(["runs", "delete", *db]) == 2
    assert main(["runs", "import", str(tmp_path / "missing.json"), *db]) == 5


def test_cli_fit_trace_flag(tiny_config, tmp_path):
    config_path = tmp_path / "tiny.json"
    config_path.write_text(tiny_config.model_dump_json())
    out = tmp_path / "cli-trace"
    assert main(["fit", "--config", str(config_path), "--out-dir", str(out), "--trace-scores"]) == 0
    assert os.path.exists(out / "score_trace.csv")


@pytest.mark.slow
def test_toy_benchmark_pcds_fit_converges(tmp_path):
    from config.settings import toy_preset

    base = toy_preset()
    config = base.model_copy(update={
        "n_coarse": 100,
        "n_fine": 300,
        "pcds_step_schedule": [(100, 1), (100, 2), (100, 3)],
        "scene": base.scene.model_copy(update={"count": 64}),
    })
    artifacts = run_coarse_to_fine(config, str(tmp_path / "toy"))
    assert artifacts.final_mse * 5 <= artifacts.initial_mse

    mse = np.array([r.target_mse for r in artifacts.records])
    smooth = np.convolve(mse, np.ones(100) / 100, mode="valid")
    # windows ending in the second half of the run, sampled every 25 iterations
    checkpoints = smooth[len(mse) // 2 - 99::25]
    assert np.all(np.diff(checkpoints) <= 0.01 * checkpoints[:-1])
