import csv
import logging

import pytest

from config.settings import BiasConfig
from src.diffusion.score_models import ConditionId, MixtureScoreModel
from src.objectives.bias import CSV_HEADER, measure_bias
from src.objectives.gradients import ObjectiveSetup
from src.objectives.kinds import ObjectiveKind

TARGET = ConditionId(id=0)


@pytest.fixture
def setup(image_mixture, schedule):
    return ObjectiveSetup(schedule=schedule, model=MixtureScoreModel(image_mixture, schedule), n_denoise_steps=10)


def small_config(**overrides):
    values = dict(timesteps=[300, 500], samples=3, seed=11)
    values.update(overrides)
    return BiasConfig(**values)


def test_rows_ordered_by_pose_then_t_then_objective(setup, scene_2d, camera_2d):
    config = small_config()
    report = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    assert len(report) == 8
    assert [(r.t, r.objective) for r in report.rows[:4]] == [(300, k) for k in config.objectives]
    assert [r.t for r in report.rows[4:]] == [500] * 4


def test_true_row_agrees_with_itself(setup, scene_2d, camera_2d):
    config = small_config()
    report = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    for row in report.select(ObjectiveKind.TRUE):
        assert row.cosine == pytest.approx(1.0, abs=1e-12)
        assert row.mag_ratio == pytest.approx(1.0, abs=1e-12)
        assert row.eta_residual == 0.0
    for row in report.rows:
        assert -1.0 <= row.cosine <= 1.0


def test_deterministic_estimators_have_no_spread(setup, scene_2d, camera_2d):
    config = small_config()
    report = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    for kind in (ObjectiveKind.ISM, ObjectiveKind.PCDS):
        assert all(row.cosine_std == 0.0 for row in report.select(kind))


def test_sds_particles_match_pcds_cost(setup, scene_2d, camera_2d):
    config = small_config(timesteps=[300])
    report = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    # one-step PCDS at t=300 inverts through 0 -> 200 -> 300, then queries once
    assert report.select(ObjectiveKind.PCDS)[0].nfe == 3
    assert report.select(ObjectiveKind.SDS)[0].nfe == 3
    unmatched = small_config(timesteps=[300], match_nfe=False)
    report = measure_bias(scene_2d, [camera_2d], unmatched.timesteps, setup, unmatched, condition=TARGET)
    assert report.select(ObjectiveKind.SDS)[0].nfe == 1


def test_runs_are_reproducible_across_workers(setup, scene_2d, camera_2d):
    config = small_config(objectives=[ObjectiveKind.TRUE, ObjectiveKind.SDS])
    serial = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    threaded = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET, workers=2)
    assert [r.cosine for r in serial.rows] == [r.cosine for r in threaded.rows]


def test_small_sample_count_warns(setup, scene_2d, camera_2d, caplog):
    config = small_config(timesteps=[300], objectives=[ObjectiveKind.TRUE])
    with caplog.at_level(logging.WARNING, logger="src.objectives.bias"):
        measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    assert "fewer than 100" in caplog.text


def test_csv_header_and_rows(setup, scene_2d, camera_2d, tmp_path):
    config = small_config(timesteps=[500], objectives=[ObjectiveKind.TRUE, ObjectiveKind.PCDS])
    report = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET)
    path = report.to_csv(str(tmp_path / "bias" / "bias.csv"))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_HEADER == ("objective", "t", "pose_bin", "cosine", "mag_ratio", "eta_residual", "nfe")
    assert [r[0] for r in rows[1:]] == ["true", "pcds"]
    assert rows[1][2] == "front"


@pytest.mark.slow
@pytest.mark.parametrize("t", [300, 500, 700])
def test_pcds_tracks_true_gradient_better_than_sds(t, image_mixture, schedule, scene_2d, camera_2d):
    setup = ObjectiveSetup(schedule=schedule, model=MixtureScoreModel(image_mixture, schedule), n_denoise_steps=50)
    config = BiasConfig(objectives=[ObjectiveKind.TRUE, ObjectiveKind.SDS, ObjectiveKind.PCDS], timesteps=[t], samples=1000)
    report = measure_bias(scene_2d, [camera_2d], config.timesteps, setup, config, condition=TARGET, workers=4)
    assert report.mean_cosine(ObjectiveKind.PCDS) > report.mean_cosine(ObjectiveKind.SDS)
