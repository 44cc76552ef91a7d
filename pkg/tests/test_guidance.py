import math

import numpy as np
import pytest

from src.diffusion.guidance import (
    TRACE_FIELDS,
    GuidanceConfig,
    NegativePrompt,
    ScoreTrace,
    bind_pose,
    cfg_compose,
    compose_eps,
    guidance_for_pose,
    guided_cost,
    perp_component,
    perp_neg_compose,
    view_bin_for,
)
from src.diffusion.score_models import ConditionId, GaussianMixture, MixtureScoreModel, ViewBin
from src.errors import ParameterError
from src.splatting.camera import orbit_camera

POS, NEG_A, NEG_B = ConditionId(id=0), ConditionId(id=1), ConditionId(id=2)


def test_no_negatives_is_exactly_cfg(oracle):
    x = np.array([0.2, -0.4])
    config = GuidanceConfig(positive=POS, w_g=7.5)
    before = oracle.nfe
    composed = perp_neg_compose(oracle, x, 350, config)
    expected = cfg_compose(oracle.eval(x, 350, None), oracle.eval(x, 350, POS), 7.5)
    assert np.array_equal(composed.eps, expected)
    assert composed.nfe == 2
    assert oracle.nfe - before == 4  # two inside the compose, two for the reference


def test_nfe_is_negatives_plus_two(oracle):
    config = GuidanceConfig(positive=POS, negatives=[NegativePrompt(condition=NEG_A), NegativePrompt(condition=NEG_B)])
    before = oracle.nfe
    composed = perp_neg_compose(oracle, np.array([0.1, 0.1]), 500, config)
    assert composed.nfe == config.evaluations == 4
    assert oracle.nfe - before == 4
    assert guided_cost(config) == 4
    assert guided_cost(None) == 1


def test_perpendicular_components_are_orthogonal(oracle):
    rng = np.random.default_rng(5)
    for _ in range(1000):
        config = GuidanceConfig(
            positive=POS,
            w_g=float(rng.uniform(1, 10)),
            negatives=[
                NegativePrompt(condition=NEG_A, w_c=float(rng.uniform(0, 2))),
                NegativePrompt(condition=NEG_B, w_c=float(rng.uniform(0, 2))),
            ],
        )
        x = 2.0 * rng.standard_normal(2)
        composed = perp_neg_compose(oracle, x, int(rng.integers(1, 1001)), config)
        assert composed.orthogonality_residual() < 1e-9


def test_matches_independent_formula(oracle):
    x, t = np.array([-0.3, 0.8]), 420
    w_g, w_a, w_b = 5.0, 0.7, 1.3
    config = GuidanceConfig(
        positive=POS, w_g=w_g,
        negatives=[NegativePrompt(condition=NEG_A, w_c=w_a), NegativePrompt(condition=NEG_B, w_c=w_b)],
    )
    composed = perp_neg_compose(oracle, x, t, config)

    u = oracle.eval(x, t, None)
    pos = oracle.eval(x, t, POS) - u
    total = np.zeros(2)
    for cond, w in ((NEG_A, w_a), (NEG_B, w_b)):
        neg = oracle.eval(x, t, cond) - u
        total += w * (neg - (neg @ pos) / (pos @ pos) * pos)
    expected = u + w_g * (pos - total)
    np.testing.assert_allclose(composed.eps, expected, rtol=1e-12)


def test_zero_weight_negatives_reduce_to_cfg(oracle):
    x, t = np.array([0.5, 0.5]), 250
    with_zero = GuidanceConfig(positive=POS, w_g=3.0, negatives=[NegativePrompt(condition=NEG_A, w_c=0.0)])
    plain = GuidanceConfig(positive=POS, w_g=3.0)
    assert np.array_equal(perp_neg_compose(oracle, x, t, with_zero).eps, perp_neg_compose(oracle, x, t, plain).eps)


def test_degenerate_positive_passes_negative_through(schedule):
    mixture = GaussianMixture([1.0], [[0.3, 0.3]], [0.5], {POS: (0,), NEG_A: (0,)})
    model = MixtureScoreModel(mixture, schedule)
    composed = perp_neg_compose(model, np.array([1.0, -1.0]), 300, GuidanceConfig(positive=POS, negatives=[NegativePrompt(condition=NEG_A)]))
    assert composed.degenerate == [True]
    np.testing.assert_array_equal(composed.eps, composed.eps_uncond)


def test_perp_component_zero_positive():
    projection = perp_component(np.zeros(3), np.array([1.0, 2.0, 3.0]))
    assert projection.degenerate
    np.testing.assert_array_equal(projection.vector, [1.0, 2.0, 3.0])


def test_compose_eps_without_guidance_is_one_eval(oracle):
    x = np.array([0.0, 1.0])
    before = oracle.nfe
    eps = compose_eps(oracle, x, 100, None, POS)
    assert oracle.nfe - before == 1
    np.testing.assert_array_equal(eps, oracle.eval(x, 100, POS))


@pytest.mark.parametrize(
    "azimuth, elevation, expected",
    [
        (0.0, 0.0, ViewBin.FRONT),
        (math.radians(40), 0.0, ViewBin.FRONT),
        (math.pi / 2, 0.0, ViewBin.SIDE),
        (-math.pi / 2, 0.0, ViewBin.SIDE),
        (math.pi, 0.0, ViewBin.BACK),
        (-3.0, 0.0, ViewBin.BACK),
        (0.0, math.radians(70), ViewBin.OVERHEAD),
    ],
)
def test_view_bins(azimuth, elevation, expected):
    assert view_bin_for(azimuth, elevation) is expected


def test_bind_pose_negatives_exclude_positive():
    binding = bind_pose(orbit_camera(math.pi / 2, 0.0, 4.0, (8, 8)), w_c=0.25)
    assert binding.positive_bin is ViewBin.SIDE
    assert [b for b, _ in binding.negative_bins] == [ViewBin.FRONT, ViewBin.BACK]
    assert all(w == 0.25 for _, w in binding.negative_bins)
    with_overhead = bind_pose(orbit_camera(0.0, 0.0, 4.0, (8, 8)), include_overhead=True)
    assert ViewBin.OVERHEAD in [b for b, _ in with_overhead.negative_bins]


def test_guidance_for_pose_skips_unregistered_bins():
    conditions = {
        ViewBin.FRONT: ConditionId(id=0, view_bin=ViewBin.FRONT),
        ViewBin.BACK: ConditionId(id=0, view_bin=ViewBin.BACK),
    }
    binding = bind_pose(orbit_camera(0.1, 0.0, 4.0, (8, 8)))
    config = guidance_for_pose(binding, conditions, w_g=4.0)
    assert config.positive == conditions[ViewBin.FRONT]
    assert [n.condition for n in config.negatives] == [conditions[ViewBin.BACK]]
    with pytest.raises(ParameterError):
        guidance_for_pose(bind_pose(orbit_camera(math.pi / 2, 0.0, 4.0, (8, 8))), conditions)


def test_trace_keeps_one_row_per_guided_composition(oracle, tmp_path):
    from src.utils.file_io import read_csv

    trace = ScoreTrace()
    config = GuidanceConfig(positive=POS, negatives=[NegativePrompt(condition=NEG_A, w_c=1.0)], w_g=5.0)
    x = np.array([0.1, 0.6])
    perp_neg_compose(oracle, x, 300, config, trace)
    compose_eps(oracle, x, 500, config, trace=trace)
    compose_eps(oracle, x, 500, None, trace=trace)
    assert len(trace) == 2
    assert [row["t"] for row in trace.rows] == [300, 500]
    assert trace.rows[0]["positive"] == POS.label()

    path = trace.to_csv(str(tmp_path / "trace.csv"))
    with open(path) as fh:
        assert fh.readline().strip().split(",") == list(TRACE_FIELDS)
    rows = read_csv(path)
    assert len(rows) == 2
    assert float(rows[0]["orthogonality_residual"]) < 1e-9
