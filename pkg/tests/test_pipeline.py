"""End-to-end pipeline: configuration files, training smoke runs, scoring."""

import json

import numpy as np
import pytest

from graphdet.pipeline import (
    ConfigError,
    EvalConfig,
    GnnPipelineConfig,
    NmsPipelineConfig,
    PipelineConfig,
    ProposalConfig,
    SceneConfig,
    TrainPipelineConfig,
    config_to_dict,
    load_pipeline_config,
    parse_pipeline_config,
    run_pipeline,
    train_smoke,
)


def tiny_raw(**overrides):
    """A small, fast pipeline description; sections merge over these."""
    raw = {
        "scene": {"n_objects": 2, "points_per_object": 48, "clutter_points": 24},
        "voxel": {"step": [0.4, 0.4, 0.4], "max_points_per_voxel": None},
        "anchors": {"rows": 16, "cols": 16},
        "rfa": {
            "keypoint_counts": [24, 12, 6],
            "radii": [[0.4, 0.8], [0.8, 1.6], [1.6, 3.2]],
        },
        "train": {"steps": 0},
    }
    for key, value in overrides.items():
        if key in raw and isinstance(value, dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


def tiny_config(**overrides):
    return parse_pipeline_config(tiny_raw(**overrides))


# ---------------------------------------------------------------------------
# configuration


def test_config_error_is_a_value_error():
    assert issubclass(ConfigError, ValueError)


def test_default_config_and_state_dim():
    config = PipelineConfig()
    assert config.state_dim == config.rfa.feature_dim
    assert config.gnn.depth == 3
    assert config.gnn.variant == "extended"
    assert config.proposals.pos_iou == 0.7


def test_sub_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(n_objects=-1)
    with pytest.raises(ConfigError):
        GnnPipelineConfig(depth=6)
    with pytest.raises(ConfigError):
        GnnPipelineConfig(variant="mega")
    with pytest.raises(ConfigError):
        ProposalConfig(per_gt=0)
    with pytest.raises(ConfigError):
        NmsPipelineConfig(iou_threshold=1.5)
    with pytest.raises(ConfigError):
        TrainPipelineConfig(steps=-1)
    with pytest.raises(ConfigError):
        EvalConfig(ap_iou=0.0)


def test_parse_empty_dict_gives_defaults():
    assert parse_pipeline_config({}) == PipelineConfig()


def test_parse_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config key 'turbo'"):
        parse_pipeline_config({"turbo": True})
    with pytest.raises(ConfigError, match="'proposals'.'jitter'"):
        parse_pipeline_config({"proposals": {"jitter": 1.0}})
    with pytest.raises(ConfigError, match="must be an object"):
        parse_pipeline_config({"gnn": 3})
    with pytest.raises(ConfigError, match="root"):
        parse_pipeline_config([1, 2])


def test_parse_surfaces_invalid_values_as_config_errors():
    with pytest.raises(ConfigError):
        parse_pipeline_config({"gnn": {"depth": 9}})
    with pytest.raises(ConfigError):
        parse_pipeline_config({"bev_cell_size": -1.0})


def test_config_dict_round_trip():
    config = tiny_config(seed=7, gnn={"depth": 2, "hidden_dim": 12})
    mirrored = parse_pipeline_config(config_to_dict(config))
    assert mirrored == config
    assert config_to_dict(mirrored) == config_to_dict(config)


def test_range_override_propagates_to_voxel_grid():
    config = parse_pipeline_config(
        {"range": [[0.0, 20.0], [-10.0, 10.0], [-3.0, 1.0]]}
    )
    assert config.range_bounds == ((0.0, 20.0), (-10.0, 10.0), (-3.0, 1.0))
    assert config.voxel.range_bounds == config.range_bounds


def test_load_config_file(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps(tiny_raw(seed=3)))
    config = load_pipeline_config(str(path))
    assert config.seed == 3
    assert config.scene.n_objects == 2

    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="broken.json"):
        load_pipeline_config(str(bad))


# ---------------------------------------------------------------------------
# training smoke runs


def test_train_smoke_history_length():
    config = tiny_config()
    history = train_smoke(config, steps=3)
    assert len(history) == 4
    assert all(np.isfinite(history))
    # with no explicit override the configured step count applies
    assert len(train_smoke(config)) == 1  # tiny config trains zero steps


def test_train_smoke_zero_learning_rate_is_constant():
    config = tiny_config(train={"steps": 2, "learning_rate": 0.0})
    history = train_smoke(config)
    assert history[0] == history[1] == history[2]


def test_train_smoke_is_deterministic():
    config = tiny_config()
    assert train_smoke(config, steps=2) == train_smoke(config, steps=2)


def test_train_smoke_descends():
    config = tiny_config()
    history = train_smoke(config, steps=30)
    assert history[-1] < history[0]


def test_train_smoke_rejects_negative_steps():
    with pytest.raises(ConfigError, match="non-negative"):
        train_smoke(tiny_config(), steps=-1)


# ---------------------------------------------------------------------------
# end-to-end scoring


def test_empty_scene_yields_no_detections():
    config = tiny_config(scene={"n_objects": 0})
    detections, report = run_pipeline(config)
    assert detections == []
    assert report["ap_s11"] == 0.0
    assert report["ap_s40"] == 0.0
    assert report["n_gt"] == 0
    assert report["n_proposals"] == 0
    assert report["loss_history"] == []
    assert "loss_first" not in report


def test_noise_free_passthrough_reproduces_ground_truth():
    """Exact proposals, a depth-0 refiner, and a zero header must hand the
    ground truth straight through with AP exactly one."""
    config = tiny_config(
        proposals={"center_noise": 0.0, "yaw_noise": 0.0},
        gnn={"depth": 0, "header_init": "zero"},
    )
    detections, report = run_pipeline(config)
    assert report["ap_s11"] == 1.0
    assert report["ap_s40"] == 1.0
    assert report["holdout_ap_s40"] == 1.0
    assert report["n_detections"] == report["n_gt"] == 2
    for det in detections:
        assert det.score == 0.5


def test_run_pipeline_reports_expected_keys():
    config = tiny_config(train={"steps": 2})
    _, report = run_pipeline(config)
    for key in (
        "ap_iou",
        "ap_s11",
        "ap_s40",
        "n_detections",
        "n_gt",
        "n_proposals",
        "holdout_ap_s11",
        "holdout_ap_s40",
        "holdout_n_gt",
        "loss_history",
        "loss_first",
        "loss_final",
    ):
        assert key in report, key
    assert len(report["loss_history"]) == 3
    assert report["loss_first"] == report["loss_history"][0]
    assert report["loss_final"] == report["loss_history"][-1]


def test_run_pipeline_is_deterministic():
    config = tiny_config(train={"steps": 2})
    det_a, report_a = run_pipeline(config)
    det_b, report_b = run_pipeline(config)
    assert report_a == report_b
    assert len(det_a) == len(det_b)
    for a, b in zip(det_a, det_b):
        assert np.array_equal(a.as_vector(), b.as_vector())
        assert a.score == b.score
