"""Tests for pipeline.py — model construction, weights, frames and the forward pass."""

from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

import radar_fusion.pipeline as pipeline_mod
from radar_fusion.config import config_from_dict
from radar_fusion.dataset_io import RangeSpec
from radar_fusion.errors import ConfigError, DataError, NumericError
from radar_fusion.nn_kernels import read_weights, write_weights
from radar_fusion.pillar_path import BevMap
from radar_fusion.pipeline import (
    blur_mask_for,
    build_model,
    forward_frame,
    grid_spec,
    load_frames,
    load_model,
    loss_summary,
    passthrough_detections,
    point_scores,
    run_frames,
)
from radar_fusion.voxel_grid import SparseTensor, VoxelGridSpec

SMALL = {
    "synthetic": {"n_frames": 2, "n_boxes": 4, "n_points": 150, "image_size": [64, 48]},
    "fusion": {"image_channels": 4, "n_levels": 3, "n_samples": 2},
    "backbone": {"base_channels": [4, 4, 8, 8, 8, 8], "double_channels": False, "n_residual": 1},
    "pillar": {"channels": 4, "n_blocks": 2, "strides": [1, 1], "z_bins": 5},
}


def small_config(**overrides):
    data = {k: dict(v) for k, v in SMALL.items()}
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            data.setdefault(section, {})[name] = value
        else:
            data[section] = value
    return config_from_dict(data)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("RADAR_FUSION_SEED", raising=False)
    monkeypatch.delenv("RADAR_FUSION_THREADS", raising=False)


class TestBuildModel:
    def test_same_seed_same_parameters(self):
        cfg = small_config()
        a = build_model(cfg, 7).to_named_tensors()
        b = build_model(cfg, 7).to_named_tensors()
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_seed_changes_parameters(self):
        a = build_model(small_config(), 7, seed=1).to_named_tensors()
        b = build_model(small_config(), 7, seed=2).to_named_tensors()
        assert a["stem.weight"].tobytes() != b["stem.weight"].tobytes()

    def test_backbone_weights_do_not_depend_on_fusion_count(self):
        plain = build_model(small_config(fusion__n_fusion=0), 7).to_named_tensors()
        fused = build_model(small_config(fusion__n_fusion=2), 7).to_named_tensors()
        for name, arr in plain.items():
            assert fused[name].tobytes() == arr.tobytes()
        assert any(".msdff." in name for name in fused)
        assert not any(".msdff." in name for name in plain)

    def test_channel_doubling(self):
        model = build_model(small_config(backbone__double_channels=True), 7)
        assert model.stem.c_out == 8
        assert model.blocks[2].block.down.c_out == 16

    def test_head_placement(self):
        assert build_model(small_config(), 7).head[0].c_in == 4
        assert build_model(small_config(head__attach_stage=3), 7).head[0].c_in == 8
        assert build_model(small_config(head__enabled=False), 7).head is None
        assert build_model(small_config(fusion__n_fusion=0), 7).head is None

    def test_head_stage_out_of_range(self):
        with pytest.raises(ConfigError, match="attach_stage"):
            build_model(small_config(head__attach_stage=9), 7)

    def test_simple_fusion_has_no_query_layer(self):
        model = build_model(small_config(fusion__kind="SFF"), 7)
        assert model.blocks[0].sff is not None and model.blocks[0].query_init is None

    def test_pillar_variant(self):
        model = build_model(small_config(variant="pillar"), 7)
        assert model.stem is None and len(model.pillar.blocks) == 2
        assert len(model.pillar.fusion) == 2 and len(model.pillar.height_tables) == 2


class TestWeights:
    def test_round_trip_through_file(self, tmp_path):
        cfg = small_config()
        model = build_model(cfg, 7)
        path = tmp_path / "w.rfw"
        write_weights(path, model.to_named_tensors())
        other = build_model(cfg, 7, seed=99).from_named_tensors(read_weights(path))
        a, b = model.to_named_tensors(), other.to_named_tensors()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_load_model_reads_weights_path(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "w.rfw"
        write_weights(path, build_model(cfg, 7, seed=5).to_named_tensors())
        cfg.weights = str(path)
        loaded = load_model(cfg, 7).to_named_tensors()
        assert loaded["stem.weight"].tobytes() == build_model(cfg, 7, seed=5).stem.weight.tobytes()

    def test_missing_tensor(self):
        model = build_model(small_config(), 7)
        tensors = model.to_named_tensors()
        del tensors["stem.bias"]
        with pytest.raises(DataError, match="lacks"):
            model.from_named_tensors(tensors)

    def test_shape_mismatch(self):
        model = build_model(small_config(), 7)
        tensors = model.to_named_tensors()
        tensors["stem.bias"] = np.zeros(99)
        with pytest.raises(DataError, match="shape"):
            model.from_named_tensors(tensors)


class TestFrames:
    def test_synthetic_frames_are_seeded(self):
        cfg = small_config()
        a, b = load_frames(cfg), load_frames(cfg)
        assert [f.frame_id for f in a] == ["000000", "000001"]
        assert a[1].pointcloud.points.tobytes() == b[1].pointcloud.points.tobytes()
        assert a[0].pointcloud.points.tobytes() != a[1].pointcloud.points.tobytes()
        assert a[0].pyramid.n_levels == 3 and a[0].pyramid.channels == 4

    def test_run_frames_keeps_order(self):
        assert run_frames(lambda v: v * v, range(20), threads=4) == [v * v for v in range(20)]

    def test_grid_spec_per_variant(self):
        assert grid_spec(small_config()).dims == (40, 256, 256)
        assert grid_spec(small_config(variant="pillar")).dims == (1, 80, 80)


class TestForward:
    def test_zero_output_projection_matches_single_modal(self):
        base = small_config(fusion__n_fusion=0, head__enabled=False)
        fused = small_config(fusion__n_fusion=2, fusion__zero_out_proj=True, head__enabled=False)
        frame = load_frames(base)[0]
        a = forward_frame(frame, build_model(base, 7), base)
        b = forward_frame(frame, build_model(fused, 7), fused)
        np.testing.assert_array_equal(a.bev.data, b.bev.data)

    def test_voxel_outputs(self):
        cfg = small_config()
        result = forward_frame(load_frames(cfg)[0], build_model(cfg, 7), cfg)
        # neck stages 4..6 are combined at stride 8 of the 256 x 256 grid
        assert result.bev.data.shape == (32, 32, 8)
        assert result.seg.scores.shape == (len(result.seg_tensor),)
        assert result.seg.labels is not None

    def test_pillar_outputs(self):
        cfg = small_config(variant="pillar")
        result = forward_frame(load_frames(cfg)[0], build_model(cfg, 7), cfg)
        assert result.bev.data.shape == (80, 80, 4)
        assert result.seg is not None

    def test_nan_reports_stage(self):
        cfg = small_config()
        frame = load_frames(cfg)[0]
        model = build_model(cfg, 7)

        def poisoned(tensors, reference_stride=None):
            spec = tensors[0].spec
            _, h, w = spec.shape_at(8)
            return BevMap(np.full((h, w, 8), np.nan), spec, 8)

        with patch.object(pipeline_mod, "combine_multiscale", poisoned):
            with pytest.raises(NumericError) as exc:
                forward_frame(frame, model, cfg)
        assert exc.value.stage == "neck"

    def test_missing_pyramid(self):
        cfg = small_config()
        frame = replace(load_frames(cfg)[0], pyramid=None)
        with pytest.raises(DataError, match="pyramid"):
            forward_frame(frame, build_model(cfg, 7), cfg)

    def test_neck_block_out_of_range(self):
        cfg = small_config(backbone__neck_blocks=[4, 7])
        with pytest.raises(ConfigError, match="neck_blocks"):
            forward_frame(load_frames(cfg)[0], build_model(cfg, 7), cfg)

    def test_mask_blur_needs_2d_regions(self):
        cfg = small_config(fusion__mask_blur=True)
        frame = load_frames(cfg)[0]
        stripped = replace(frame, boxes=[replace(b, box2d=None) for b in frame.boxes])
        with pytest.raises(DataError, match="2D regions"):
            forward_frame(stripped, build_model(cfg, 7), cfg)

    def test_mask_blur_selects_blurred_points(self):
        cfg = small_config()
        frame = next(f for f in load_frames(cfg) if any(b.box2d for b in f.boxes))
        mask = blur_mask_for(frame)
        xyz = frame.pointcloud.xyz
        selected = mask(xyz)
        for b in frame.boxes:
            assert not np.any(selected & b.contains(xyz))

    def test_loss_summary(self):
        cfg = small_config()
        model = build_model(cfg, 7)
        results = [forward_frame(f, model, cfg) for f in load_frames(cfg)]
        summary = loss_summary(results, cfg)
        assert summary["frames"] == 2
        assert summary["l_det"] == 0.0
        assert summary["total"] == summary["l_seg"]
        assert summary["l_seg"] > 0


class TestPassthroughDetections:
    def test_echo_ground_truth(self):
        cfg = small_config(head__echo_ground_truth=True, head__echo_score=0.7)
        frame = load_frames(cfg)[0]
        dets = passthrough_detections(cfg, frame)
        assert [d.center for d in dets] == [b.center for b in frame.boxes]
        assert {d.score for d in dets} == {0.7}

    def test_configured_boxes(self):
        cfg = small_config(head__detections=[
            {"class": "Pedestrian", "center": [5, 0, -1], "size": [0.8, 0.6, 1.7], "score": 0.4},
            {"frame": "000001", "class": "Car", "center": [8, 1, -1], "size": [4, 2, 1.5]},
        ])
        frames = load_frames(cfg)
        first = passthrough_detections(cfg, frames[0])
        second = passthrough_detections(cfg, frames[1])
        assert [(d.class_id, d.score) for d in first] == [(1, 0.4)]
        assert [(d.class_id, d.score) for d in second] == [(1, 0.4), (0, 1.0)]

    def test_malformed_entry(self):
        cfg = small_config(head__detections=[{"class": "Bus", "center": [1, 0, 0], "size": [1, 1, 1]}])
        with pytest.raises(ConfigError, match="malformed"):
            passthrough_detections(cfg, load_frames(cfg)[0])


class TestPointScores:
    def test_lookup_through_strided_voxels(self):
        spec = VoxelGridSpec(RangeSpec((0.0, 0.0, 0.0), (4.0, 4.0, 4.0)), (1.0, 1.0, 1.0))
        tensor = SparseTensor(np.array([[0, 0, 0], [1, 1, 1]]), np.zeros((2, 1)), 2, spec)
        xyz = np.array([[0.5, 0.5, 0.5], [3.5, 3.5, 3.5], [1.5, 0.5, 3.5]])
        assert point_scores(xyz, tensor, np.array([0.25, 0.75])).tolist() == [0.25, 0.75, -1.0]
