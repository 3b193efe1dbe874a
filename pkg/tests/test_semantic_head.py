"""Tests for semantic_head.py — foreground labels, scoring, re-weighting and the focal loss."""

import csv
import logging
import math

import numpy as np
import pytest

from radar_fusion.dataset_io import Box3D, RangeSpec
from radar_fusion.errors import DimensionError
from radar_fusion.geometry import rotation_z
from radar_fusion.nn_kernels import AffineLayer
from radar_fusion.semantic_head import (
    SegOutput,
    apply_semantic_head,
    assign_foreground_labels,
    init_semantic_head,
    reweight,
    score_voxels,
    segmentation_loss,
    total_loss,
    write_scores_csv,
)
from radar_fusion.voxel_grid import CentroidMap, SparseTensor, VoxelGridSpec


def zero_head(channels, hidden_layers=2):
    widths = [channels] * (hidden_layers + 1) + [1]
    return tuple(AffineLayer(np.zeros((o, i)), np.zeros(o)) for i, o in zip(widths[:-1], widths[1:]))


def inside_reference(point, box):
    """Explicit rotate-into-box-frame membership, one point at a time."""
    dx, dy, dz = (p - c for p, c in zip(point, box.center))
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    l, w, h = box.size
    return abs(lx) <= l / 2 and abs(ly) <= w / 2 and abs(dz) <= h / 2


class TestForegroundLabels:
    def test_matches_explicit_rotation(self):
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(100):
            box = Box3D(
                tuple(rng.uniform(-5, 5, 3)), tuple(rng.uniform(0.5, 4.0, 3)), rng.uniform(-math.pi, math.pi), 0
            )
            pts = np.array(box.center) + rng.uniform(-3, 3, size=(100, 3))
            got = assign_foreground_labels(pts, [box])
            for p, label in zip(pts, got):
                local = np.abs(box.to_local(p[None])[0]) - np.array(box.size) / 2
                if np.min(np.abs(local)) < 1e-9:
                    continue
                assert bool(label) == inside_reference(p, box)
                checked += 1
        assert checked > 9900

    def test_rigid_motion_keeps_labels(self):
        rng = np.random.default_rng(7)
        foreground = 0
        for _ in range(50):
            boxes = [
                Box3D(tuple(rng.uniform(-5, 5, 3)), tuple(rng.uniform(0.5, 4.0, 3)), rng.uniform(-math.pi, math.pi), 0)
                for _ in range(3)
            ]
            pts = np.concatenate([np.array(b.center) + rng.uniform(-3, 3, size=(100, 3)) for b in boxes])
            theta, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-20, 20, 3)
            rot = rotation_z(theta)
            moved_boxes = [
                Box3D(tuple(rot @ np.array(b.center) + shift), b.size, b.yaw + theta, b.class_id) for b in boxes
            ]
            margins = np.min(
                [np.min(np.abs(np.abs(b.to_local(pts)) - np.array(b.size) / 2), axis=1) for b in boxes], axis=0
            )
            clear = margins > 1e-6
            before = assign_foreground_labels(pts, boxes)
            after = assign_foreground_labels(pts @ rot.T + shift, moved_boxes)
            assert before[clear].tolist() == after[clear].tolist()
            foreground += int(before[clear].sum())
        assert foreground > 100

    def test_faces_count_as_inside(self):
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0, 0)
        assert assign_foreground_labels(np.array([[1.0, 0.0, 0.0], [1.0 + 1e-9, 0.0, 0.0]]), [box]).tolist() == [1, 0]

    def test_any_box_makes_foreground(self):
        boxes = [Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0), Box3D((5.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 1)]
        pts = np.array([[0.1, 0.0, 0.0], [5.2, 0.1, 0.0], [2.5, 0.0, 0.0]])
        assert assign_foreground_labels(pts, boxes).tolist() == [1, 1, 0]

    def test_accepts_centroid_map(self):
        cmap = CentroidMap(np.array([[0.0, 0.0, 0.0]]), np.array([1]), np.array([False]))
        assert assign_foreground_labels(cmap, [Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0)]).tolist() == [1]

    def test_no_boxes(self):
        assert assign_foreground_labels(np.zeros((3, 3)), []).tolist() == [0, 0, 0]


class TestScoring:
    def test_zero_mlp_scores_one_half(self):
        scores = score_voxels(np.random.default_rng(1).normal(size=(7, 4)), zero_head(4))
        assert scores.tolist() == [0.5] * 7

    def test_scores_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        mlp = init_semantic_head(rng, 4)
        scores = score_voxels(rng.normal(size=(50, 4)) * 100, mlp)
        assert np.all(scores > 0) and np.all(scores < 1)

    def test_head_shape(self):
        mlp = init_semantic_head(np.random.default_rng(3), 6, hidden_layers=2)
        assert [(l.c_in, l.c_out) for l in mlp] == [(6, 6), (6, 6), (6, 1)]

    def test_head_must_end_in_one_output(self):
        with pytest.raises(DimensionError):
            score_voxels(np.zeros((2, 3)), (AffineLayer(np.zeros((2, 3)), np.zeros(2)),))

    def test_reweight_scales_rows(self):
        out = reweight(np.array([[2.0, 4.0], [1.0, -1.0]]), np.array([0.5, 0.25]))
        assert out.tolist() == [[1.0, 2.0], [0.25, -0.25]]

    def test_reweight_row_mismatch(self):
        with pytest.raises(DimensionError):
            reweight(np.zeros((2, 2)), np.zeros(3))


class TestSegmentationLoss:
    def test_half_scores_all_positive(self):
        loss = segmentation_loss(np.full(10, 0.5), np.ones(10, dtype=int))
        assert loss.value == pytest.approx(0.043322, abs=1e-6)
        assert not loss.empty

    def test_permutation_invariant_bitwise(self):
        rng = np.random.default_rng(4)
        scores = rng.uniform(0.01, 0.99, 1000)
        labels = rng.integers(0, 2, 1000)
        perm = rng.permutation(1000)
        assert segmentation_loss(scores, labels).value == segmentation_loss(scores[perm], labels[perm]).value

    def test_empty_reports_zero_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="radar-fusion"):
            loss = segmentation_loss(np.zeros(0), np.zeros(0, dtype=int))
        assert loss.value == 0.0 and loss.empty
        assert "zero voxels" in caplog.text

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            segmentation_loss(np.zeros(2), np.zeros(3))

    def test_total_loss(self):
        assert total_loss(0.5, 2.0, alpha_seg=2.0, alpha_det=0.5) == 2.0
        assert total_loss(0.25) == 0.25


class TestApplyHead:
    @pytest.fixture
    def tensor(self):
        spec = VoxelGridSpec(RangeSpec((0.0, 0.0, 0.0), (4.0, 4.0, 4.0)), (1.0, 1.0, 1.0))
        coords = np.array([[0, 0, 0], [1, 2, 3], [3, 3, 3]])
        return SparseTensor(coords, np.arange(6, dtype=np.float64).reshape(3, 2), 1, spec)

    def test_zero_head_halves_features(self, tensor):
        cmap = CentroidMap(tensor.spec.voxel_centers(tensor.coords), np.ones(3, int), np.zeros(3, bool))
        out, seg = apply_semantic_head(tensor, cmap, zero_head(2))
        assert out.features.tolist() == (tensor.features * 0.5).tolist()
        assert out.coords.tobytes() == tensor.coords.tobytes()
        assert seg.labels is None and seg.loss is None

    def test_labels_and_loss_with_boxes(self, tensor):
        cmap = CentroidMap(tensor.spec.voxel_centers(tensor.coords), np.ones(3, int), np.zeros(3, bool))
        box = Box3D((3.5, 2.5, 1.5), (1.0, 1.0, 1.0), 0.0, 0)
        _, seg = apply_semantic_head(tensor, cmap, zero_head(2), gt_boxes=[box])
        assert seg.labels.tolist() == [0, 1, 0]
        expected = (0.25 * 0.25 * math.log(2) + 2 * 0.75 * 0.25 * math.log(2)) / 3
        assert seg.loss.value == pytest.approx(expected, rel=1e-9)


class TestScoresCsv:
    def test_rows(self, tmp_path):
        spec = VoxelGridSpec(RangeSpec((0.0, 0.0, 0.0), (4.0, 4.0, 4.0)), (1.0, 1.0, 1.0))
        x = SparseTensor(np.array([[0, 1, 0], [1, 1, 1]]), np.zeros((2, 1)), 2, spec)
        seg = SegOutput(np.array([0.25, 0.75]), np.array([0, 1]), np.zeros((2, 1)))
        path = tmp_path / "sub" / "scores.csv"
        write_scores_csv(path, x, seg)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["z", "y", "x", "stride", "score", "label"]
        assert rows[1] == ["0", "1", "0", "2", "0.25", "0"]
        assert rows[2] == ["1", "1", "1", "2", "0.75", "1"]

    def test_unlabeled_rows(self, tmp_path):
        spec = VoxelGridSpec(RangeSpec((0.0, 0.0, 0.0), (4.0, 4.0, 4.0)), (1.0, 1.0, 1.0))
        x = SparseTensor(np.array([[0, 0, 0]]), np.zeros((1, 1)), 1, spec)
        path = tmp_path / "scores.csv"
        write_scores_csv(path, x, SegOutput(np.array([0.5]), None, np.zeros((1, 1))))
        assert path.read_text().splitlines()[1].endswith(",-1")
