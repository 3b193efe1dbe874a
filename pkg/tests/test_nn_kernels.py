"""Tests for nn_kernels.py — layers, sampler, focal loss, finite differences, weights files."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from radar_fusion.errors import DataError, DimensionError
from radar_fusion.nn_kernels import (
    AffineLayer,
    FeaturePyramid,
    affine_forward,
    bilinear_sample,
    bilinear_sample_grad,
    bilinear_sample_many,
    finite_diff_grad,
    finite_diff_jacobian,
    focal_loss,
    fold_batchnorm,
    init_affine,
    init_mlp,
    max_relative_error,
    mlp_forward,
    read_weights,
    sigmoid,
    softmax,
    write_weights,
)
from tests.oracles import bilinear_reference


class TestAffine:
    def test_forward(self):
        layer = AffineLayer(np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([0.5, 0.0]))
        np.testing.assert_allclose(affine_forward(layer, [1.0, 1.0]), [3.5, -1.0])

    def test_shape_mismatch(self):
        layer = init_affine(np.random.default_rng(0), 3, 2)
        with pytest.raises(DimensionError):
            affine_forward(layer, np.zeros(4))

    def test_bias_must_match(self):
        with pytest.raises(DimensionError):
            AffineLayer(np.zeros((2, 3)), np.zeros(3))

    def test_zero_init(self):
        layer = init_affine(np.random.default_rng(0), 3, 2, zero=True)
        assert not layer.weight.any() and not layer.bias.any()

    def test_fold_batchnorm_matches_explicit(self):
        rng = np.random.default_rng(1)
        w, b = rng.normal(size=(4, 3)), rng.normal(size=4)
        gamma, beta = rng.uniform(0.5, 2, 4), rng.normal(size=4)
        mean, var = rng.normal(size=4), rng.uniform(0.1, 2, 4)
        x = rng.normal(size=(5, 3))
        explicit = gamma * (x @ w.T + b - mean) / np.sqrt(var + 1e-3) + beta
        np.testing.assert_allclose(affine_forward(fold_batchnorm(w, b, gamma, beta, mean, var), x), explicit)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**32 - 1))
    def test_affine_combination(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        layer = init_affine(rng, 5, 3)
        layer = AffineLayer(layer.weight, rng.normal(size=3))
        x, y = rng.normal(size=5), rng.normal(size=5)
        lhs = affine_forward(layer, alpha * x + beta * y)
        rhs = alpha * affine_forward(layer, x) + beta * affine_forward(layer, y) - (alpha + beta - 1) * layer.bias
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


class TestActivations:
    def test_sigmoid_strictly_inside_unit_interval(self):
        s = sigmoid(np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0]))
        assert np.all(s > 0) and np.all(s < 1)
        assert s[2] == 0.5

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, 6, elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_softmax_shift_invariant(self, z, c):
        np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-12)
        assert softmax(z).sum() == pytest.approx(1.0)

    def test_softmax_large_logits(self):
        out = softmax(np.array([1000.0, 1000.0]))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_softmax_spot_value(self):
        np.testing.assert_allclose(softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75], rtol=0, atol=1e-12)

    def test_two_layer_mlp_is_composition(self):
        rng = np.random.default_rng(3)
        first, second = init_affine(rng, 4, 6), init_affine(rng, 6, 2)
        first = AffineLayer(first.weight, rng.normal(size=6))
        x = rng.normal(size=(10, 4))
        by_hand = affine_forward(second, np.maximum(affine_forward(first, x), 0.0))
        np.testing.assert_array_equal(mlp_forward((first, second), x), by_hand)

    def test_mlp_final_layer_linear(self):
        layers = (
            AffineLayer(np.eye(2), np.zeros(2)),
            AffineLayer(np.array([[1.0, 1.0]]), np.array([0.0])),
        )
        # ReLU only between layers: -3 is clipped, the final sum may stay negative
        assert mlp_forward(layers, [-3.0, 2.0]).tolist() == [2.0]
        neg = (AffineLayer(np.array([[-1.0]]), np.array([0.0])),)
        assert mlp_forward(neg, [2.0]).tolist() == [-2.0]

    def test_init_mlp_widths(self):
        layers = init_mlp(np.random.default_rng(0), [8, 8, 8, 1])
        assert [(l.c_in, l.c_out) for l in layers] == [(8, 8), (8, 8), (8, 1)]


class TestBilinearSampler:
    def test_matches_four_neighbor_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(10000 // 100):
            h, w, c = rng.integers(1, 9, size=3)
            fmap = rng.normal(size=(h, w, c))
            coords = rng.uniform(-0.2, 1.2, size=(100, 2))
            fast = bilinear_sample_many(fmap, coords)
            for (x, y), got in zip(coords, fast):
                np.testing.assert_allclose(got, bilinear_reference(fmap, x, y), atol=1e-12)

    def test_exact_at_pixel_centers(self):
        rng = np.random.default_rng(1)
        fmap = rng.normal(size=(8, 16, 3))
        for i in range(8):
            for j in range(16):
                got = bilinear_sample(fmap, ((j + 0.5) / 16, (i + 0.5) / 8))
                assert got.tolist() == fmap[i, j].tolist()

    def test_zero_padding_far_outside(self):
        fmap = np.ones((4, 4, 2))
        assert bilinear_sample(fmap, (-1.0, 0.5)).tolist() == [0.0, 0.0]
        assert bilinear_sample(fmap, (0.5, 2.0)).tolist() == [0.0, 0.0]

    def test_half_weight_at_border(self):
        # x = 0 sits half a pixel left of column 0
        fmap = np.ones((4, 4, 1))
        assert bilinear_sample(fmap, (0.0, 0.5 + 0.5 / 4))[0] == pytest.approx(0.5)

    def test_constant_map_interior(self):
        fmap = np.full((6, 6, 2), 3.0)
        np.testing.assert_allclose(bilinear_sample_many(fmap, np.array([[0.3, 0.7], [0.5, 0.5]])), 3.0)

    def test_empty_coords(self):
        assert bilinear_sample_many(np.ones((2, 2, 3)), np.zeros((0, 2))).shape == (0, 3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        fmap = rng.normal(size=(6, 7, 3))
        checked = 0
        while checked < 50:
            coord = rng.uniform(0.05, 0.95, size=2)
            s = coord * [7, 6] - 0.5
            if np.min(np.abs(s - np.round(s))) < 1e-3:
                continue
            _, gx, gy = bilinear_sample_grad(fmap, coord)
            jac = finite_diff_jacobian(lambda c: bilinear_sample(fmap, c), coord, h=1e-7)
            np.testing.assert_allclose(jac[:, 0], gx[0], atol=1e-5)
            np.testing.assert_allclose(jac[:, 1], gy[0], atol=1e-5)
            checked += 1


class TestPyramid:
    def test_shapes_and_channels(self):
        pyr = FeaturePyramid((np.zeros((4, 6, 3)), np.zeros((2, 3, 3))))
        assert pyr.n_levels == 2
        assert pyr.shapes == [(4, 6, 3), (2, 3, 3)]
        assert pyr.channels == 3

    def test_rejects_nan(self):
        bad = np.zeros((2, 2, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(DimensionError):
            FeaturePyramid((bad,))

    def test_mixed_channels(self):
        with pytest.raises(DimensionError):
            _ = FeaturePyramid((np.zeros((2, 2, 1)), np.zeros((1, 1, 2)))).channels


class TestFocalLoss:
    def test_half_probability_positive(self):
        assert focal_loss(0.5, 1) == pytest.approx(0.043322, abs=1e-6)

    def test_perfect_predictions_near_zero(self):
        assert focal_loss(1.0, 1) < 1e-4
        assert focal_loss(0.0, 0) < 1e-4

    def test_clamped_for_certain_mistakes(self):
        assert math.isfinite(focal_loss(0.0, 1))
        assert math.isfinite(focal_loss(1.0, 0))

    def test_vectorized(self):
        out = focal_loss(np.array([0.5, 0.5]), np.array([1, 0]))
        assert out.shape == (2,)
        assert out[1] == pytest.approx(0.75 * 0.25 * math.log(2))

    def test_gamma_zero_is_half_cross_entropy(self):
        p = np.linspace(0.01, 0.99, 99)
        np.testing.assert_allclose(focal_loss(p, np.ones(99, int), alpha=0.5, gamma=0.0), -0.5 * np.log(p), rtol=1e-12)
        np.testing.assert_allclose(
            focal_loss(p, np.zeros(99, int), alpha=0.5, gamma=0.0), -0.5 * np.log(1.0 - p), rtol=1e-12
        )

    def test_non_negative_and_monotone(self):
        p = np.linspace(0.0, 1.0, 2001)
        pos = focal_loss(p, np.ones_like(p, dtype=int))
        neg = focal_loss(p, np.zeros_like(p, dtype=int))
        assert np.all(pos >= 0) and np.all(neg >= 0)
        assert np.all(np.diff(pos) <= 0)
        assert np.all(np.diff(neg) >= 0)


class TestFiniteDifferences:
    def test_gradient_of_quadratic(self):
        x = np.array([1.0, -2.0, 0.5])
        grad = finite_diff_grad(lambda v: float(np.sum(v**2)), x)
        np.testing.assert_allclose(grad, 2 * x, atol=1e-8)

    def test_jacobian_of_linear_map(self):
        a = np.random.default_rng(0).normal(size=(4, 3))
        jac = finite_diff_jacobian(lambda v: a @ v, np.zeros(3))
        np.testing.assert_allclose(jac, a, atol=1e-9)

    def test_max_relative_error(self):
        assert max_relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
        assert max_relative_error(np.zeros(2), np.zeros(2)) == 0.0


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "stem.weight": rng.normal(size=(3, 3, 3, 2, 4)).astype(np.float32).astype(np.float64),
            "head.0.bias": np.arange(4, dtype=np.float64),
        }
        path = tmp_path / "w.rfw"
        write_weights(path, tensors)
        back = read_weights(path)
        assert list(back) == list(tensors)
        for name in tensors:
            np.testing.assert_array_equal(back[name], tensors[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.rfw"
        path.write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(DataError, match="magic"):
            read_weights(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "w.rfw"
        write_weights(path, {"a": np.ones((10, 10))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            read_weights(path)
