"""Feature extraction and epipolar correlation volume contracts."""

import numpy as np
import pytest

from densify.encoding import (
    MIN_HYPOTHESIS_DEPTH,
    BadDimensions,
    CorrelationVolume,
    DescriptorEncoder,
    FeatureGrid,
    HypothesisSet,
    OutOfBounds,
    build_correlation_volume,
    correlation_score,
)
from densify.geometry import CameraIntrinsics, DepthMap, PixelCoord, RigidPose, project_point

K8 = CameraIntrinsics(fx=8.0, fy=8.0, cx=2.0, cy=2.0, width=4, height=4)


def random_features(rng, h, w, f):
    return FeatureGrid(rng.standard_normal((h, w, f)))


class TestFeatureGrid:
    def test_bilinear_sample_interior(self):
        g = FeatureGrid(np.arange(8.0).reshape(2, 2, 2))
        vals, inside = g.sample(np.array(0.5), np.array(0.5))
        assert inside
        assert np.allclose(vals, [(0 + 2 + 4 + 6) / 4, (1 + 3 + 5 + 7) / 4])

    def test_out_of_bounds_zero(self):
        g = FeatureGrid(np.ones((3, 3, 2)))
        vals, inside = g.sample(np.array(-0.1), np.array(1.0))
        assert not inside
        assert np.array_equal(vals, [0.0, 0.0])

    def test_grid_corner_exact(self):
        rng = np.random.default_rng(0)
        g = random_features(rng, 4, 5, 3)
        vals, inside = g.sample(np.array(4.0), np.array(3.0))
        assert inside
        assert np.allclose(vals, g.values[3, 4])

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            FeatureGrid(np.full((2, 2, 1), np.nan))


class TestDescriptorEncoder:
    def test_shape_contract(self):
        enc = DescriptorEncoder()
        g = enc.extract_features(np.random.default_rng(0).random((64, 64, 3)))
        assert (g.height, g.width, g.channels) == (8, 8, 12)

    def test_bad_dimensions(self):
        with pytest.raises(BadDimensions):
            DescriptorEncoder().extract_features(np.zeros((60, 64, 3)))

    def test_constant_image_constant_features(self):
        enc = DescriptorEncoder()
        g = enc.extract_features(np.full((64, 64, 3), 0.5))
        interior = g.values[2:-2, 2:-2]
        assert np.allclose(interior, interior[0, 0], atol=1e-9)

    def test_determinism(self):
        img = np.random.default_rng(1).random((64, 64, 3))
        enc = DescriptorEncoder()
        assert np.array_equal(enc.extract_features(img).values,
                              enc.extract_features(img).values)

    def test_monocular_pyramid_shapes(self):
        pyr = DescriptorEncoder().extract_monocular(np.zeros((64, 64, 3)))
        assert (pyr.level2.height, pyr.level2.width) == (32, 32)
        assert (pyr.level4.height, pyr.level4.width) == (16, 16)
        assert (pyr.level8.height, pyr.level8.width) == (8, 8)


class TestHypothesisSet:
    def test_default_contract(self):
        hyp = HypothesisSet()
        assert hyp.count == 41 and hyp.spacing == 0.1
        offs = hyp.offsets
        assert len(offs) == 41
        assert np.allclose(offs, -offs[::-1])  # symmetric about zero
        assert np.allclose(np.diff(offs), 0.1)
        assert np.isclose(offs[0], -2.0) and np.isclose(offs[-1], 2.0)
        assert hyp.count * 9 == 369

    def test_even_count_rejected(self):
        with pytest.raises(ValueError):
            HypothesisSet(count=40)

    def test_nonpositive_spacing_rejected(self):
        with pytest.raises(ValueError):
            HypothesisSet(spacing=0.0)


class TestCorrelationScore:
    def test_all_ones(self):
        g = FeatureGrid(np.ones((2, 2, 4)))
        assert correlation_score(g, g, PixelCoord(0, 0), PixelCoord(1, 1)) == 2.0

    def test_orthogonal_vectors(self):
        ft = FeatureGrid(np.array([[[1.0, 0.0]]]))
        fs = FeatureGrid(np.array([[[0.0, 1.0]]]))
        assert correlation_score(ft, fs, PixelCoord(0, 0), PixelCoord(0, 0)) == 0.0

    def test_dot_product_oracle(self):
        ft = FeatureGrid(np.array([[[1.0, 2.0]]]))
        fs = FeatureGrid(np.array([[[3.0, 4.0]]]))
        got = correlation_score(ft, fs, PixelCoord(0, 0), PixelCoord(0, 0))
        assert np.isclose(got, 11.0 / np.sqrt(2.0), atol=1e-12)

    def test_target_out_of_bounds(self):
        g = FeatureGrid(np.ones((2, 2, 1)))
        with pytest.raises(OutOfBounds):
            correlation_score(g, g, PixelCoord(5, 0), PixelCoord(0, 0))


class TestCorrelationVolume:
    def build(self, P, seed=0):
        rng = np.random.default_rng(seed)
        Ft = random_features(rng, 4, 4, 6)
        Fs = random_features(rng, 4, 4, 6)
        depth = DepthMap(1.0 + rng.random((4, 4)))
        return Ft, Fs, depth, build_correlation_volume(Ft, Fs, depth, K8, P)

    def test_shape_and_flatten(self):
        _, _, _, vol = self.build(RigidPose.identity())
        assert vol.scores.shape == (4, 4, 41, 3, 3)
        assert vol.flattened().shape == (4, 4, 369)
        assert np.array_equal(vol.flattened()[1, 2].reshape(41, 3, 3), vol.scores[1, 2])

    def test_identity_pose_constant_along_hypotheses(self):
        _, _, _, vol = self.build(RigidPose.identity())
        spread = vol.scores.max(axis=2) - vol.scores.min(axis=2)
        assert spread.max() < 1e-9

    def test_entries_match_independent_scores_exactly(self):
        P = RigidPose(np.eye(3), np.array([0.05, -0.02, 0.01]))
        Ft, Fs, depth, vol = self.build(P, seed=3)
        hyp = HypothesisSet()
        for i in range(4):
            for j in range(4):
                for k in (0, 13, 20, 40):
                    d = max(depth.values[i, j] + hyp.offsets[k], MIN_HYPOTHESIS_DEPTH)
                    q_s, _ = project_point(PixelCoord(j, i), d, K8, P)
                    for a in (-1, 0, 1):
                        for b in (-1, 0, 1):
                            ref = correlation_score(
                                Ft, Fs, PixelCoord(j, i),
                                PixelCoord(q_s.u + b, q_s.v + a),
                            )
                            assert vol.scores[i, j, k, a + 1, b + 1] == ref

    def test_hypothesis_depth_clamped(self):
        # With depth 0.1 the most negative offsets would be far below zero;
        # the clamp means they all alias to d_min and share a projection.
        rng = np.random.default_rng(4)
        Ft = random_features(rng, 4, 4, 6)
        Fs = random_features(rng, 4, 4, 6)
        depth = DepthMap(np.full((4, 4), 0.1))
        P = RigidPose(np.eye(3), np.array([0.05, 0.0, 0.0]))
        vol = build_correlation_volume(Ft, Fs, depth, K8, P)
        offs = HypothesisSet().offsets
        clamped = np.nonzero(0.1 + offs <= MIN_HYPOTHESIS_DEPTH)[0]
        assert len(clamped) > 1
        for k in clamped[1:]:
            assert np.array_equal(vol.scores[..., k, :, :], vol.scores[..., clamped[0], :, :])

    def test_behind_camera_entries_zero(self):
        rng = np.random.default_rng(5)
        Ft = random_features(rng, 4, 4, 6)
        Fs = random_features(rng, 4, 4, 6)
        depth = DepthMap(np.full((4, 4), 1.0))
        P = RigidPose(np.eye(3), np.array([0.0, 0.0, -10.0]))  # everything behind
        vol = build_correlation_volume(Ft, Fs, depth, K8, P)
        assert np.array_equal(vol.scores, np.zeros_like(vol.scores))

    def test_scores_validation(self):
        with pytest.raises(ValueError):
            CorrelationVolume(np.zeros((2, 2, 5, 3, 2)), HypothesisSet(count=5))


class TestDiscriminability:
    def test_descriptor_argmax_tracks_true_error(self, tier128_views):
        """On a textured committed scene, the correlation argmax recovers the
        known depth error for well over half of the valid cells."""
        v = tier128_views
        hyp = HypothesisSet()
        gt8 = v["tgt_depth"].values[::8, ::8]
        valid8 = v["tgt_depth"].valid[::8, ::8]
        for shift in (0.3, -0.45):
            current = DepthMap(np.where(valid8, gt8 + shift, 3.0),
                               np.ones_like(valid8))
            vol = build_correlation_volume(v["Ft"], v["Fs"], current,
                                           v["K"].scaled(8), v["P_t_to_s"])
            arg = hyp.offsets[np.argmax(vol.scores[..., 1, 1], axis=2)]
            true_err = gt8 - current.values
            ok = np.abs(arg - true_err) <= hyp.spacing + 1e-12
            assert ok[valid8].mean() > 0.5
