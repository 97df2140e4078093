import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tanhwarp.errors import DegenerateLandmarks, OutOfDomain
from tanhwarp.geometry import (
    TEMPLATE_POINTS,
    SimilarityTransform,
    atanh_map,
    estimate_similarity,
    face_rect_corners,
    tanh_map,
)

from conftest import random_transform


class TestEstimateSimilarity:
    def test_template_landmarks_give_identity(self):
        t = estimate_similarity(TEMPLATE_POINTS)
        assert t.scale == pytest.approx(1.0, abs=1e-12)
        assert t.rotation == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)

    def test_scaled_translated_landmarks(self):
        # landmarks p_k = 100*t_k + (200, 200); the inverse map is
        # p -> 0.01*p - (2, 2), solved by hand from the similarity structure
        landmarks = 100.0 * TEMPLATE_POINTS + np.array([200.0, 200.0])
        t = estimate_similarity(landmarks)
        assert t.scale == pytest.approx(0.01, rel=1e-12)
        assert t.rotation == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(t.translation, [-2.0, -2.0], atol=1e-12)
        np.testing.assert_allclose(t.apply(landmarks), TEMPLATE_POINTS, atol=1e-12)

    def test_rotated_landmarks(self):
        # landmarks p_k = R(30 deg) t_k  ->  estimate recovers R(-30 deg)
        ang = np.deg2rad(30.0)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        landmarks = TEMPLATE_POINTS @ rot.T
        t = estimate_similarity(landmarks)
        assert t.rotation == pytest.approx(-ang, abs=1e-12)
        assert t.scale == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)

    def test_residual_is_zero_for_exact_similarity(self, rng):
        s = random_transform(rng)
        landmarks = s.apply(TEMPLATE_POINTS)
        t = estimate_similarity(landmarks)
        np.testing.assert_allclose(t.apply(landmarks), TEMPLATE_POINTS, atol=1e-9)

    def test_recovers_random_similarities(self):
        # template fidelity: landmarks = S(t_k) must yield T = S^{-1}
        rng = np.random.default_rng(7)
        for _ in range(100):
            s = random_transform(rng)
            t = estimate_similarity(s.apply(TEMPLATE_POINTS))
            s_inv = s.invert()
            assert t.scale == pytest.approx(s_inv.scale, rel=1e-6)
            delta = (t.rotation - s_inv.rotation + np.pi) % (2 * np.pi) - np.pi
            assert abs(delta) < 1e-6 * max(1.0, abs(s_inv.rotation))
            np.testing.assert_allclose(
                t.translation, s_inv.translation, rtol=1e-6, atol=1e-9
            )

    def test_least_squares_beats_perturbations(self, rng):
        # the closed form should not be improved by nudging its parameters
        landmarks = random_transform(rng).apply(TEMPLATE_POINTS)
        landmarks += rng.normal(0, 0.5, landmarks.shape)
        t = estimate_similarity(landmarks)

        def residual(tr):
            return np.sum((tr.apply(landmarks) - TEMPLATE_POINTS) ** 2)

        base = residual(t)
        for _ in range(50):
            tweaked = SimilarityTransform(
                t.scale * (1 + rng.normal(0, 1e-3)),
                t.rotation + rng.normal(0, 1e-3),
                t.translation + rng.normal(0, 1e-3, 2),
            )
            assert residual(tweaked) >= base - 1e-12

    def test_degenerate_all_same_point(self):
        with pytest.raises(DegenerateLandmarks):
            estimate_similarity(np.ones((5, 2)))

    def test_degenerate_collinear(self):
        pts = np.stack([np.arange(5.0), np.zeros(5)], axis=1)
        with pytest.raises(DegenerateLandmarks):
            estimate_similarity(pts)

    def test_rejects_wrong_shape_and_nonfinite(self):
        with pytest.raises(DegenerateLandmarks):
            estimate_similarity(np.zeros((4, 2)))
        bad = TEMPLATE_POINTS.copy()
        bad[0, 0] = np.nan
        with pytest.raises(DegenerateLandmarks):
            estimate_similarity(bad)


class TestApplyInvert:
    def test_identity_apply(self):
        t = SimilarityTransform.identity()
        np.testing.assert_allclose(t.apply([3.0, 4.0]), [3.0, 4.0])

    def test_scale_translate(self):
        t = SimilarityTransform(2.0, 0.0, [1.0, 0.0])
        np.testing.assert_allclose(t.apply([1.0, 1.0]), [3.0, 2.0])

    def test_rotation_90deg(self):
        t = SimilarityTransform(1.0, np.pi / 2, [0.0, 0.0])
        np.testing.assert_allclose(t.apply([1.0, 0.0]), [0.0, 1.0], atol=1e-12)

    def test_invert_identity(self):
        inv = SimilarityTransform.identity().invert()
        assert inv.scale == pytest.approx(1.0)
        np.testing.assert_allclose(inv.translation, 0.0)

    def test_invert_closed_form(self):
        t = SimilarityTransform(2.0, 0.0, [4.0, 0.0])
        inv = t.invert()
        assert inv.scale == pytest.approx(0.5)
        assert inv.rotation == pytest.approx(0.0)
        np.testing.assert_allclose(inv.translation, [-2.0, 0.0])

    def test_round_trip_100_random(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            t = random_transform(rng)
            pts = rng.uniform(-100, 100, (20, 2))
            back = t.invert().apply(t.apply(pts))
            worst = max(worst, np.max(np.abs(back - pts)))
        assert worst < 1e-9

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            SimilarityTransform(0.0, 0.0, [0.0, 0.0])


class TestFaceRectCorners:
    def test_identity_unit_square(self):
        corners = face_rect_corners(SimilarityTransform.identity())
        np.testing.assert_allclose(
            corners, [[-1, -1], [1, -1], [1, 1], [-1, 1]], atol=1e-12
        )

    def test_scaled_translated(self):
        # T(p) = 0.01 p + (-2, -2)  =>  T^{-1}(q) = 100 (q + 2)
        t = SimilarityTransform(0.01, 0.0, [-2.0, -2.0])
        corners = face_rect_corners(t)
        np.testing.assert_allclose(
            corners, [[100, 100], [300, 100], [300, 300], [100, 300]], rtol=1e-9
        )

    def test_sides_equal_for_random_transforms(self, rng):
        for _ in range(50):
            corners = face_rect_corners(random_transform(rng))
            sides = [np.linalg.norm(corners[(i + 1) % 4] - corners[i]) for i in range(4)]
            np.testing.assert_allclose(sides, sides[0], rtol=1e-6)


class TestTanhMaps:
    def test_origin_fixed_point(self):
        np.testing.assert_allclose(tanh_map([0.0, 0.0]), [0.0, 0.0])

    def test_known_values(self):
        np.testing.assert_allclose(tanh_map([1.0, 1.0]), [np.tanh(1.0)] * 2, rtol=1e-12)
        assert np.tanh(1.0) == pytest.approx(0.7615941559557649)
        out = tanh_map([-2.0, 0.5])
        np.testing.assert_allclose(out, [-0.9640275800758169, 0.46211715726000974], rtol=1e-12)

    def test_atanh_out_of_domain(self):
        with pytest.raises(OutOfDomain):
            atanh_map([1.0, 0.0])
        with pytest.raises(OutOfDomain):
            atanh_map([0.0, -1.5])

    @given(
        st.floats(-5, 5, allow_nan=False),
        st.floats(-5, 5, allow_nan=False),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, x, y):
        p = np.array([x, y])
        np.testing.assert_allclose(atanh_map(tanh_map(p)), p, atol=1e-9)

    # |x| <= 18.5 is the float64-representable range: beyond it tanh rounds
    # to exactly 1.0 even though the mathematical value is strictly below
    @given(st.floats(-18.5, 18.5, allow_nan=False), st.floats(-18.5, 18.5, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_output_strictly_inside_unit_square(self, x, y):
        out = tanh_map([x, y])
        assert np.all(np.abs(out) < 1.0)

    def test_far_pixels_stay_finite_and_bounded(self):
        # peripheral retention: any finite source point lands at a finite
        # warped coordinate with magnitude at most 1
        out = tanh_map([1e12, -1e300])
        assert np.all(np.isfinite(out))
        assert np.all(np.abs(out) <= 1.0)

    @given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=2, max_size=20))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, xs):
        xs = np.sort(np.array(xs))
        ys = tanh_map(xs)
        assert np.all(np.diff(ys) >= 0)
