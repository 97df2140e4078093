import numpy as np
import pytest

from tanhwarp.errors import DegenerateBox
from tanhwarp.geometry import SimilarityTransform, estimate_similarity, TEMPLATE_POINTS
from tanhwarp.sampler import (
    Box,
    bilinear_sample,
    box_iou,
    from_network_frame,
    labels_to_network_frame,
    pad_box,
    roi_align,
    roi_tanh_dewarp,
    roi_tanh_warp,
    to_network_frame,
)

from conftest import random_transform, smooth_image


def oracle_bilinear(img, x, y, policy):
    """Scalar reference bilinear interpolation, written independently."""
    h, w, c = img.shape
    cx, cy = x - 0.5, y - 0.5
    x0, y0 = int(np.floor(cx)), int(np.floor(cy))
    fx, fy = cx - x0, cy - y0
    acc = np.zeros(c)
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        xi, yi = x0 + dx, y0 + dy
        if 0 <= xi < w and 0 <= yi < h:
            acc += wgt * img[yi, xi]
        elif policy == "replicate":
            acc += wgt * img[min(max(yi, 0), h - 1), min(max(xi, 0), w - 1)]
    return acc


def oracle_roi_align(feat, box, p):
    """Per-cell reference for RoI align: one bilinear sample per bin center."""
    h, w, c = feat.shape
    bx0, by0, bx1, by1 = box.x0 * w, box.y0 * h, box.x1 * w, box.y1 * h
    out = np.zeros((p, p, c))
    for i in range(p):
        for j in range(p):
            cx = bx0 + (j + 0.5) * (bx1 - bx0) / p
            cy = by0 + (i + 0.5) * (by1 - by0) / p
            out[i, j] = oracle_bilinear(feat, cx, cy, "replicate")
    return out


class TestBilinearSample:
    def test_constant_image(self, rng):
        img = np.full((5, 7, 2), 3.25, dtype=np.float32)
        for _ in range(20):
            p = rng.uniform(0.5, [6.5, 4.5])
            np.testing.assert_allclose(bilinear_sample(img, p), 3.25, rtol=1e-6)

    def test_2x2_center(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
        np.testing.assert_allclose(bilinear_sample(img, (1.0, 1.0)), [1.5])

    def test_far_outside_zero_fill(self):
        img = np.ones((4, 4, 1))
        np.testing.assert_allclose(bilinear_sample(img, (100.0, -50.0), "zero"), [0.0])

    def test_matches_oracle_both_policies(self, rng):
        img = rng.uniform(0, 1, (6, 5, 3)).astype(np.float32)
        for policy in ("zero", "replicate"):
            for _ in range(100):
                x, y = rng.uniform(-2, 8), rng.uniform(-2, 9)
                np.testing.assert_allclose(
                    bilinear_sample(img, (x, y), policy),
                    oracle_bilinear(img, x, y, policy),
                    atol=1e-6,
                )


class TestRoiTanhWarp:
    def test_constant_source(self):
        img = np.full((40, 40, 3), 0.6, dtype=np.float32)
        t = SimilarityTransform(0.1, 0.2, [-2.0, -2.0])
        out = roi_tanh_warp(img, t, (16, 16), policy="replicate")
        np.testing.assert_allclose(out, 0.6, rtol=1e-6)

    def test_center_pixel_is_rect_center(self, rng):
        img = smooth_image(rng, 60, 60)
        t = SimilarityTransform(1 / 15.0, 0.0, [-2.0, -2.0])  # rect center (30, 30)
        out = roi_tanh_warp(img, t, (32, 32))
        center_src = t.invert().apply([0.0, 0.0])
        expected = bilinear_sample(img, center_src)
        # the 32x32 output has no pixel centered exactly at the frame middle;
        # average the four central pixels of the even-sized output
        got = out[15:17, 15:17].mean(axis=(0, 1))
        np.testing.assert_allclose(got, expected, atol=0.02)

    def test_rect_corner_lands_at_tanh1_fraction(self):
        # an impulse at face coords (1, 1) must appear at warped coords
        # (tanh 1, tanh 1), i.e. ~88% of the way from center to corner
        h = w = 201
        t = SimilarityTransform(1 / 50.0, 0.0, [-2.0, -2.0])  # rect center (100,100), half-side 50
        img = np.zeros((h, w, 1), dtype=np.float32)
        corner = t.invert().apply([1.0, 1.0])  # (150, 150)
        img[int(corner[1]), int(corner[0])] = 1.0
        out = roi_tanh_warp(img, t, (256, 256))
        iy, ix = np.unravel_index(np.argmax(out[:, :, 0]), out.shape[:2])
        expect = (np.tanh(1.0) + 1) / 2 * 256  # pixel coordinate of tanh(1)
        assert abs(ix + 0.5 - expect) < 1.5
        assert abs(iy + 0.5 - expect) < 1.5

    def test_warp_locality_zero_fill(self, rng):
        # with zero-fill, output pixels that sample inside the image are
        # unaffected by any content beyond its border: embed the image in a
        # larger canvas of junk and warp with the offset-adjusted transform
        img = smooth_image(rng, 30, 30)
        t = SimilarityTransform(1 / 8.0, 0.3, [-1.5, -1.9])
        out = roi_tanh_warp(img, t, (24, 24), policy="zero")

        pad = 10
        junk = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), constant_values=0.9)
        offset = t.matrix @ np.array([pad, pad], dtype=np.float64)
        t_pad = SimilarityTransform(t.scale, t.rotation, t.translation - offset)
        out_pad = roi_tanh_warp(junk, t_pad, (24, 24), policy="zero")

        # mask of output pixels whose source samples land strictly inside img
        gx, gy = np.meshgrid(2 * (np.arange(24) + 0.5) / 24 - 1, 2 * (np.arange(24) + 0.5) / 24 - 1)
        src = t.invert().apply(np.stack([np.arctanh(gx), np.arctanh(gy)], axis=-1))
        inside = (
            (src[..., 0] > 1) & (src[..., 0] < 29) & (src[..., 1] > 1) & (src[..., 1] < 29)
        )
        assert inside.any() and not inside.all()
        np.testing.assert_allclose(out[inside], out_pad[inside], atol=1e-5)

    def test_resolution_amplification_vs_whole_image_linear_map(self):
        # the warp shows the whole image; so does an aspect-preserving linear
        # rescale. The central 10% of the face rect must occupy a strictly
        # larger output fraction under the warp than under that linear map.
        src_h = src_w = 400
        t = SimilarityTransform(1 / 50.0, 0.0, [-4.0, -4.0])  # rect half-side 50 px @ (200,200)
        out = 128
        # warp: face coords +-0.1 -> warped coords +-tanh(0.1); fraction of output area
        warp_frac = (np.tanh(0.1)) ** 2  # of the [-1,1]^2 frame
        lin_frac = (0.1 * 50 / (src_w / 2)) ** 2  # same patch under full-image rescale
        assert warp_frac > lin_frac
        # Jacobian bound: inside the rect the area scale is >= sech(1)^4 of center
        xs = np.linspace(-1, 1, 41)
        jac = (1 / np.cosh(xs) ** 2) ** 2
        assert np.all(np.outer(jac, jac) >= (1 / np.cosh(1.0) ** 2) ** 4 - 1e-12)

    def test_all_finite_output_for_extreme_transform(self):
        img = np.ones((10, 10, 1), dtype=np.float32)
        t = SimilarityTransform(100.0, 1.0, [500.0, -500.0])
        out = roi_tanh_warp(img, t, (8, 8))
        assert np.all(np.isfinite(out))


class TestRoiTanhDewarp:
    def test_constant_round_trip(self):
        scores = np.full((16, 16, 4), 0.25, dtype=np.float32)
        t = SimilarityTransform(0.05, -0.1, [-3.0, -1.0])
        out = roi_tanh_dewarp(scores, t, (50, 60))
        assert out.shape == (50, 60, 4)
        np.testing.assert_allclose(out, 0.25, rtol=1e-6)

    def test_smooth_image_round_trip_central_mae(self, rng):
        img = smooth_image(rng, 120, 120)
        t = SimilarityTransform(1 / 30.0, 0.05, [-2.0, -2.0])
        warped = roi_tanh_warp(img, t, (128, 128), policy="replicate")
        back = roi_tanh_dewarp(warped, t, (120, 120))
        px = np.arange(120) + 0.5
        gx, gy = np.meshgrid(px, px)
        face = t.apply(np.stack([gx, gy], axis=-1))
        central = np.max(np.abs(face), axis=-1) <= 0.5
        mae = np.abs(back - img)[central].mean()
        assert mae < 0.02

    def test_impulse_at_warped_center_dewarps_to_rect_center(self):
        scores = np.zeros((64, 64, 1), dtype=np.float32)
        scores[31:33, 31:33] = 1.0  # the frame center sits between these pixels
        t = SimilarityTransform(1 / 20.0, 0.0, [-2.5, -2.5])  # rect center (50, 50)
        out = roi_tanh_dewarp(scores, t, (100, 100))
        iy, ix = np.unravel_index(np.argmax(out[:, :, 0]), out.shape[:2])
        assert abs(ix - 49.5) <= 1.0 and abs(iy - 49.5) <= 1.0


class TestModes:
    def test_crop_mode_is_linear_map_of_rect(self, rng):
        img = smooth_image(rng, 80, 80)
        t = SimilarityTransform(1 / 20.0, 0.0, [-2.0, -2.0])
        out = to_network_frame(img, t, (64, 64), mode="crop")
        # output pixel (i, j) samples the rect linearly
        j, i = 20, 44
        face = np.array([2 * (j + 0.5) / 64 - 1, 2 * (i + 0.5) / 64 - 1])
        src = t.invert().apply(face)
        np.testing.assert_allclose(out[i, j], bilinear_sample(img, src), atol=1e-5)

    def test_crop_dewarp_fills_outside_rect(self):
        scores = np.full((32, 32, 5), 0.2, dtype=np.float32)
        t = SimilarityTransform(1 / 10.0, 0.0, [-3.0, -3.0])  # rect [20,40]^2
        fill = np.zeros(5, dtype=np.float32)
        fill[0] = 1.0
        out = from_network_frame(scores, t, (60, 60), mode="crop", outside_fill=fill)
        np.testing.assert_allclose(out[0, 0], fill)  # far corner: outside rect
        np.testing.assert_allclose(out[30, 30], 0.2, rtol=1e-6)  # rect center

    def test_rescale_round_trip_identity_when_square(self, rng):
        img = smooth_image(rng, 64, 64)
        out = to_network_frame(img, None, (64, 64), mode="rescale")
        np.testing.assert_allclose(out, img, atol=1e-5)

    def test_labels_warp_nearest_preserves_ids(self, rng):
        labels = rng.integers(0, 11, (50, 50)).astype(np.uint8)
        t = SimilarityTransform(1 / 12.0, 0.1, [-2.0, -2.0])
        warped = labels_to_network_frame(labels, t, (32, 32), mode="warp")
        assert warped.dtype == labels.dtype
        assert set(np.unique(warped)) <= set(np.unique(labels)) | {0}


class TestPadBox:
    def test_zero_fraction_is_identity(self):
        b = Box(0.2, 0.3, 0.6, 0.7)
        assert pad_box(b, 0.0, 128) == b

    def test_five_percent_of_128(self):
        b = Box(40 / 128, 40 / 128, 60 / 128, 60 / 128)
        out = pad_box(b, 0.05, 128)
        np.testing.assert_allclose(
            [out.x0, out.y0, out.x1, out.y1],
            np.array([33.6, 33.6, 66.4, 66.4]) / 128,
            rtol=1e-12,
        )

    def test_ten_percent_of_128(self):
        b = Box(40 / 128, 40 / 128, 60 / 128, 60 / 128)
        out = pad_box(b, 0.10, 128)
        np.testing.assert_allclose(
            [out.x0, out.y0, out.x1, out.y1],
            np.array([27.2, 27.2, 72.8, 72.8]) / 128,
            rtol=1e-12,
        )

    def test_clamps_to_unit_square(self):
        out = pad_box(Box(0.01, 0.02, 0.98, 0.99), 0.10, 128)
        assert (out.x0, out.y0, out.x1, out.y1) == (0.0, 0.0, 1.0, 1.0)


class TestRoiAlign:
    def test_constant_map(self):
        feat = np.full((8, 8, 2), 1.5, dtype=np.float32)
        out = roi_align(feat, Box(0.1, 0.2, 0.9, 0.8), 4)
        np.testing.assert_allclose(out, 1.5, rtol=1e-6)

    def test_2x2_full_box_p1(self):
        feat = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
        out = roi_align(feat, Box(0.0, 0.0, 1.0, 1.0), 1)
        np.testing.assert_allclose(out, [[[1.5]]])

    def test_full_box_matches_oracle(self, rng):
        feat = rng.uniform(0, 1, (8, 8, 3))
        out = roi_align(feat, Box(0.0, 0.0, 1.0, 1.0), 8)
        np.testing.assert_allclose(out, oracle_roi_align(feat, Box(0, 0, 1, 1), 8), atol=1e-9)

    def test_100_random_instances_match_oracle(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            h, w = rng.integers(3, 20, 2)
            c = int(rng.integers(1, 4))
            feat = rng.uniform(-2, 2, (h, w, c))
            x0, y0 = rng.uniform(0, 0.5, 2)
            x1 = x0 + rng.uniform(1.5 / w, 1 - x0)
            y1 = y0 + rng.uniform(1.5 / h, 1 - y0)
            p = int(rng.integers(1, 9))
            box = Box(x0, y0, x1, y1)
            np.testing.assert_allclose(
                roi_align(feat, box, p), oracle_roi_align(feat, box, p), atol=1e-6
            )

    def test_degenerate_box_raises(self):
        feat = np.zeros((8, 8, 1))
        with pytest.raises(DegenerateBox):
            roi_align(feat, Box(0.5, 0.1, 0.55, 0.9), 4)  # 0.4 feature px wide


class TestBoxIou:
    def test_identical(self):
        b = Box(0.1, 0.1, 0.5, 0.6)
        assert box_iou(b, b) == pytest.approx(1.0)

    def test_disjoint(self):
        assert box_iou(Box(0, 0, 0.2, 0.2), Box(0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_half_overlap(self):
        a = Box(0.0, 0.0, 0.4, 0.4)
        b = Box(0.2, 0.0, 0.6, 0.4)
        assert box_iou(a, b) == pytest.approx((0.2 * 0.4) / (2 * 0.16 - 0.2 * 0.4))
