"""Bilinear sampling, the invertible tanh image warp, box padding, RoI align.

Images are numpy arrays of shape (H, W, C) (float) or (H, W) (integer label
maps). All warps are backward-mapped: every output pixel center is traced to
a source location and sampled there, so the output has no holes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox
from .geometry import SimilarityTransform

# Border policies for sampling outside the source image.
ZERO = "zero"
REPLICATE = "replicate"

# Input-focusing modes: the nonlinear whole-image warp, a linear crop of the
# face rectangle, and an aspect-preserving rescale of the whole image.
MODES = ("warp", "crop", "rescale")


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in normalized image coordinates (1 = full side)."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def clamped(self) -> "Box":
        return Box(
            min(max(self.x0, 0.0), 1.0),
            min(max(self.y0, 0.0), 1.0),
            min(max(self.x1, 0.0), 1.0),
            min(max(self.y1, 0.0), 1.0),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


def box_iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes in the same normalized frame."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def pad_box(b: Box, frac: float, map_side: int) -> Box:
    """Expand every side of ``b`` by ``frac * map_side`` pixels, clamped to [0, 1].

    ``b`` is normalized to a square map of ``map_side`` pixels, so the
    normalized expansion per side is exactly ``frac``.
    """
    if not 0 <= frac < 0.5:
        raise ValueError(f"padding fraction must be in [0, 0.5), got {frac}")
    return Box(b.x0 - frac, b.y0 - frac, b.x1 + frac, b.y1 + frac).clamped()


# ---------------------------------------------------------------------------
# sampling primitives
# ---------------------------------------------------------------------------


def bilinear_gather(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, policy: str = ZERO) -> np.ndarray:
    """Bilinear interpolation of (H, W, C) ``img`` at continuous points.

    ``xs``/``ys`` may have any common shape; the result has that shape plus
    the channel axis. Pixel (i, j) has center (j + 0.5, i + 0.5). Neighbors
    outside the image contribute zero (``"zero"``) or the nearest edge pixel
    (``"replicate"``).
    """
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    cx = np.asarray(xs, dtype=np.float64) - 0.5
    cy = np.asarray(ys, dtype=np.float64) - 0.5
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx = (cx - x0)[..., None]
    fy = (cy - y0)[..., None]

    out = None
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi, yi = x0 + dx, y0 + dy
        if policy == ZERO:
            valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h))[..., None]
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            term = np.where(valid, vals * wgt, 0.0)
        elif policy == REPLICATE:
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            term = vals * wgt
        else:
            raise ValueError(f"unknown border policy {policy!r}")
        out = term if out is None else out + term
    return out


def bilinear_sample(img: np.ndarray, point, policy: str = ZERO) -> np.ndarray:
    """Bilinear interpolation at a single continuous pixel point (x, y)."""
    x, y = float(point[0]), float(point[1])
    return bilinear_gather(img, np.array(x), np.array(y), policy)


def nearest_gather(labels: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: int = 0) -> np.ndarray:
    """Nearest-neighbor lookup of an integer (H, W) map at continuous points."""
    h, w = labels.shape[:2]
    xi = np.floor(np.asarray(xs, dtype=np.float64)).astype(np.int64)
    yi = np.floor(np.asarray(ys, dtype=np.float64)).astype(np.int64)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = labels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, out, fill)


# ---------------------------------------------------------------------------
# frame mappings: source image <-> fixed-size network input frame
# ---------------------------------------------------------------------------


def _frame_grid(out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame coordinates of the output pixel centers, borders at +-1."""
    fx = 2.0 * (np.arange(out_w) + 0.5) / out_w - 1.0
    fy = 2.0 * (np.arange(out_h) + 0.5) / out_h - 1.0
    return np.meshgrid(fx, fy)


def _source_coords(mode: str, t: SimilarityTransform | None, src_hw, out_hw) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates sampled by each output pixel of the frame."""
    out_h, out_w = out_hw
    gx, gy = _frame_grid(out_h, out_w)
    if mode == "warp":
        face = np.stack([np.arctanh(gx), np.arctanh(gy)], axis=-1)
        src = t.invert().apply(face)
    elif mode == "crop":
        face = np.stack([gx, gy], axis=-1)
        src = t.invert().apply(face)
    elif mode == "rescale":
        src_h, src_w = src_hw
        s = min(out_w / src_w, out_h / src_h)
        offx = (out_w - s * src_w) / 2.0
        offy = (out_h - s * src_h) / 2.0
        px = (gx + 1.0) / 2.0 * out_w
        py = (gy + 1.0) / 2.0 * out_h
        src = np.stack([(px - offx) / s, (py - offy) / s], axis=-1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return src[..., 0], src[..., 1]


def _frame_coords(mode: str, t: SimilarityTransform | None, src_hw, frame_hw):
    """Frame pixel coordinates of each source pixel center, plus a coverage mask.

    The mask flags source pixels the frame actually represents; for the crop
    mode that is the face rectangle only.
    """
    src_h, src_w = src_hw
    frame_h, frame_w = frame_hw
    px = np.arange(src_w) + 0.5
    py = np.arange(src_h) + 0.5
    gx, gy = np.meshgrid(px, py)
    pts = np.stack([gx, gy], axis=-1)
    covered = None
    if mode == "warp":
        face = t.apply(pts)
        warped = np.tanh(face)
        fx = (warped[..., 0] + 1.0) / 2.0 * frame_w
        fy = (warped[..., 1] + 1.0) / 2.0 * frame_h
    elif mode == "crop":
        face = t.apply(pts)
        covered = np.max(np.abs(face), axis=-1) <= 1.0
        fx = (face[..., 0] + 1.0) / 2.0 * frame_w
        fy = (face[..., 1] + 1.0) / 2.0 * frame_h
    elif mode == "rescale":
        s = min(frame_w / src_w, frame_h / src_h)
        offx = (frame_w - s * src_w) / 2.0
        offy = (frame_h - s * src_h) / 2.0
        fx = gx * s + offx
        fy = gy * s + offy
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if covered is None:
        covered = np.ones((src_h, src_w), dtype=bool)
    return fx, fy, covered


def roi_tanh_warp(img: np.ndarray, t: SimilarityTransform, out_size, policy: str = ZERO) -> np.ndarray:
    """Warp the whole image into a fixed-size frame, face centered.

    Every output pixel center is mapped through atanh into the face frame,
    then through the inverse similarity into the source image, and sampled
    bilinearly. The face frame origin lands at the output center.
    """
    out_h, out_w = out_size
    if out_h < 2 or out_w < 2:
        raise ValueError("output size must be at least 2x2")
    xs, ys = _source_coords("warp", t, img.shape[:2], (out_h, out_w))
    return bilinear_gather(img, xs, ys, policy).astype(np.float32)


def roi_tanh_dewarp(scores: np.ndarray, t: SimilarityTransform, out_size) -> np.ndarray:
    """Map a score image from the warped frame back onto the source pixel grid.

    Every source pixel center is pushed through the forward warp and the
    scores are sampled bilinearly with edge replication, so scores are
    defined for the entire source domain.
    """
    src_h, src_w = out_size
    fx, fy, _ = _frame_coords("warp", t, (src_h, src_w), scores.shape[:2])
    return bilinear_gather(scores, fx, fy, REPLICATE).astype(np.float32)


def to_network_frame(
    img: np.ndarray,
    t: SimilarityTransform | None,
    out_size,
    mode: str = "warp",
    policy: str = ZERO,
) -> np.ndarray:
    """Resample the source image into the fixed-size network input frame."""
    xs, ys = _source_coords(mode, t, img.shape[:2], out_size)
    return bilinear_gather(img, xs, ys, policy).astype(np.float32)


def labels_to_network_frame(
    labels: np.ndarray, t: SimilarityTransform | None, out_size, mode: str = "warp"
) -> np.ndarray:
    """Same mapping as :func:`to_network_frame` but nearest-neighbor for label maps."""
    xs, ys = _source_coords(mode, t, labels.shape[:2], out_size)
    return nearest_gather(labels, xs, ys, fill=0)


def from_network_frame(
    scores: np.ndarray,
    t: SimilarityTransform | None,
    src_size,
    mode: str = "warp",
    outside_fill: np.ndarray | None = None,
) -> np.ndarray:
    """Map frame scores back onto the source grid (inverse of the chosen mode).

    For the crop mode, source pixels outside the face rectangle are not
    represented in the frame; they receive ``outside_fill`` (a per-channel
    vector) when given, else the replicated edge value.
    """
    fx, fy, covered = _frame_coords(mode, t, src_size, scores.shape[:2])
    out = bilinear_gather(scores, fx, fy, REPLICATE).astype(np.float32)
    if outside_fill is not None and not covered.all():
        out[~covered] = np.asarray(outside_fill, dtype=np.float32)
    return out


# ---------------------------------------------------------------------------
# RoI align
# ---------------------------------------------------------------------------


def roi_sample_points(feat_h: int, feat_w: int, box: Box, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin-center sample locations of a P x P RoI grid, in feature pixel coords.

    Raises :class:`DegenerateBox` when the box spans less than one feature
    pixel in either dimension.
    """
    bx0, by0 = box.x0 * feat_w, box.y0 * feat_h
    bx1, by1 = box.x1 * feat_w, box.y1 * feat_h
    if bx1 - bx0 < 1.0 or by1 - by0 < 1.0:
        raise DegenerateBox(
            f"box {box} spans {bx1 - bx0:.3f} x {by1 - by0:.3f} feature pixels"
        )
    cx = bx0 + (np.arange(p) + 0.5) * (bx1 - bx0) / p
    cy = by0 + (np.arange(p) + 0.5) * (by1 - by0) / p
    return np.meshgrid(cx, cy)


def roi_gather_matrix(feat_h: int, feat_w: int, box: Box, p: int) -> np.ndarray:
    """Dense (H*W, P*P) matrix G with RoIAlign(feat) = feat_flat @ G.

    RoI align is linear in the feature map, so this matrix serves both the
    forward pass and (transposed) the gradient scatter.
    """
    xs, ys = roi_sample_points(feat_h, feat_w, box, p)
    cx = xs.ravel() - 0.5
    cy = ys.ravel() - 0.5
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx = cx - x0
    fy = cy - y0
    g = np.zeros((feat_h * feat_w, p * p), dtype=np.float64)
    cols = np.arange(p * p)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi = np.clip(x0 + dx, 0, feat_w - 1)
        yi = np.clip(y0 + dy, 0, feat_h - 1)
        np.add.at(g, (yi * feat_w + xi, cols), wgt)
    return g


def roi_align(feat: np.ndarray, box: Box, p: int) -> np.ndarray:
    """Extract a P x P patch from (H, W, C) features by one bilinear sample per bin.

    Bin centers use the same pixel-center convention as
    :func:`bilinear_sample`; samples at the map border replicate the edge.
    """
    if p < 1:
        raise ValueError("output size must be >= 1")
    if feat.ndim == 2:
        feat = feat[:, :, None]
    h, w = feat.shape[:2]
    xs, ys = roi_sample_points(h, w, box, p)
    return bilinear_gather(feat, xs, ys, REPLICATE)
