"""Landmark-based similarity alignment and the tanh coordinate maps.

Coordinate conventions used throughout the package:

* Image pixel coordinates are continuous; the pixel at (row i, col j) has
  its center at (x, y) = (j + 0.5, i + 0.5).
* The face frame ("source coordinate system") is the template frame: the
  similarity transform returned by :func:`estimate_similarity` maps image
  pixels into it, and the face rectangle borders sit at +-1.
* The warped frame puts the warped image borders at +-1; the tanh map takes
  face-frame coordinates to warped-frame coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLandmarks, OutOfDomain

# Landmark order: left eye, right eye, nose tip, left mouth corner,
# right mouth corner (image left = smaller x).
TEMPLATE_POINTS = np.array(
    [
        [-0.25, -0.1],
        [0.25, -0.1],
        [0.0, 0.1],
        [-0.15, 0.4],
        [0.15, 0.4],
    ],
    dtype=np.float64,
)

# Minimum RMS landmark spread (pixels) along each principal axis before the
# five-point fit is declared rank-deficient.
_MIN_SPREAD = 1e-6


def validate_landmarks(points) -> np.ndarray:
    """Return landmarks as a (5, 2) float64 array, checking shape and finiteness."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (5, 2):
        raise DegenerateLandmarks(f"expected 5 landmark points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateLandmarks("landmark coordinates must be finite")
    return pts


@dataclass(frozen=True)
class SimilarityTransform:
    """2D similarity p -> scale * R(rotation) @ p + translation (no reflection)."""

    scale: float
    rotation: float  # radians
    translation: np.ndarray  # shape (2,)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2)
        )

    @property
    def matrix(self) -> np.ndarray:
        """The 2x2 linear part scale * R(rotation)."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]], dtype=np.float64)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 2)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix.T + self.translation

    def invert(self) -> "SimilarityTransform":
        """Inverse transform; apply(invert(t), apply(t, p)) == p to 1e-9."""
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.rotation), np.sin(-self.rotation)
        rot_inv = np.array([[c, -s], [s, c]], dtype=np.float64)
        return SimilarityTransform(
            scale=inv_scale,
            rotation=-self.rotation,
            translation=-inv_scale * (rot_inv @ self.translation),
        )

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, 0.0, np.zeros(2))


def estimate_similarity(landmarks) -> SimilarityTransform:
    """Least-squares similarity taking the five landmarks onto the template points.

    Closed-form solution of min_T sum_k ||T(p_k) - t_k||^2 over similarities
    without reflection, via the complex-linear normal equations. Raises
    :class:`DegenerateLandmarks` when the points have no spread along one of
    their principal axes.
    """
    pts = validate_landmarks(landmarks)
    centroid = pts.mean(axis=0)
    centered = pts - centroid

    # Spread check along both principal directions (RMS, in pixels).
    sv = np.linalg.svd(centered, compute_uv=False) / np.sqrt(pts.shape[0])
    if sv[-1] <= _MIN_SPREAD:
        raise DegenerateLandmarks(
            f"landmark spread {sv[-1]:.3e} px along a principal axis; fit is rank-deficient"
        )

    tmpl = TEMPLATE_POINTS
    tmpl_centroid = tmpl.mean(axis=0)

    p = centered[:, 0] + 1j * centered[:, 1]
    q = (tmpl[:, 0] - tmpl_centroid[0]) + 1j * (tmpl[:, 1] - tmpl_centroid[1])
    a = np.sum(q * np.conj(p)) / np.sum(p * np.conj(p)).real
    scale = float(np.abs(a))
    if scale <= _MIN_SPREAD:
        raise DegenerateLandmarks("landmarks are uncorrelated with the template")
    rotation = float(np.angle(a))

    t = SimilarityTransform(scale, rotation, np.zeros(2))
    translation = tmpl_centroid - t.matrix @ centroid
    return SimilarityTransform(scale, rotation, translation)


def face_rect_corners(t: SimilarityTransform) -> np.ndarray:
    """Corners of the face rectangle in image pixels: T^{-1} of (+-1, +-1).

    Order: (-1,-1), (1,-1), (1,1), (-1,1). The corners always form a square.
    """
    inv = t.invert()
    unit = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    return inv.apply(unit)


def tanh_map(points) -> np.ndarray:
    """Componentwise tanh: face-frame coords -> warped-frame coords in (-1, 1)."""
    return np.tanh(np.asarray(points, dtype=np.float64))


def atanh_map(points) -> np.ndarray:
    """Componentwise atanh, the inverse of :func:`tanh_map`.

    Raises :class:`OutOfDomain` when any coordinate has magnitude >= 1.
    """
    p = np.asarray(points, dtype=np.float64)
    if np.any(np.abs(p) >= 1.0):
        raise OutOfDomain("atanh requires all coordinates strictly inside (-1, 1)")
    return np.arctanh(p)
