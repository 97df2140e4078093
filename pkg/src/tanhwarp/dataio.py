"""File formats: PNG images and label maps, landmark text files, the raw
score-map container, palette sidecars, and tab-separated manifests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import MalformedFile
from .model import CLASS_NAMES, DEFAULT_PALETTE

SCOREMAP_MAGIC = b"TWSM"


def load_image(path) -> np.ndarray:
    """8-bit PNG (RGB or grayscale) -> (H, W, 3) float32 in [0, 1]."""
    try:
        img = PILImage.open(path)
        img.load()
    except (OSError, SyntaxError) as e:
        raise MalformedFile(path, f"cannot read image: {e}") from e
    if img.mode == "L":
        img = img.convert("RGB")
    elif img.mode not in ("RGB",):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image(path, image: np.ndarray):
    """Float [0, 1] (H, W, 3) or (H, W) -> 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    PILImage.fromarray(data, mode=mode).save(path, format="PNG")


def load_labelmap(path, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Single-channel 8-bit PNG of class indices -> (H, W) uint8."""
    try:
        img = PILImage.open(path)
        img.load()
    except (OSError, SyntaxError) as e:
        raise MalformedFile(path, f"cannot read label map: {e}") from e
    if img.mode != "L":
        raise MalformedFile(path, f"label maps must be single-channel 8-bit PNG, got mode {img.mode}")
    labels = np.asarray(img, dtype=np.uint8)
    top = int(labels.max(initial=0))
    if top >= num_classes:
        raise MalformedFile(path, f"label index {top} outside the {num_classes}-class palette")
    return labels


def save_labelmap(path, labels: np.ndarray):
    PILImage.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_landmarks(path) -> np.ndarray:
    """Five 'x y' lines -> (5, 2) float64 (left eye, right eye, nose tip,
    left mouth corner, right mouth corner)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise MalformedFile(path, f"cannot read landmarks: {e}") from e
    rows = [line for line in text.splitlines() if line.strip()]
    if len(rows) != 5:
        raise MalformedFile(path, f"expected 5 landmark lines, got {len(rows)}")
    points = []
    for i, line in enumerate(rows, 1):
        parts = line.split()
        if len(parts) != 2:
            raise MalformedFile(path, f"line {i}: expected 'x y', got {line!r}")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise MalformedFile(path, f"line {i}: {e}") from e
    pts = np.array(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise MalformedFile(path, "landmark coordinates must be finite")
    return pts


def save_landmarks(path, landmarks: np.ndarray):
    with open(path, "w", encoding="utf-8") as f:
        for x, y in np.asarray(landmarks, dtype=np.float64):
            f.write(f"{x:.4f} {y:.4f}\n")


def save_scoremap(path, scores: np.ndarray):
    """(H, W, C) float scores -> raw container: magic, u32 H/W/C, f32 payload."""
    arr = np.ascontiguousarray(np.asarray(scores, dtype="<f4"))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(SCOREMAP_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.tobytes())


def load_scoremap(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SCOREMAP_MAGIC:
        raise MalformedFile(path, "bad magic, not a score map", offset=0)
    if len(blob) < 16:
        raise MalformedFile(path, "truncated header", offset=len(blob))
    h, w, c = struct.unpack_from("<III", blob, 4)
    need = 16 + 4 * h * w * c
    if len(blob) < need:
        raise MalformedFile(path, f"payload truncated: need {need} bytes, have {len(blob)}", offset=len(blob))
    return np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c).astype(np.float32)


def save_palette(path, class_names=CLASS_NAMES, colors=DEFAULT_PALETTE):
    """Sidecar mapping class indices to names and display colors."""
    with open(path, "w", encoding="utf-8") as f:
        for i, (name, (r, g, b)) in enumerate(zip(class_names, colors)):
            f.write(f"{i} {name} {r} {g} {b}\n")


def load_palette(path):
    entries = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise MalformedFile(path, f"cannot read palette: {e}") from e
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MalformedFile(path, f"line {i + 1}: expected 'index name r g b'")
        entries.append((int(parts[0]), parts[1], (int(parts[2]), int(parts[3]), int(parts[4]))))
    names = tuple(e[1] for e in sorted(entries))
    colors = tuple(e[2] for e in sorted(entries))
    return names, colors


def colorize_labels(labels: np.ndarray, colors=DEFAULT_PALETTE) -> np.ndarray:
    lut = np.asarray(colors, dtype=np.float32) / 255.0
    return lut[np.asarray(labels, dtype=np.int64)]


def overlay_labels(image: np.ndarray, labels: np.ndarray, colors=DEFAULT_PALETTE, alpha=0.5) -> np.ndarray:
    """Blend the palette colors of a label map over an image (display only)."""
    return (1.0 - alpha) * image + alpha * colorize_labels(labels, colors)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    labels: Path | None
    landmarks: Path


@dataclass
class Manifest:
    base: Path
    records: list


def load_manifest(path) -> Manifest:
    """Tab-separated records: image, label map (optional, '-' if missing),
    landmarks. Paths are relative to the manifest's directory; referenced
    files must exist."""
    path = Path(path)
    base = path.parent
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise MalformedFile(path, f"cannot read manifest: {e}") from e
    records = []
    for i, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise MalformedFile(path, f"line {i}: expected 3 tab-separated fields, got {len(parts)}")
        image = base / parts[0]
        labels = None if parts[1] in ("", "-") else base / parts[1]
        landmarks = base / parts[2]
        for p in (image, labels, landmarks):
            if p is not None and not p.exists():
                raise MalformedFile(path, f"line {i}: referenced file missing: {p}")
        records.append(ManifestRecord(image, labels, landmarks))
    return Manifest(base=base, records=records)


def save_manifest(path, records):
    """Write records as paths relative to the manifest location."""
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            labels = rec.labels.relative_to(base).as_posix() if rec.labels else "-"
            f.write(
                f"{rec.image.relative_to(base).as_posix()}\t{labels}\t"
                f"{rec.landmarks.relative_to(base).as_posix()}\n"
            )


def load_samples(manifest: Manifest):
    """Materialize manifest records as training samples."""
    from .training import TrainSample

    samples = []
    for rec in manifest.records:
        image = load_image(rec.image)
        labels = load_labelmap(rec.labels) if rec.labels else None
        landmarks = load_landmarks(rec.landmarks)
        if labels is not None and labels.shape != image.shape[:2]:
            raise MalformedFile(rec.labels, f"label map {labels.shape} does not match image {image.shape[:2]}")
        samples.append(TrainSample(image=image, labels=labels, landmarks=landmarks))
    return samples
