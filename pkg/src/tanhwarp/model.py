"""The hybrid parsing network: shared trunk, box head, per-component mask
heads fed by padded RoI align, a full-frame outer head, and score assembly.

The default configuration is a desk-scale model (128 px input) that keeps
the stride ratios of the full-scale design (512 px input, strides 16 and 4).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch
from .geometry import SimilarityTransform, estimate_similarity
from .sampler import (
    Box,
    ZERO,
    bilinear_gather,
    from_network_frame,
    pad_box,
    to_network_frame,
)

# Canonical 11-class palette (class index -> name).
CLASS_NAMES = (
    "background",
    "skin",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
    "hair",
)

# Display colors for label visualization (RGB, 0-255).
DEFAULT_PALETTE = (
    (0, 0, 0),
    (217, 179, 140),
    (64, 32, 8),
    (96, 48, 12),
    (240, 240, 255),
    (220, 220, 245),
    (190, 140, 110),
    (200, 40, 60),
    (90, 10, 20),
    (230, 80, 90),
    (40, 26, 13),
)

INNER_CLASS_IDS = (2, 3, 4, 5, 6, 7, 8, 9)


@dataclass(frozen=True)
class ComponentSpec:
    """One inner facial component: its sub-labels and RoI padding fraction."""

    name: str
    class_ids: tuple
    pad_frac: float

    @property
    def n_channels(self) -> int:
        return len(self.class_ids) + 1  # foreground sub-labels + local background


DEFAULT_COMPONENTS = (
    ComponentSpec("left_brow", (2,), 0.05),
    ComponentSpec("right_brow", (3,), 0.05),
    ComponentSpec("left_eye", (4,), 0.05),
    ComponentSpec("right_eye", (5,), 0.05),
    ComponentSpec("nose", (6,), 0.05),
    ComponentSpec("mouth", (7, 8, 9), 0.10),
)


@dataclass(frozen=True)
class ModelConfig:
    """Network geometry and head layout.

    ``input_mode`` selects how source images reach the fixed-size input
    frame: the nonlinear whole-image warp, a linear crop of the face
    rectangle, or an aspect-preserving rescale.
    """

    warped_size: int = 128
    stride_r: int = 16
    stride_m: int = 4
    trunk_channels: tuple = (32, 64)
    fpn_channels: int = 32
    roi_size: int = 8
    mask_size: int = 32
    head_channels: tuple = (48, 32)
    outer_channels: tuple = (48, 16)
    box_channels: tuple = (64, 128)
    components: tuple = DEFAULT_COMPONENTS
    outer_class_ids: tuple = (1, 10, 0)  # skin, hair, background
    num_classes: int = 11
    padding_enabled: bool = True
    input_mode: str = "warp"

    def __post_init__(self):
        if self.warped_size % self.stride_r or self.warped_size % self.stride_m:
            raise ValueError("warped_size must be divisible by both strides")
        if self.stride_m != 4:
            raise ValueError("the head layout performs two doublings; stride_m must be 4")
        if self.mask_size != 4 * self.roi_size:
            raise ValueError("mask_size must be 4 * roi_size (two upsampling stages)")
        for comp in self.components:
            if comp.pad_frac not in (0.05, 0.10):
                raise ValueError(f"padding fraction must be 0.05 or 0.10, got {comp.pad_frac}")
        covered = sorted(
            [cid for comp in self.components for cid in comp.class_ids] + list(self.outer_class_ids)
        )
        if covered != list(range(self.num_classes)):
            raise ValueError(f"component + outer class ids must cover 0..{self.num_classes - 1} exactly once")

    @property
    def box_feat_size(self) -> int:
        return self.warped_size // self.stride_r

    @property
    def mask_feat_size(self) -> int:
        return self.warped_size // self.stride_m

    @property
    def n_components(self) -> int:
        return len(self.components)

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, input_mode=mode)


def paper_scale_config() -> ModelConfig:
    """Full-scale geometry (512 px input, 32 px RoI, 128 px masks)."""
    return ModelConfig(warped_size=512, roi_size=32, mask_size=128)


@dataclass
class FeatureMaps:
    """Shared features: box_feat at stride 16 for the box head, mask_feat at
    stride 4 for all segmentation heads."""

    box_feat: Tensor
    mask_feat: Tensor | None


@dataclass
class ParseOutput:
    """Per-face parsing bundle."""

    transform: SimilarityTransform
    boxes: list  # raw predicted boxes, one per component
    roi_boxes: list  # padded boxes actually used for RoI align / pasting
    inner_probs: list  # per-component (mask, mask, C_i) softmax maps
    outer_probs: np.ndarray  # (S, S, 3) softmax map
    frame_scores: np.ndarray  # assembled (S, S, num_classes) scores
    scores: np.ndarray  # de-warped (H, W, num_classes) scores
    labels: np.ndarray  # (H, W) argmax label map in the source domain


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _conv_init(rng, cout, cin, k, std_scale=1.0):
    std = std_scale * np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-initialized parameter dict keyed by layer path."""
    rng = np.random.default_rng(seed)
    c_lo, c_hi = cfg.trunk_channels
    p: dict[str, Tensor] = {}

    def conv(name, cout, cin, k, std_scale=1.0):
        p[f"{name}.w"] = ad.parameter(_conv_init(rng, cout, cin, k, std_scale), dtype)
        p[f"{name}.b"] = ad.parameter(np.zeros(cout), dtype)

    # trunk: strides 2,2,1,2,1,2 -> taps at stride 4 (lateral) and 16 (box head)
    trunk_plan = [(3, c_lo), (c_lo, c_lo), (c_lo, c_lo), (c_lo, c_hi), (c_hi, c_hi), (c_hi, c_hi)]
    for i, (cin, cout) in enumerate(trunk_plan):
        conv(f"trunk.{i}", cout, cin, 3)

    conv("fpn.deep", cfg.fpn_channels, c_hi, 1)
    conv("fpn.lateral", cfg.fpn_channels, c_lo, 1)
    conv("fpn.merge", cfg.fpn_channels, cfg.fpn_channels, 3)

    bc, bproj = cfg.box_channels
    conv("box.0", bc, c_hi, 3)
    conv("box.1", bc, bc, 3)
    conv("box.proj", bproj, bc, 1)
    p["box.fc.w"] = ad.parameter(
        rng.normal(0.0, 1e-3, size=(bproj, 4 * cfg.n_components)), dtype
    )
    p["box.fc.b"] = ad.parameter(np.zeros(4 * cfg.n_components), dtype)

    h0, h1 = cfg.head_channels
    for comp in cfg.components:
        conv(f"inner.{comp.name}.0", h0, cfg.fpn_channels, 3)
        conv(f"inner.{comp.name}.1", h1, h0, 3)
        conv(f"inner.{comp.name}.out", comp.n_channels, h1, 1)

    o0, o1 = cfg.outer_channels
    conv("outer.0", o0, cfg.fpn_channels, 3)
    conv("outer.1", o1, o0, 3)
    conv("outer.out", len(cfg.outer_class_ids), o1, 1)
    return p


_TRUNK_STRIDES = (2, 2, 1, 2, 1, 2)
_LATERAL_TAP = 2  # trunk layer index whose output feeds the lateral projection


class HybridModel:
    """Parameter container plus the forward passes of every head."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # -- parameter groups ---------------------------------------------------

    def param_names(self, group: str | None = None) -> list:
        """Names filtered by group prefix: 'trunk+fpn+box' etc."""
        if group is None:
            return list(self.params)
        prefixes = tuple(g + "." for g in group.split("+"))
        return [k for k in self.params if k.startswith(prefixes)]

    def set_requires_grad(self, names, value: bool):
        for k in names:
            self.params[k].requires_grad = value

    # -- forward passes -----------------------------------------------------

    def _conv(self, name, x, stride=1, pad=1, act=True):
        y = ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, pad=pad)
        return ad.relu(y) if act else y

    def extract_features(self, warped: Tensor, want_mask: bool = True) -> FeatureMaps:
        """Trunk + top-down merge. ``warped`` is (N, 3, S, S)."""
        s = self.cfg.warped_size
        if warped.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"expected (N, 3, {s}, {s}), got {warped.shape}")
        x = warped
        lateral_in = None
        for i, stride in enumerate(_TRUNK_STRIDES):
            x = self._conv(f"trunk.{i}", x, stride=stride, pad=1)
            if i == _LATERAL_TAP:
                lateral_in = x
        box_feat = x
        if not want_mask:
            return FeatureMaps(box_feat, None)
        deep = self._conv("fpn.deep", box_feat, pad=0, act=False)
        deep = ad.upsample_bilinear_x2(ad.upsample_bilinear_x2(deep))
        lateral = self._conv("fpn.lateral", lateral_in, pad=0, act=False)
        merged = ad.relu(ad.add(deep, lateral))
        mask_feat = self._conv("fpn.merge", merged, pad=1)
        return FeatureMaps(box_feat, mask_feat)

    def predict_components(self, box_feat: Tensor) -> Tensor:
        """Normalized component boxes, shape (N, n_components, 4), x0<x1 and y0<y1."""
        x = self._conv("box.0", box_feat, pad=1)
        x = self._conv("box.1", x, pad=1)
        x = self._conv("box.proj", x, pad=0)
        x = ad.global_avg_pool(x)
        raw = ad.fully_connected(x, self.params["box.fc.w"], self.params["box.fc.b"])
        v = ad.sigmoid(ad.reshape(raw, (-1, self.cfg.n_components, 4)))
        x0 = ad.minimum(v[:, :, 0:1], v[:, :, 2:3])
        x1 = ad.maximum(v[:, :, 0:1], v[:, :, 2:3])
        y0 = ad.minimum(v[:, :, 1:2], v[:, :, 3:4])
        y1 = ad.maximum(v[:, :, 1:2], v[:, :, 3:4])
        return ad.concat([x0, y0, x1, y1], axis=2)

    def roi_box_for(self, comp: ComponentSpec, box: Box) -> Box:
        """The box actually sampled: padded per component (when enabled) and
        held to a minimum side of two feature pixels as a numerical guard."""
        if self.cfg.padding_enabled:
            b = pad_box(box, comp.pad_frac, self.cfg.mask_feat_size)
        else:
            b = box.clamped()
        return _ensure_min_side(b, 2.0 / self.cfg.mask_feat_size)

    def _head(self, prefix: str, patches: Tensor) -> Tensor:
        x = self._conv(f"{prefix}.0", patches, pad=1)
        x = ad.upsample_bilinear_x2(x)
        x = self._conv(f"{prefix}.1", x, pad=1)
        x = ad.upsample_bilinear_x2(x)
        return self._conv(f"{prefix}.out", x, pad=0, act=False)

    def segment_inner(self, comp: ComponentSpec, mask_feat: Tensor, rois: list) -> Tensor:
        """Mask logits for one component head.

        ``rois`` is a list of (sample_index, Box) with boxes already padded
        via :meth:`roi_box_for`. Output is (len(rois), C_comp, mask, mask).
        """
        patches = ad.roi_align_tensor(mask_feat, rois, self.cfg.roi_size)
        return self._head(f"inner.{comp.name}", patches)

    def segment_outer(self, mask_feat: Tensor) -> Tensor:
        """Outer logits (N, 3, S, S): skin, hair, background."""
        x = self._conv("outer.0", mask_feat, pad=1)
        x = ad.upsample_bilinear_x2(x)
        x = self._conv("outer.1", x, pad=1)
        x = self._conv("outer.out", x, pad=0, act=False)
        return ad.upsample_bilinear_x2(x)


def _ensure_min_side(b: Box, min_side: float) -> Box:
    def fix(lo, hi):
        half = max(hi - lo, min_side) / 2.0
        c = (lo + hi) / 2.0
        c = min(max(c, half), 1.0 - half)
        return c - half, c + half

    x0, x1 = fix(b.x0, b.x1)
    y0, y1 = fix(b.y0, b.y1)
    return Box(x0, y0, x1, y1)


def boxes_from_tensor(pred: np.ndarray) -> list:
    """(n, 4) or (N, n, 4) box coordinates -> Box objects."""
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim == 2:
        return [Box(*row) for row in arr]
    return [[Box(*row) for row in sample] for sample in arr]


# ---------------------------------------------------------------------------
# score assembly and the end-to-end single-face pipeline
# ---------------------------------------------------------------------------


def paste_region(canvas_side: int, box: Box):
    """Canvas pixel index ranges whose centers fall inside ``box``."""
    x_lo = int(np.ceil(box.x0 * canvas_side - 0.5))
    x_hi = int(np.floor(box.x1 * canvas_side - 0.5))
    y_lo = int(np.ceil(box.y0 * canvas_side - 0.5))
    y_hi = int(np.floor(box.y1 * canvas_side - 0.5))
    x_lo, y_lo = max(x_lo, 0), max(y_lo, 0)
    x_hi, y_hi = min(x_hi, canvas_side - 1), min(y_hi, canvas_side - 1)
    return x_lo, x_hi, y_lo, y_hi


def assemble_scores(
    cfg: ModelConfig,
    roi_boxes: list,
    inner_probs: list,
    outer_probs: np.ndarray,
) -> np.ndarray:
    """Gather head outputs into one (S, S, num_classes) score canvas.

    The canvas starts from the outer softmax (its channels routed to the
    skin/hair/background class slots). Each component's softmax foreground
    channels are bilinearly pasted into its padded-box region; the local
    background channel is dropped. Labels are the per-pixel argmax.
    """
    s = cfg.warped_size
    canvas = np.zeros((s, s, cfg.num_classes), dtype=np.float32)
    for k, cid in enumerate(cfg.outer_class_ids):
        canvas[:, :, cid] = outer_probs[:, :, k]

    for comp, box, probs in zip(cfg.components, roi_boxes, inner_probs):
        x_lo, x_hi, y_lo, y_hi = paste_region(s, box)
        if x_hi < x_lo or y_hi < y_lo:
            continue
        m = probs.shape[0]
        # canvas pixel centers mapped into local mask raster coordinates
        cx = (np.arange(x_lo, x_hi + 1) + 0.5) / s
        cy = (np.arange(y_lo, y_hi + 1) + 0.5) / s
        u = (cx - box.x0) / box.width * m
        v = (cy - box.y0) / box.height * m
        uu, vv = np.meshgrid(u, v)
        vals = bilinear_gather(probs, uu, vv, policy="replicate")
        for k, cid in enumerate(comp.class_ids):
            canvas[y_lo : y_hi + 1, x_lo : x_hi + 1, cid] = vals[:, :, k]
    return canvas


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def background_fill(num_classes: int) -> np.ndarray:
    fill = np.zeros(num_classes, dtype=np.float32)
    fill[0] = 1.0
    return fill


def parse_face(
    model: HybridModel,
    image: np.ndarray,
    landmarks,
    mode: str | None = None,
    policy: str = ZERO,
) -> ParseOutput:
    """Full single-face pipeline: align, warp, run heads, assemble, de-warp.

    ``image`` is (H, W, 3) float in [0, 1]; returns scores and the argmax
    label map on the source pixel grid.
    """
    cfg = model.cfg
    mode = mode or cfg.input_mode
    t = estimate_similarity(landmarks)
    s = cfg.warped_size
    warped = to_network_frame(image, t, (s, s), mode=mode, policy=policy)
    x = Tensor(warped.transpose(2, 0, 1)[None])

    feats = model.extract_features(x)
    box_pred = model.predict_components(feats.box_feat)
    boxes = boxes_from_tensor(box_pred.data[0])

    roi_boxes = [model.roi_box_for(comp, b) for comp, b in zip(cfg.components, boxes)]
    inner_probs = []
    for comp, rb in zip(cfg.components, roi_boxes):
        logits = model.segment_inner(comp, feats.mask_feat, [(0, rb)])
        inner_probs.append(_softmax_np(logits.data[0], axis=0).transpose(1, 2, 0))
    outer_logits = model.segment_outer(feats.mask_feat)
    outer_probs = _softmax_np(outer_logits.data[0], axis=0).transpose(1, 2, 0)

    frame_scores = assemble_scores(cfg, roi_boxes, inner_probs, outer_probs)
    scores = from_network_frame(
        frame_scores,
        t,
        image.shape[:2],
        mode=mode,
        outside_fill=background_fill(cfg.num_classes),
    )
    labels = np.argmax(scores, axis=-1).astype(np.uint8)
    return ParseOutput(
        transform=t,
        boxes=boxes,
        roi_boxes=roi_boxes,
        inner_probs=inner_probs,
        outer_probs=outer_probs,
        frame_scores=frame_scores,
        scores=scores,
        labels=labels,
    )


# ---------------------------------------------------------------------------
# model persistence: TWCK checkpoint + key=value config sidecar
# ---------------------------------------------------------------------------


def config_to_text(cfg: ModelConfig) -> str:
    comps = " ".join(
        f"{c.name}:{'+'.join(str(i) for i in c.class_ids)}:{c.pad_frac}" for c in cfg.components
    )
    lines = [
        f"warped_size={cfg.warped_size}",
        f"stride_r={cfg.stride_r}",
        f"stride_m={cfg.stride_m}",
        f"trunk_channels={cfg.trunk_channels[0]},{cfg.trunk_channels[1]}",
        f"fpn_channels={cfg.fpn_channels}",
        f"roi_size={cfg.roi_size}",
        f"mask_size={cfg.mask_size}",
        f"head_channels={cfg.head_channels[0]},{cfg.head_channels[1]}",
        f"outer_channels={cfg.outer_channels[0]},{cfg.outer_channels[1]}",
        f"box_channels={cfg.box_channels[0]},{cfg.box_channels[1]}",
        f"components={comps}",
        f"outer_class_ids={','.join(str(i) for i in cfg.outer_class_ids)}",
        f"num_classes={cfg.num_classes}",
        f"padding_enabled={str(cfg.padding_enabled).lower()}",
        f"input_mode={cfg.input_mode}",
    ]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()

    def ints(key):
        return tuple(int(v) for v in kv[key].split(","))

    comps = []
    for item in kv["components"].split():
        name, ids, frac = item.split(":")
        comps.append(ComponentSpec(name, tuple(int(i) for i in ids.split("+")), float(frac)))
    return ModelConfig(
        warped_size=int(kv["warped_size"]),
        stride_r=int(kv["stride_r"]),
        stride_m=int(kv["stride_m"]),
        trunk_channels=ints("trunk_channels"),
        fpn_channels=int(kv["fpn_channels"]),
        roi_size=int(kv["roi_size"]),
        mask_size=int(kv["mask_size"]),
        head_channels=ints("head_channels"),
        outer_channels=ints("outer_channels"),
        box_channels=ints("box_channels"),
        components=tuple(comps),
        outer_class_ids=ints("outer_class_ids"),
        num_classes=int(kv["num_classes"]),
        padding_enabled=kv["padding_enabled"] == "true",
        input_mode=kv["input_mode"],
    )


def sidecar_path(checkpoint_path) -> str:
    return str(checkpoint_path) + ".cfg"


def save_model(path, model: HybridModel):
    ad.save_checkpoint(path, model.params)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        f.write(config_to_text(model.cfg))


def load_model(path) -> HybridModel:
    with open(sidecar_path(path), "r", encoding="utf-8") as f:
        cfg = config_from_text(f.read())
    arrays = ad.load_checkpoint(path)
    params = {k: ad.parameter(v) for k, v in arrays.items()}
    return HybridModel(cfg, params=params)
