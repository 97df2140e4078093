"""Training: losses, ground-truth boxes, augmentation, the two-stage
schedule, and a procedural synthetic face dataset.

The synthetic faces are built in the face-template frame (so landmarks,
label geometry, and the face rectangle are mutually consistent by
construction) and then placed into the image by a random similarity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteLoss
from .geometry import TEMPLATE_POINTS, SimilarityTransform, estimate_similarity
from .model import (
    ComponentSpec,
    HybridModel,
    ModelConfig,
    boxes_from_tensor,
    init_params,
)
from .sampler import (
    Box,
    bilinear_gather,
    box_iou,
    labels_to_network_frame,
    nearest_gather,
    to_network_frame,
)

DEFAULT_TRAIN_SEED = 11
DEFAULT_HELDOUT_SEED = 12

LOSS_LOG_HEADER = ("iter", "stage", "l_comp", "l_inner", "l_outer", "total")

# left/right label ids exchanged by a horizontal flip
_FLIP_PAIRS = ((2, 3), (4, 5))
# landmark order after mirroring: eyes and mouth corners swap sides
_FLIP_LANDMARK_ORDER = (1, 0, 2, 4, 3)


@dataclass
class TrainSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8 class indices
    landmarks: np.ndarray  # (5, 2) float64 pixel coords


@dataclass(frozen=True)
class TrainConfig:
    stage1_iters: int = 300
    stage2_iters: int = 700
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    aug_background: bool = True
    aug_rotate_scale: bool = True
    aug_flip: bool = True
    aug_gamma: bool = True
    mode: str = "warp"
    padding: bool = True

    def __post_init__(self):
        if self.stage1_iters <= 0 or self.stage2_iters <= 0:
            raise ValueError("iteration counts must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


_BOOL_KEYS = ("aug_background", "aug_rotate_scale", "aug_flip", "aug_gamma", "padding")
_INT_KEYS = ("stage1_iters", "stage2_iters", "batch_size", "seed")
_FLOAT_KEYS = ("lr", "momentum")


def train_config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for key in _INT_KEYS + _FLOAT_KEYS + _BOOL_KEYS + ("mode",):
        value = getattr(cfg, key)
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def train_config_from_text(text: str) -> TrainConfig:
    kv = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    args = {}
    for key, value in kv.items():
        if key in _INT_KEYS:
            args[key] = int(value)
        elif key in _FLOAT_KEYS:
            args[key] = float(value)
        elif key in _BOOL_KEYS:
            args[key] = value.lower() == "true"
        elif key == "mode":
            args[key] = value
        else:
            raise ValueError(f"unknown training config key {key!r}")
    return TrainConfig(**args)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def _ellipse(qx, qy, cx, cy, ax, ay):
    return ((qx - cx) / ax) ** 2 + ((qy - cy) / ay) ** 2 <= 1.0


def _synth_sample(seed: int, index: int) -> TrainSample:
    rng = np.random.default_rng([seed, index])
    h = int(rng.integers(144, 193))
    w = int(rng.integers(144, 193))
    side = min(h, w)

    sigma = side * rng.uniform(0.26, 0.34)
    center = np.array(
        [w / 2 + rng.uniform(-0.04, 0.04) * side, h / 2 + rng.uniform(0.02, 0.10) * side]
    )
    rot = rng.uniform(-0.15, 0.15)
    frame = SimilarityTransform(sigma, rot, center)  # template frame -> image pixels

    landmarks = frame.apply(TEMPLATE_POINTS) + rng.uniform(-0.3, 0.3, size=(5, 2))

    # face-frame coordinates of every pixel center
    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    gx, gy = np.meshgrid(px, py)
    q = frame.invert().apply(np.stack([gx, gy], axis=-1))
    qx, qy = q[..., 0], q[..., 1]

    labels = np.zeros((h, w), dtype=np.uint8)

    hair_w = rng.uniform(0.18, 0.50)
    hair_l = rng.uniform(0.30, 1.10)
    hair_bottom = rng.uniform(0.30, 1.60)
    skin = _ellipse(qx, qy, 0.0, 0.12, 0.62, 0.78)
    hair = (
        _ellipse(qx, qy, 0.0, 0.12, 0.62 + hair_w, 0.78 + hair_l)
        & ~skin
        & (qy <= hair_bottom)
    )
    labels[hair] = 10
    labels[skin] = 1
    labels[_ellipse(qx, qy, -0.25, -0.26, 0.16, 0.05)] = 2
    labels[_ellipse(qx, qy, 0.25, -0.26, 0.16, 0.05)] = 3
    labels[_ellipse(qx, qy, -0.25, -0.10, 0.14, 0.08)] = 4
    labels[_ellipse(qx, qy, 0.25, -0.10, 0.14, 0.08)] = 5
    labels[_ellipse(qx, qy, 0.0, 0.04, 0.10, 0.18)] = 6
    mouth = _ellipse(qx, qy, 0.0, 0.40, 0.20, 0.10)
    if rng.uniform() < 0.25:  # closed mouth: no inner-mouth pixels
        labels[mouth & (qy < 0.40)] = 7
        labels[mouth & (qy >= 0.40)] = 9
    else:
        gap = rng.uniform(0.015, 0.040)
        labels[mouth & (qy < 0.40 - gap)] = 7
        labels[mouth & (np.abs(qy - 0.40) <= gap)] = 8
        labels[mouth & (qy > 0.40 + gap)] = 9

    skin_r = rng.uniform(0.70, 0.90)
    skin_col = np.array([skin_r, skin_r - rng.uniform(0.10, 0.20), skin_r - rng.uniform(0.20, 0.32)])
    hair_col = rng.uniform(0.03, 0.17, 3)
    palette = np.stack(
        [
            rng.uniform(0.35, 0.95, 3),  # background
            skin_col,
            np.clip(hair_col * rng.uniform(0.8, 1.2), 0.02, 0.22),  # left brow
            np.clip(hair_col * rng.uniform(0.8, 1.2), 0.02, 0.22),  # right brow
            rng.uniform(0.55, 0.85) * np.array([0.9, 0.95, 1.0]),  # left eye
            rng.uniform(0.55, 0.85) * np.array([0.9, 0.95, 1.0]),  # right eye
            skin_col * 0.82,
            np.array([rng.uniform(0.55, 0.75), 0.15, 0.20]),  # upper lip
            np.array([0.25, 0.05, 0.08]),  # inner mouth
            np.array([rng.uniform(0.65, 0.85), 0.25, 0.30]),  # lower lip
            hair_col,
        ]
    ).astype(np.float32)

    image = palette[labels]
    shade = 1.0 + rng.uniform(-0.18, 0.18) * (gy / h - 0.5)
    image = image * shade[:, :, None].astype(np.float32)
    image += rng.normal(0.0, 0.015, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return TrainSample(image=image, labels=labels, landmarks=landmarks)


def generate_synthetic(seed: int, count: int) -> list:
    """Deterministic procedural faces; sample i depends only on (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [_synth_sample(seed, i) for i in range(count)]


def default_dataset(count: int = 48) -> list:
    return generate_synthetic(DEFAULT_TRAIN_SEED, count)


def default_heldout(count: int = 16) -> list:
    return generate_synthetic(DEFAULT_HELDOUT_SEED, count)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _flip_labels(labels: np.ndarray) -> np.ndarray:
    lut = np.arange(11, dtype=labels.dtype)
    for a, b in _FLIP_PAIRS:
        lut[a], lut[b] = b, a
    return lut[labels[:, ::-1]]


def augment(
    sample: TrainSample,
    rng: np.random.Generator,
    background: bool = True,
    rotate_scale: bool = True,
    flip: bool = True,
    gamma: bool = True,
) -> TrainSample:
    """Seeded augmentation: background swap, rotation+scale about the face
    center, horizontal flip (with left/right label exchange), gamma."""
    image, labels, landmarks = sample.image, sample.labels, sample.landmarks
    h, w = labels.shape

    if background:
        if rng.uniform() < 0.5:
            bg = np.broadcast_to(rng.uniform(0.30, 1.00, 3).astype(np.float32), image.shape)
        else:
            grid = rng.uniform(0.20, 1.00, (4, 4, 3)).astype(np.float32)
            gx, gy = np.meshgrid((np.arange(w) + 0.5) / w * 4, (np.arange(h) + 0.5) / h * 4)
            bg = bilinear_gather(grid, gx, gy, policy="replicate").astype(np.float32)
        image = np.where(labels[:, :, None] == 0, bg, image)

    if rotate_scale:
        angle = np.deg2rad(rng.uniform(-18.0, 18.0))
        s = rng.uniform(0.9, 1.1)
        pivot = landmarks.mean(axis=0)
        lin = SimilarityTransform(s, angle, np.zeros(2))
        move = SimilarityTransform(s, angle, pivot - lin.matrix @ pivot)
        inv = move.invert()
        px = np.arange(w) + 0.5
        py = np.arange(h) + 0.5
        gx, gy = np.meshgrid(px, py)
        src = inv.apply(np.stack([gx, gy], axis=-1))
        image = bilinear_gather(image, src[..., 0], src[..., 1], policy="replicate").astype(np.float32)
        labels = nearest_gather(labels, src[..., 0], src[..., 1], fill=0).astype(np.uint8)
        landmarks = move.apply(landmarks)

    if flip and rng.uniform() < 0.5:
        image = image[:, ::-1].copy()
        labels = _flip_labels(labels)
        landmarks = landmarks[list(_FLIP_LANDMARK_ORDER)].copy()
        landmarks[:, 0] = w - landmarks[:, 0]

    if gamma:
        g = rng.uniform(0.5, 2.0)
        image = np.power(np.clip(image, 0.0, 1.0), g).astype(np.float32)

    return TrainSample(image=image, labels=labels, landmarks=landmarks)


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------


def gt_boxes_from_labels(warped_labels: np.ndarray, components) -> list:
    """Tight normalized boxes around each component's sub-label pixels.

    Upper edges are exclusive. Components with no pixels yield None and are
    excluded from the box-loss average.
    """
    h, w = warped_labels.shape
    boxes = []
    for comp in components:
        mask = np.isin(warped_labels, comp.class_ids)
        if not mask.any():
            boxes.append(None)
            continue
        ys, xs = np.nonzero(mask)
        boxes.append(Box(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h))
    return boxes


def box_loss(pred: Tensor, gt: np.ndarray, present: np.ndarray) -> Tensor:
    """Mean absolute box-coordinate error, averaged over present components
    and over the batch; absent components are masked out."""
    b, n, _ = pred.shape
    present = np.asarray(present, dtype=bool)
    weights = np.zeros((b, n, 4), dtype=np.float64)
    active_samples = 0
    for i in range(b):
        k = int(present[i].sum())
        if k:
            active_samples += 1
            weights[i, present[i], :] = 1.0 / (4 * k)
    if active_samples == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    weights /= active_samples
    diff = ad.sub(pred, Tensor(gt.astype(pred.dtype)))
    absdiff = ad.add(ad.relu(diff), ad.relu(ad.scale(diff, -1.0)))
    return ad.weighted_sum(absdiff, weights)


def inner_loss(logits_list, targets_list) -> Tensor:
    """Average cross-entropy over component heads; None entries are absent."""
    terms = [
        ad.cross_entropy_loss(logits, targets)
        for logits, targets in zip(logits_list, targets_list)
        if logits is not None and targets is not None
    ]
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def outer_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    return ad.cross_entropy_loss(logits, target)


def rasterize_local_target(
    warped_labels: np.ndarray, box: Box, comp: ComponentSpec, mask_size: int
) -> np.ndarray:
    """Nearest-neighbor raster of the warped labels inside a padded box,
    remapped to the component's local channels (background last)."""
    s = warped_labels.shape[0]
    u = (box.x0 + (np.arange(mask_size) + 0.5) / mask_size * box.width) * s
    v = (box.y0 + (np.arange(mask_size) + 0.5) / mask_size * box.height) * s
    uu, vv = np.meshgrid(u, v)
    raw = nearest_gather(warped_labels, uu, vv, fill=0)
    lut = np.full(int(warped_labels.max(initial=10)) + 1, len(comp.class_ids), dtype=np.int64)
    for local, cid in enumerate(comp.class_ids):
        lut[cid] = local
    return lut[raw]


def outer_target_from_labels(warped_labels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """3-class outer target: inner-component pixels fold into facial skin."""
    skin_ch = cfg.outer_class_ids.index(1)
    hair_ch = cfg.outer_class_ids.index(10)
    bg_ch = cfg.outer_class_ids.index(0)
    lut = np.full(cfg.num_classes, skin_ch, dtype=np.int64)
    lut[0] = bg_ch
    lut[10] = hair_ch
    return lut[warped_labels]


# ---------------------------------------------------------------------------
# the two-stage trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: HybridModel
    stage1_params: dict  # parameter snapshot (ndarrays) at the stage boundary
    loss_log: list  # rows matching LOSS_LOG_HEADER


def write_loss_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_HEADER)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


@dataclass
class _Batch:
    images: np.ndarray  # (B, 3, S, S)
    labels: np.ndarray  # (B, S, S)
    gt_boxes: np.ndarray  # (B, n, 4)
    present: np.ndarray  # (B, n) bool
    outer_targets: np.ndarray  # (B, S, S)


def _make_batch(samples, cfg: ModelConfig, train_cfg: TrainConfig, aug_rng) -> _Batch:
    s = cfg.warped_size
    n = cfg.n_components
    b = len(samples)
    images = np.empty((b, 3, s, s), dtype=np.float32)
    labels = np.empty((b, s, s), dtype=np.uint8)
    gt = np.zeros((b, n, 4), dtype=np.float32)
    present = np.zeros((b, n), dtype=bool)
    for i, sample in enumerate(samples):
        aug = augment(
            sample,
            aug_rng,
            background=train_cfg.aug_background,
            rotate_scale=train_cfg.aug_rotate_scale,
            flip=train_cfg.aug_flip,
            gamma=train_cfg.aug_gamma,
        )
        t = estimate_similarity(aug.landmarks)
        images[i] = to_network_frame(aug.image, t, (s, s), mode=cfg.input_mode).transpose(2, 0, 1)
        labels[i] = labels_to_network_frame(aug.labels, t, (s, s), mode=cfg.input_mode)
        for j, box in enumerate(gt_boxes_from_labels(labels[i], cfg.components)):
            if box is not None:
                present[i, j] = True
                gt[i, j] = box.as_array()
    outer_targets = outer_target_from_labels(labels, cfg)
    return _Batch(images, labels, gt, present, outer_targets)


def _check_finite(value: float, iteration: int, stage: int, detail: str):
    if not np.isfinite(value):
        raise NonFiniteLoss(f"stage {stage} iteration {iteration}: {detail} = {value}")


def stage2_losses(model: HybridModel, batch: _Batch, feats, box_pred: Tensor):
    """Box, inner, and outer losses for one prepared batch.

    RoI boxes come from the current box predictions but enter the mask path
    as constants; local targets are rasterized from the same padded boxes.
    """
    cfg = model.cfg
    l_comp = box_loss(box_pred, batch.gt_boxes, batch.present)
    boxes = boxes_from_tensor(box_pred.data)

    logits_list, targets_list = [], []
    for j, comp in enumerate(cfg.components):
        rois, targets = [], []
        for i in range(len(batch.images)):
            if not batch.present[i, j]:
                continue
            rb = model.roi_box_for(comp, boxes[i][j])
            rois.append((i, rb))
            targets.append(rasterize_local_target(batch.labels[i], rb, comp, cfg.mask_size))
        if rois:
            logits_list.append(model.segment_inner(comp, feats.mask_feat, rois))
            targets_list.append(np.stack(targets))
        else:
            logits_list.append(None)
            targets_list.append(None)
    l_inner = inner_loss(logits_list, targets_list)
    l_outer = outer_loss(model.segment_outer(feats.mask_feat), batch.outer_targets)
    return l_comp, l_inner, l_outer


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset,
    log_path=None,
    progress=None,
) -> TrainResult:
    """Two-stage optimization.

    Stage 1 trains the trunk and box head with the box loss only; stage 2
    trains everything with the sum of box, inner, and outer losses (unit
    weights). Momentum state is reset at the stage boundary. Raises
    :class:`NonFiniteLoss` if any loss leaves the real line.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    cfg = replace(model_cfg, input_mode=train_cfg.mode, padding_enabled=train_cfg.padding)
    init_seed, order_seed, aug_seed = np.random.SeedSequence(train_cfg.seed).generate_state(3)
    model = HybridModel(cfg, params=init_params(cfg, seed=int(init_seed)))
    order_rng = np.random.default_rng(int(order_seed))
    aug_rng = np.random.default_rng(int(aug_seed))

    log_rows = []

    def pick_batch():
        idx = order_rng.integers(0, len(dataset), size=train_cfg.batch_size)
        return _make_batch([dataset[i] for i in idx], cfg, train_cfg, aug_rng)

    stage1_names = model.param_names("trunk+fpn+box")
    opt = ad.SgdMomentum({k: model.params[k] for k in stage1_names}, train_cfg.lr, train_cfg.momentum)
    for it in range(1, train_cfg.stage1_iters + 1):
        batch = pick_batch()
        opt.zero_grad()
        feats = model.extract_features(Tensor(batch.images), want_mask=False)
        l_comp = box_loss(model.predict_components(feats.box_feat), batch.gt_boxes, batch.present)
        value = l_comp.item()
        _check_finite(value, it, 1, "box loss")
        ad.backward(l_comp)
        opt.step()
        log_rows.append((it, 1, value, None, None, value))
        if progress and it % progress == 0:
            print(f"stage 1 iter {it}/{train_cfg.stage1_iters}: l_comp={value:.4f}", flush=True)

    stage1_params = {k: t.data.copy() for k, t in model.params.items()}

    opt = ad.SgdMomentum(model.params, train_cfg.lr, train_cfg.momentum)
    for it in range(1, train_cfg.stage2_iters + 1):
        batch = pick_batch()
        opt.zero_grad()
        feats = model.extract_features(Tensor(batch.images), want_mask=True)
        box_pred = model.predict_components(feats.box_feat)
        l_comp, l_inner, l_outer = stage2_losses(model, batch, feats, box_pred)
        total = ad.add(ad.add(l_comp, l_inner), l_outer)
        value = total.item()
        _check_finite(value, it, 2, "total loss")
        ad.backward(total)
        opt.step()
        log_rows.append(
            (
                train_cfg.stage1_iters + it,
                2,
                l_comp.item(),
                l_inner.item(),
                l_outer.item(),
                value,
            )
        )
        if progress and it % progress == 0:
            print(
                f"stage 2 iter {it}/{train_cfg.stage2_iters}: total={value:.4f}",
                flush=True,
            )

    if log_path is not None:
        write_loss_log(log_path, log_rows)
    return TrainResult(model=model, stage1_params=stage1_params, loss_log=log_rows)


# ---------------------------------------------------------------------------
# evaluation helpers used by experiments and the acceptance suite
# ---------------------------------------------------------------------------


def predicted_boxes(model: HybridModel, sample: TrainSample, mode: str | None = None):
    """Component boxes predicted for one sample, plus its ground-truth boxes."""
    cfg = model.cfg
    mode = mode or cfg.input_mode
    s = cfg.warped_size
    t = estimate_similarity(sample.landmarks)
    warped = to_network_frame(sample.image, t, (s, s), mode=mode)
    warped_labels = labels_to_network_frame(sample.labels, t, (s, s), mode=mode)
    feats = model.extract_features(Tensor(warped.transpose(2, 0, 1)[None]), want_mask=False)
    pred = boxes_from_tensor(model.predict_components(feats.box_feat).data[0])
    gt = gt_boxes_from_labels(warped_labels, cfg.components)
    return pred, gt


def mean_box_iou(model: HybridModel, samples, mode: str | None = None) -> float:
    """Mean IoU between predicted and ground-truth boxes over present components."""
    ious = []
    for sample in samples:
        pred, gt = predicted_boxes(model, sample, mode)
        ious.extend(box_iou(p, g) for p, g in zip(pred, gt) if g is not None)
    return float(np.mean(ious)) if ious else 0.0
