"""Pixel F-measure scoring and multi-face instance fusion.

Scores are micro-averaged: true/false positive and negative pixel counts
are pooled over the whole dataset before precision, recall, and F are
formed. The "overall" row scores the binarized union of the eight inner
facial component labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .model import CLASS_NAMES, INNER_CLASS_IDS

NO_INSTANCE = -1


@dataclass
class ClassScores:
    """Pooled per-class pixel counts, plus the inner-union and accuracy tallies."""

    num_classes: int = len(CLASS_NAMES)
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    overall_tp: int = 0
    overall_fp: int = 0
    overall_fn: int = 0
    correct: int = 0
    total: int = 0

    def __post_init__(self):
        if self.tp is None:
            self.tp = np.zeros(self.num_classes, dtype=np.int64)
            self.fp = np.zeros(self.num_classes, dtype=np.int64)
            self.fn = np.zeros(self.num_classes, dtype=np.int64)

    def precision(self, c: int) -> float:
        d = self.tp[c] + self.fp[c]
        return self.tp[c] / d if d else 0.0

    def recall(self, c: int) -> float:
        d = self.tp[c] + self.fn[c]
        return self.tp[c] / d if d else 0.0

    def f_measure(self, c: int):
        """F = 2PR/(P+R); 0 when P+R is 0; None when the class never occurs."""
        if self.tp[c] + self.fp[c] + self.fn[c] == 0:
            return None
        p, r = self.precision(c), self.recall(c)
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def overall_f(self) -> float:
        tp, fp, fn = self.overall_tp, self.overall_fp, self.overall_fn
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def overall_recall(self) -> float:
        d = self.overall_tp + self.overall_fn
        return self.overall_tp / d if d else 0.0

    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def f_measure(pred: np.ndarray, gt: np.ndarray, accum: ClassScores | None = None) -> ClassScores:
    """Accumulate pixel counts for one prediction/ground-truth pair."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"f_measure: pred {pred.shape} vs gt {gt.shape}")
    scores = accum if accum is not None else ClassScores()
    k = scores.num_classes
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    cm = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    diag = np.diag(cm)
    scores.tp += diag
    scores.fp += cm.sum(axis=0) - diag
    scores.fn += cm.sum(axis=1) - diag
    scores.correct += int(diag.sum())
    scores.total += pred.size

    pred_inner = np.isin(pred, INNER_CLASS_IDS)
    gt_inner = np.isin(gt, INNER_CLASS_IDS)
    scores.overall_tp += int(np.count_nonzero(pred_inner & gt_inner))
    scores.overall_fp += int(np.count_nonzero(pred_inner & ~gt_inner))
    scores.overall_fn += int(np.count_nonzero(~pred_inner & gt_inner))
    return scores


def write_report(path, scores: ClassScores, class_names=CLASS_NAMES):
    """CSV report: one row per class plus overall and pixel accuracy.

    Classes absent from both prediction and ground truth report "-".
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("# micro-averaged: pixel counts pooled over the dataset before P/R/F\n")
        writer = csv.writer(f)
        writer.writerow(("class", "precision", "recall", "f_measure"))
        for c, name in enumerate(class_names):
            fm = scores.f_measure(c)
            if fm is None:
                writer.writerow((name, "-", "-", "-"))
            else:
                writer.writerow(
                    (name, f"{scores.precision(c):.4f}", f"{scores.recall(c):.4f}", f"{fm:.4f}")
                )
        ov_tp, ov_fp, ov_fn = scores.overall_tp, scores.overall_fp, scores.overall_fn
        p = ov_tp / (ov_tp + ov_fp) if ov_tp + ov_fp else 0.0
        r = ov_tp / (ov_tp + ov_fn) if ov_tp + ov_fn else 0.0
        writer.writerow(("overall", f"{p:.4f}", f"{r:.4f}", f"{scores.overall_f():.4f}"))
        writer.writerow(("accuracy", "", "", f"{scores.accuracy():.4f}"))


def fuse_multiface(per_face: list) -> tuple:
    """Fuse de-warped per-face score maps into one label map and instance map.

    Each map is (H, W, C) softmax scores with channel 0 = background. Per
    pixel, each face contributes its maximal non-background score; the
    instance is the face with the largest such score and the label is that
    face's argmax channel. Where every face's argmax is background the label
    is background and the instance is NO_INSTANCE.
    """
    if not per_face:
        raise ValueError("need at least one score map")
    shape = per_face[0].shape
    for m in per_face:
        if m.shape != shape:
            raise ShapeMismatch(f"score map shapes differ: {m.shape} vs {shape}")
    stack = np.stack(per_face)  # (F, H, W, C)
    fg_max = stack[..., 1:].max(axis=-1)  # (F, H, W)
    argmax_channel = stack.argmax(axis=-1)  # (F, H, W)

    winner = fg_max.argmax(axis=0)  # (H, W) face index
    hh, ww = np.ix_(np.arange(shape[0]), np.arange(shape[1]))
    labels = argmax_channel[winner, hh, ww].astype(np.uint8)
    instances = winner.astype(np.int32)

    all_background = (argmax_channel == 0).all(axis=0)
    labels[all_background] = 0
    instances[all_background] = NO_INSTANCE
    return labels, instances
