"""Segmentation metrics and multi-scale flip inference."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, LabelError

DEFAULT_TTA_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, k: int):
        if k < 1:
            raise DimensionError("confusion matrix needs at least one class")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int = 255) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} vs labels {gt.shape}")
        keep = gt != ignore_index
        bad_gt = keep & ((gt < 0) | (gt >= self.k))
        if np.any(bad_gt):
            raise LabelError(f"ground-truth labels outside [0,{self.k}): "
                             f"{np.unique(gt[bad_gt]).tolist()}")
        p = pred[keep]
        if p.size and (p.min() < 0 or p.max() >= self.k):
            raise LabelError(f"predictions outside [0,{self.k})")
        g = gt[keep]
        flat = g.astype(np.int64) * self.k + p.astype(np.int64)
        self.counts += np.bincount(flat, minlength=self.k * self.k).reshape(self.k, self.k)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.k != self.k:
            raise DimensionError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IoUReport:
    per_class_iou: list[float | None]
    miou: float
    class_names: tuple[str, ...] | None = None

    def tsv(self) -> str:
        lines = []
        for idx, iou in enumerate(self.per_class_iou):
            name = self.class_names[idx] if self.class_names else str(idx)
            val = "undefined" if iou is None else f"{iou:.4f}"
            lines.append(f"{idx}\t{name}\t{val}")
        lines.append(f"miou\t{self.miou:.4f}")
        return "\n".join(lines)


def iou_report(cm: ConfusionMatrix, class_names=None) -> IoUReport:
    """Per-class intersection over union; absent classes are excluded."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class: list[float | None] = []
    defined = []
    for c in range(cm.k):
        if denom[c] == 0:
            per_class.append(None)
        else:
            iou = float(tp[c] / denom[c])
            per_class.append(iou)
            defined.append(iou)
    miou = float(np.mean(defined)) if defined else 0.0
    return IoUReport(per_class_iou=per_class, miou=miou, class_names=class_names)


def _resize_image(x: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    with dc.no_grad():
        return dc.pool_and_resize(Tensor(x), "bilinear", hw).data


def tta_inference(forward_fn, image: np.ndarray, scales=DEFAULT_TTA_SCALES,
                  flip: bool = True) -> np.ndarray:
    """Average logits over rescaled (and mirrored) copies of the input.

    ``forward_fn`` maps a (B,3,H,W) float array to (B,K,H,W) logits. The
    averaged map is returned at the native input resolution.
    """
    scales = tuple(scales)
    if not scales:
        raise DimensionError("tta needs at least one scale")
    if image.ndim == 3:
        image = image[None]
    h, w = image.shape[2], image.shape[3]
    acc = None
    n = 0
    for scale in scales:
        if scale == 1.0:
            scaled = image
        else:
            scaled = _resize_image(image, (max(1, round(h * scale)), max(1, round(w * scale))))
        variants = [scaled]
        if flip:
            variants.append(np.ascontiguousarray(scaled[..., ::-1]))
        for idx, v in enumerate(variants):
            logits = forward_fn(v)
            if idx == 1:
                logits = np.ascontiguousarray(logits[..., ::-1])
            if logits.shape[2:] != (h, w):
                logits = _resize_image(logits, (h, w))
            acc = logits.astype(np.float64) if acc is None else acc + logits
            n += 1
    return (acc / n).astype(np.float32)


def evaluate_split(forward_fn, samples, k: int, ignore_index: int = 255,
                   class_names=None, tta: bool = False,
                   scales=DEFAULT_TTA_SCALES, flip: bool = True,
                   dump_fn=None, batch_size: int = 8) -> IoUReport:
    """Deterministic IoU report over (id, image, label) triples.

    ``samples`` yields (sample_id, image (3,H,W), label (H,W)). With
    ``tta`` off, same-shaped samples are batched for speed. ``dump_fn``
    receives (sample_id, prediction) per image when given.
    """
    cm = ConfusionMatrix(k)
    pending: list[tuple[str, np.ndarray, np.ndarray]] = []

    def flush():
        if not pending:
            return
        batch = np.stack([img for _, img, _ in pending])
        logits = forward_fn(batch)
        preds = np.argmax(logits, axis=1)
        for (sid, _, label), pred in zip(pending, preds):
            cm.update(pred, label, ignore_index)
            if dump_fn is not None:
                dump_fn(sid, pred)
        pending.clear()

    for sid, image, label in samples:
        if tta:
            logits = tta_inference(forward_fn, image, scales, flip)
            pred = np.argmax(logits[0], axis=0)
            cm.update(pred, label, ignore_index)
            if dump_fn is not None:
                dump_fn(sid, pred)
        else:
            if pending and pending[0][1].shape != image.shape:
                flush()
            pending.append((sid, image, label))
            if len(pending) >= batch_size:
                flush()
    flush()
    return iou_report(cm, class_names)
