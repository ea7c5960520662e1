"""AP50 / mAP50 with all-point interpolation, per-image matching pooled per class."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .model import LFYOLO, Detection, box_iou, detect

log = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5


@dataclass
class EvalRecord:
    image_id: str
    detections: list[Detection]
    ground_truths: list[tuple[int, tuple[float, float, float, float]]]

    def __post_init__(self):
        self.detections = sorted(self.detections, key=lambda d: -d.score)


def match(dets: Sequence[Detection], gts: Sequence[tuple], iou_threshold: float = IOU_THRESHOLD) -> list[bool]:
    """TP flags for one class in one image, in descending-score order of ``dets``.

    Each detection takes the unmatched ground truth with the highest IoU; it
    is a TP when that IoU is at least ``iou_threshold``.
    """
    boxes = [g[1] if len(g) == 2 else g for g in gts]
    used = [False] * len(boxes)
    flags = []
    for d in sorted(dets, key=lambda d: -d.score):
        best, best_iou = -1, -1.0
        for k, g in enumerate(boxes):
            if not used[k]:
                v = box_iou(d.box, g)
                if v > best_iou:
                    best, best_iou = k, v
        hit = best >= 0 and best_iou >= iou_threshold
        if hit:
            used[best] = True
        flags.append(hit)
    return flags


def average_precision(scores: Sequence[float], flags: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated area under the PR curve.

    Tied scores enter the curve together, so the result depends only on the
    ranking of distinct scores.
    """
    if num_gt <= 0:
        raise ValidationError("AP is undefined without ground truths")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    s = np.asarray(scores, dtype=np.float64)[order]
    tp = np.cumsum(np.asarray(flags, dtype=np.float64)[order])
    fp = np.arange(1, len(s) + 1) - tp
    # keep only the last index of each tie group
    last = np.append(s[1:] != s[:-1], True)
    recall = tp[last] / num_gt
    precision = tp[last] / (tp[last] + fp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _class_curve(records: Sequence[EvalRecord], class_id: int, iou_threshold: float):
    scores, flags, num_gt = [], [], 0
    for rec in records:
        gts = [g for g in rec.ground_truths if g[0] == class_id]
        dets = [d for d in rec.detections if d.class_id == class_id]
        num_gt += len(gts)
        flags.extend(match(dets, gts, iou_threshold))
        scores.extend(d.score for d in sorted(dets, key=lambda d: -d.score))
    return scores, flags, num_gt


def ap50(records: Sequence[EvalRecord], class_id: int, iou_threshold: float = IOU_THRESHOLD) -> float | None:
    """AP for one class pooled over all records; None if the class has no ground truths."""
    scores, flags, num_gt = _class_curve(records, class_id, iou_threshold)
    if num_gt == 0:
        return None
    return average_precision(scores, flags, num_gt)


@dataclass
class MapReport:
    mean: float
    per_class: dict[int, float | None]
    class_names: list[str] | None = None
    skipped: list[int] = field(default_factory=list)

    def _name(self, c: int) -> str:
        if self.class_names and c < len(self.class_names):
            return self.class_names[c]
        return str(c)

    def to_csv(self) -> str:
        lines = ["class,AP50"]
        for c, ap in self.per_class.items():
            lines.append(f"{self._name(c)},{'' if ap is None else repr(ap)}")
        lines.append(f"mAP50,{self.mean!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"{'class':<12}{'AP50':>10}"]
        for c, ap in self.per_class.items():
            lines.append(f"{self._name(c):<12}{'n/a' if ap is None else f'{ap:.4f}':>10}")
        lines.append("-" * 22)
        lines.append(f"{'mAP50':<12}{self.mean:>10.4f}")
        for c in self.skipped:
            lines.append(f"note: class {self._name(c)} has no ground truths; excluded from the mean")
        return "\n".join(lines)


def map50(records: Sequence[EvalRecord], num_classes: int | None = None,
          iou_threshold: float = IOU_THRESHOLD, class_names: list[str] | None = None) -> MapReport:
    """Unweighted mean AP over classes that have ground truths."""
    classes = set(range(num_classes)) if num_classes else set()
    for rec in records:
        classes.update(g[0] for g in rec.ground_truths)
        classes.update(d.class_id for d in rec.detections)
    per_class = {c: ap50(records, c, iou_threshold) for c in sorted(classes)}
    skipped = [c for c, ap in per_class.items() if ap is None]
    for c in skipped:
        log.info("class %s has no ground truths; excluded from mAP", c)
    valid = [ap for ap in per_class.values() if ap is not None]
    if not valid:
        raise ValidationError("no class has ground truths; mAP is undefined")
    return MapReport(float(np.mean(valid)), per_class, class_names, skipped)


def gt_boxes(boxes, input_size: tuple[int, int]) -> list[tuple[int, tuple]]:
    """Normalized (class, cx, cy, w, h) to pixel (class, (x1, y1, x2, y2))."""
    h, w = input_size
    return [(int(c), ((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h))
            for c, cx, cy, bw, bh in boxes]


def collect_records(model: LFYOLO, samples, conf_threshold: float = 0.001,
                    nms_iou: float | None = None) -> list[EvalRecord]:
    from .dataio import load_image

    cfg = model.config
    model.eval()
    records = []
    for s in samples:
        image = load_image(s.image_path, cfg.input_size)
        dets = detect(model, image, conf_threshold, nms_iou)
        records.append(EvalRecord(str(s.image_path), dets, gt_boxes(s.boxes, cfg.input_size)))
    return records
