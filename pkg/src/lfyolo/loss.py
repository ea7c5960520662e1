"""Detection losses, target assignment, SGD, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, LFYoloError, ValidationError
from .model import LFYOLO, ModelConfig, box_iou, build
from .tensor import GradTape, Tensor, backward

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOG_FIELDS = ("epoch", "step", "l_obj", "l_cls", "l_box", "l_total", "lr")


def bce_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean binary cross entropy over unmasked elements; 0 when the mask is empty."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    m = np.ones(pred.shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    count = float(m.sum())
    if count == 0:
        return Tensor(0.0)
    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    per = -(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))
    return T.tsum(per * m) * (1.0 / count)


def iou(box_a, box_b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; 0 for degenerate boxes."""
    return box_iou(box_a, box_b)


def box_iou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise IoU between predicted (P, 4) and ground-truth (P, 4) corner boxes."""
    gt = np.asarray(gt, dtype=np.float64)
    px1, py1, px2, py2 = (pred[:, k] for k in range(4))
    iw = T.clip(T.minimum(px2, gt[:, 2]) - T.maximum(px1, gt[:, 0]), 0.0, None)
    ih = T.clip(T.minimum(py2, gt[:, 3]) - T.maximum(py1, gt[:, 1]), 0.0, None)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = area_p + area_g - inter
    return inter / T.maximum(union, 1e-12)


def iou_loss(pred, gt) -> Tensor:
    """Mean of 1 - IoU over rows."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.atleast_2d(pred))
    if pred.ndim == 1:
        pred = pred.reshape(1, 4)
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    return T.mean(1.0 - box_iou_tensor(pred, gt))


@dataclass
class HeadTargets:
    obj: np.ndarray          # (n, 3, gh, gw) in {0, 1}
    ignore: np.ndarray       # (n, 3, gh, gw) bool
    batch: np.ndarray        # positive indices, each (P,)
    anchor: np.ndarray
    row: np.ndarray
    col: np.ndarray
    cls: np.ndarray          # (P, num_classes) one-hot
    boxes: np.ndarray        # (P, 4) pixel corners


@dataclass
class TargetMap:
    heads: list[HeadTargets]

    @property
    def num_positives(self) -> int:
        return sum(len(h.batch) for h in self.heads)


def _shape_iou(w: float, h: float, anchors) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64)
    inter = np.minimum(w, a[:, 0]) * np.minimum(h, a[:, 1])
    return inter / (w * h + a[:, 0] * a[:, 1] - inter)


def assign_targets(annotations: Sequence[Sequence[float]], config: ModelConfig) -> TargetMap:
    """Targets for one image from normalized ``(class, cx, cy, w, h)`` boxes.

    Each box gets exactly one positive slot: the best shape-IoU anchor (falling
    back to the next best if taken) in the cell holding its centre. Other
    anchors with shape-IoU > 0.5 are ignored for objectness at their own cell.
    """
    H, W = config.input_size
    nc = config.num_classes
    grids = [(H // s, W // s) for s in config.strides]
    obj = [np.zeros((1, 3, gh, gw)) for gh, gw in grids]
    ignore = [np.zeros((1, 3, gh, gw), dtype=bool) for gh, gw in grids]
    pos: list[list] = [[] for _ in grids]

    def cell(k, cx, cy):
        s = config.strides[k]
        gh, gw = grids[k]
        return min(int(cy // s), gh - 1), min(int(cx // s), gw - 1)

    for idx, ann in enumerate(annotations):
        c, cx, cy, bw, bh = ann
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise ValidationError(f"annotation {idx}: box centre ({cx}, {cy}) outside the image")
        if not 0 <= int(c) < nc:
            raise ValidationError(f"annotation {idx}: class {int(c)} not below num_classes={nc}")
        px, py, pw, ph = cx * W, cy * H, bw * W, bh * H
        if pw <= 0 or ph <= 0:
            raise ValidationError(f"annotation {idx}: non-positive box size")
        ious = _shape_iou(pw, ph, config.anchors)
        chosen = None
        for best in np.argsort(-ious, kind="stable"):
            k, a = divmod(int(best), 3)
            i, j = cell(k, px, py)
            if obj[k][0, a, i, j] == 0:
                chosen = (k, a, i, j)
                break
        if chosen is None:
            raise ValidationError(f"annotation {idx}: every anchor slot at its centre is already taken")
        k, a, i, j = chosen
        obj[k][0, a, i, j] = 1.0
        onehot = np.zeros(nc)
        onehot[int(c)] = 1.0
        pos[k].append((a, i, j, onehot, (px - pw / 2, py - ph / 2, px + pw / 2, py + ph / 2)))
        for other in np.nonzero(ious > 0.5)[0]:
            k2, a2 = divmod(int(other), 3)
            i2, j2 = cell(k2, px, py)
            ignore[k2][0, a2, i2, j2] = True

    heads = []
    for k in range(len(grids)):
        ignore[k] &= obj[k] == 0
        p = pos[k]
        heads.append(HeadTargets(
            obj=obj[k], ignore=ignore[k],
            batch=np.zeros(len(p), dtype=int),
            anchor=np.array([q[0] for q in p], dtype=int),
            row=np.array([q[1] for q in p], dtype=int),
            col=np.array([q[2] for q in p], dtype=int),
            cls=np.array([q[3] for q in p]).reshape(len(p), nc),
            boxes=np.array([q[4] for q in p], dtype=np.float64).reshape(len(p), 4)))
    return TargetMap(heads)


def stack_targets(maps: Sequence[TargetMap]) -> TargetMap:
    """Concatenate single-image target maps into one batch map."""
    heads = []
    for k in range(len(maps[0].heads)):
        hs = [m.heads[k] for m in maps]
        heads.append(HeadTargets(
            obj=np.concatenate([h.obj for h in hs]),
            ignore=np.concatenate([h.ignore for h in hs]),
            batch=np.concatenate([np.full(len(h.batch), b, dtype=int) for b, h in enumerate(hs)]),
            anchor=np.concatenate([h.anchor for h in hs]),
            row=np.concatenate([h.row for h in hs]),
            col=np.concatenate([h.col for h in hs]),
            cls=np.concatenate([h.cls for h in hs]),
            boxes=np.concatenate([h.boxes for h in hs])))
    return TargetMap(heads)


@dataclass
class LossParts:
    total: Tensor
    obj: float
    cls: float
    box: float

    @property
    def value(self) -> float:
        return float(self.total.data)


def decode_boxes(rows: Tensor, anchors: np.ndarray, col: np.ndarray, row: np.ndarray, stride: int) -> Tensor:
    """Corner boxes (P, 4) from gathered raw rows (P, >=4) via the YOLO parameterization."""
    cx = (T.sigmoid(rows[:, 0]) + col.astype(np.float64)) * float(stride)
    cy = (T.sigmoid(rows[:, 1]) + row.astype(np.float64)) * float(stride)
    bw = T.exp(T.clip(rows[:, 2], None, 10.0)) * anchors[:, 0]
    bh = T.exp(T.clip(rows[:, 3], None, 10.0)) * anchors[:, 1]
    half_w, half_h = bw * 0.5, bh * 0.5
    corners = [cx - half_w, cy - half_h, cx + half_w, cy + half_h]
    return T.concat([T.reshape(c, (-1, 1)) for c in corners], axis=1)


def total_loss(raw_heads: Sequence[Tensor], targets: TargetMap, config: ModelConfig,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LossParts:
    """L_obj + L_cls + L_box with optional per-term weights (unit by default)."""
    per = config.outputs_per_anchor
    obj_terms, obj_count = [], 0.0
    gathered, cls_t, boxes_t = [], [], []
    decoded = []
    for k, (raw, tg) in enumerate(zip(raw_heads, targets.heads)):
        n, ch, gh, gw = raw.shape
        r = T.reshape(raw, (n, 3, per, gh, gw))
        mask = ~tg.ignore
        obj_p = T.sigmoid(r[:, :, 4])
        count = float(mask.sum())
        if count:
            p = T.clip(obj_p, PROB_EPS, 1.0 - PROB_EPS)
            y = tg.obj
            per_el = -(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))
            obj_terms.append(T.tsum(per_el * mask.astype(np.float64)))
            obj_count += count
        if len(tg.batch):
            rows = r[tg.batch, tg.anchor, :, tg.row, tg.col]
            gathered.append(rows)
            cls_t.append(tg.cls)
            boxes_t.append(tg.boxes)
            anchors = np.asarray(config.head_anchors(k))[tg.anchor]
            decoded.append(decode_boxes(rows, anchors, tg.col, tg.row, config.strides[k]))

    zero = Tensor(0.0)
    l_obj = zero
    if obj_terms:
        acc = obj_terms[0]
        for t in obj_terms[1:]:
            acc = acc + t
        l_obj = acc * (1.0 / obj_count)
    if gathered:
        rows = T.concat(gathered, axis=0) if len(gathered) > 1 else gathered[0]
        l_cls = bce_loss(T.sigmoid(rows[:, 5:]), np.concatenate(cls_t))
        pred_boxes = T.concat(decoded, axis=0) if len(decoded) > 1 else decoded[0]
        l_box = iou_loss(pred_boxes, np.concatenate(boxes_t))
    else:
        l_cls = l_box = zero
    wo, wc, wb = weights
    total = l_obj * wo + l_cls * wc + l_box * wb
    return LossParts(total, float(l_obj.data), float(l_cls.data), float(l_box.data))


@dataclass
class SGD:
    """Momentum SGD: ``v <- m * v + (g + wd * w)``; ``w <- w - lr * v``."""

    params: list[tuple[str, Tensor]]
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise ContractError(f"non-finite or missing gradient for parameter {name}; step aborted")
        for name, p in self.params:
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.buffers.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.buffers[name] = v
            p.data = p.data - self.lr * v


def sgd_step(params: list[tuple[str, Tensor]], state: SGD) -> None:
    state.params = params
    state.step()


def lr_at(epoch: int, epochs: int, base_lr: float, milestones=(0.8, 0.9)) -> float:
    """Step schedule: x0.1 once ``epoch`` reaches each milestone fraction of ``epochs``."""
    lr = base_lr
    for m in milestones:
        if epoch >= m * epochs:
            lr *= 0.1
    return lr


class DataError(LFYoloError):
    """No usable training samples."""


@dataclass
class TrainResult:
    model: LFYOLO
    log: list[dict]
    best_epoch: int
    skipped: int


def _load_samples(samples, config):
    from .dataio import load_image

    images, targets, kept, skipped = [], [], [], 0
    for s in samples:
        try:
            img = load_image(s.image_path, config.input_size)
            tmap = assign_targets(s.boxes, config)
        except (OSError, LFYoloError) as exc:
            log.warning("skipping %s: %s", s.image_path, exc)
            skipped += 1
            continue
        images.append(img.data)
        targets.append(tmap)
        kept.append(s)
    return images, targets, kept, skipped


def train(samples, config: ModelConfig, epochs: int, lr: float = 0.01, seed: int = 0,
          batch_size: int = 4, out_dir: str | Path | None = None,
          loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
          momentum: float = 0.9, weight_decay: float = 0.0005,
          model: LFYOLO | None = None,
          on_step: Callable[[dict], bool | None] | None = None) -> TrainResult:
    """Full-manifest-order SGD training with step decay at 80% and 90% of epochs.

    ``samples`` is a list of :class:`~lfyolo.dataio.AnnotatedSample`. When
    ``out_dir`` is given, ``last.lfyw``, ``best.lfyw`` and ``loss_log.csv``
    are written there. ``on_step`` sees each log row after the update and
    may return True to stop early; it may switch the model to eval mode,
    training mode is restored afterwards.
    """
    if not samples:
        raise DataError("manifest is empty")
    images, targets, kept, skipped = _load_samples(samples, config)
    if not images:
        raise DataError(f"all {skipped} samples were unreadable")
    model = model or build(config, seed)
    model.train()
    params = list(model.named_parameters())
    opt = SGD(params, lr, momentum, weight_decay)
    rows: list[dict] = []
    best_epoch, best_loss, best_state = -1, math.inf, None
    step, stop = 0, False
    for epoch in range(epochs):
        opt.lr = lr_at(epoch, epochs, lr)
        epoch_total = []
        for start in range(0, len(images), batch_size):
            batch = Tensor(np.concatenate(images[start:start + batch_size]))
            tmap = stack_targets(targets[start:start + batch_size])
            with GradTape() as tape:
                heads = model(batch)
                parts = total_loss(heads, tmap, config, loss_weights)
            backward(tape, parts.total, [p for _, p in params])
            opt.step()
            row = {"epoch": epoch, "step": step, "l_obj": parts.obj, "l_cls": parts.cls,
                   "l_box": parts.box, "l_total": parts.value, "lr": opt.lr}
            rows.append(row)
            epoch_total.append(parts.value)
            step += 1
            if on_step:
                stop = bool(on_step(row))
                model.train()
                if stop:
                    break
        mean_total = float(np.mean(epoch_total))
        if mean_total < best_loss:
            best_epoch, best_loss = epoch, mean_total
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if stop:
            break
    model.eval()
    if out_dir is not None:
        from .dataio import save_weights

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_weights(model.state_dict(), out / "last.lfyw")
        save_weights(best_state, out / "best.lfyw")
        write_loss_log(rows, out / "loss_log.csv")
    return TrainResult(model, rows, best_epoch, skipped)


def write_loss_log(rows: list[dict], path) -> None:
    from .dataio import atomic_write

    lines = [",".join(LOG_FIELDS)]
    for r in rows:
        lines.append(f"{r['epoch']},{r['step']},{r['l_obj']!r},{r['l_cls']!r},{r['l_box']!r},"
                     f"{r['l_total']!r},{r['lr']!r}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())
