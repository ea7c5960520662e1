"""LF-YOLO graph assembly, head decoding, and non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import CBL, EFE, RMF, EfeSpec, GhostConv, GhostSpec, RmfSpec
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Layer, MaxPool, TraceRow
from .tensor import Tensor

# YOLOv3 COCO anchors, defined for a 416x416 input.
REFERENCE_ANCHORS = ((10, 13), (16, 30), (33, 23), (30, 61), (62, 45), (59, 119),
                     (116, 90), (156, 198), (373, 326))
REFERENCE_SIZE = 416
BASE_WIDTH = 32

# (stage width in units of C, number of EFE blocks) after each of the five max-pools.
STAGES = ((2, 1), (4, 2), (8, 4), (16, 4), (16, 2))


def default_anchors(input_size: tuple[int, int]) -> tuple[tuple[float, float], ...]:
    h, w = input_size
    return tuple((aw * w / REFERENCE_SIZE, ah * h / REFERENCE_SIZE) for aw, ah in REFERENCE_ANCHORS)


@dataclass
class ModelConfig:
    width_multiplier: float = 1.0
    num_classes: int = 3
    input_size: tuple[int, int] = (320, 320)
    anchors: tuple[tuple[float, float], ...] | None = None
    strides: tuple[int, int, int] = (8, 16, 32)
    conf_threshold: float = 0.25
    nms_iou: float = 0.45

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.anchors is None:
            self.anchors = default_anchors(self.input_size)
        self.anchors = tuple(sorted((tuple(float(v) for v in a) for a in self.anchors),
                                    key=lambda a: a[0] * a[1]))
        self.strides = tuple(int(s) for s in self.strides)
        self.validate()

    @property
    def width(self) -> int:
        """Channel constant C (32 at width multiplier 1)."""
        return int(round(BASE_WIDTH * self.width_multiplier))

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    def head_anchors(self, head: int) -> tuple[tuple[float, float], ...]:
        return self.anchors[3 * head: 3 * head + 3]

    def validate(self) -> None:
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input size {h}x{w} must be positive multiples of 32")
        if self.width_multiplier <= 0 or self.width % 4:
            raise ConfigError(f"width multiplier {self.width_multiplier} gives C={self.width}; "
                              "C must be a multiple of 4")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.anchors) != 9 or any(a[0] <= 0 or a[1] <= 0 for a in self.anchors):
            raise ConfigError(f"expected 9 positive anchors, got {len(self.anchors)}")
        if self.strides != (8, 16, 32):
            raise ConfigError(f"strides must be (8, 16, 32), got {self.strides}")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ConfigError(f"conf_threshold {self.conf_threshold} outside [0, 1]")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou {self.nms_iou} outside [0, 1]")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


class Backbone(Layer):
    """Layers S1-S20: stem CBL, five 2x2 max-pools, EFE stages, RMF."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        C = config.width
        self.order: list[str] = []
        ch = C // 2
        self._add("s1", CBL(3, ch, 3, rng=rng))
        idx = 2
        self.stage_outputs: dict[int, str] = {}
        stride = 1
        for mult, blocks in STAGES:
            self._add(f"s{idx}", MaxPool(2, 2))
            idx += 1
            stride *= 2
            width = mult * C
            for _ in range(blocks):
                self._add(f"s{idx}", EFE(EfeSpec(ch, width), rng=rng))
                ch = width
                idx += 1
            self.stage_outputs[stride] = f"s{idx - 1}"
        self._add(f"s{idx}", RMF(RmfSpec(ch), rng=rng))
        self.out_channels = 6 * ch

    def _add(self, name: str, layer: Layer) -> None:
        self.add_child(name, layer)
        self.order.append(name)

    def forward_all(self, x: Tensor) -> dict[str, Tensor]:
        feats = {}
        for name in self.order:
            x = getattr(self, name)(x)
            feats[name] = x
        return feats

    def forward(self, x):
        return self.forward_all(x)[self.order[-1]]

    def trace(self, shape, rows, prefix):
        for name in self.order:
            shape = getattr(self, name).trace(shape, rows, f"{prefix}.{name}")
        return shape


class Head(Layer):
    """CBL 1x1 reduce -> Ghost Conv 3x3 -> bare 1x1 conv with bias to 3 * (5 + classes)."""

    def __init__(self, c_in: int, width: int, outputs: int, rng: np.random.Generator):
        super().__init__()
        self.reduce = CBL(c_in, width, 1, rng=rng)
        self.ghost = GhostConv(GhostSpec(width, 2 * width, 2, primary_kernel=3, cheap_kernel=3), rng=rng)
        self.out = Conv2d(2 * width, outputs, 1, bias=True, rng=rng)
        self.out.weight.data *= 0.01

    def forward(self, x):
        trunk = self.reduce(x)
        return trunk, self.out(self.ghost(trunk))

    def trace(self, shape, rows, prefix):
        trunk = self.reduce.trace(shape, rows, prefix + ".reduce")
        g = self.ghost.trace(trunk, rows, prefix + ".ghost")
        return trunk, self.out.trace(g, rows, prefix + ".out")


class LFYOLO(Layer):
    """Backbone plus three FPN-style heads at strides 8, 16, 32."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        C = config.width
        out = 3 * config.outputs_per_anchor
        self.backbone = Backbone(config, rng)
        feat16 = STAGES[3][0] * C
        feat8 = STAGES[2][0] * C
        # head width = backbone width at that stride / 8
        w32, w16, w8 = STAGES[4][0] * C // 8, feat16 // 8, feat8 // 8
        self.head32 = Head(self.backbone.out_channels, w32, out, rng)
        self.route16 = CBL(w32, w32 // 2, 1, rng=rng)
        self.head16 = Head(w32 // 2 + feat16, w16, out, rng)
        self.route8 = CBL(w16, w16 // 2, 1, rng=rng)
        self.head8 = Head(w16 // 2 + feat8, w8, out, rng)
        for head in (self.head8, self.head16, self.head32):
            head.out.bias.data[4::config.outputs_per_anchor] = -4.0

    @property
    def layer_names(self) -> list[str]:
        return list(self.backbone.order)

    def _check_input(self, image: Tensor) -> None:
        h, w = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (h, w):
            raise ShapeError(f"image shape {image.shape} does not match configured (n, 3, {h}, {w})")

    def forward_features(self, image: Tensor) -> tuple[dict[str, Tensor], list[Tensor]]:
        self._check_input(image)
        feats = self.backbone.forward_all(image)
        b = self.backbone
        trunk32, p32 = self.head32(feats[b.order[-1]])
        up16 = T.upsample_nearest_2x(self.route16(trunk32))
        trunk16, p16 = self.head16(T.concat([up16, feats[b.stage_outputs[16]]], axis=1))
        up8 = T.upsample_nearest_2x(self.route8(trunk16))
        _, p8 = self.head8(T.concat([up8, feats[b.stage_outputs[8]]], axis=1))
        return feats, [p8, p16, p32]

    def forward(self, image: Tensor) -> list[Tensor]:
        """Raw (pre-sigmoid) head maps at strides 8, 16, 32."""
        return self.forward_features(image)[1]

    def trace(self, shape, rows, prefix="model"):
        b = self.backbone
        shapes = {}
        for name in b.order:
            shape = getattr(b, name).trace(shape, rows, f"backbone.{name}")
            shapes[name] = shape
        trunk32, o32 = self.head32.trace(shape, rows, "head32")
        r = self.route16.trace(trunk32, rows, "route16")
        f16 = shapes[b.stage_outputs[16]]
        rows.append(TraceRow("route16.upsample", "upsample", r[1], r[1]))
        trunk16, o16 = self.head16.trace((r[0], r[1] + f16[1], f16[2], f16[3]), rows, "head16")
        r = self.route8.trace(trunk16, rows, "route8")
        f8 = shapes[b.stage_outputs[8]]
        rows.append(TraceRow("route8.upsample", "upsample", r[1], r[1]))
        _, o8 = self.head8.trace((r[0], r[1] + f8[1], f8[2], f8[3]), rows, "head8")
        return shapes, [o8, o16, o32]


def build(config: ModelConfig, seed: int = 0) -> LFYOLO:
    config.validate()
    return LFYOLO(config, seed)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(raw, anchors, stride: int, conf_threshold: float,
           image_size: tuple[int, int] | None = None) -> list[Detection]:
    """Turn one raw head map (batch 1) into detections with score > conf_threshold."""
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] != 1:
        raise ShapeError(f"decode expects a (1, C, H, W) map, got {data.shape}")
    _, ch, gh, gw = data.shape
    if ch % 3 or ch // 3 < 6:
        raise ShapeError(f"decode: {ch} channels is not 3 * (5 + num_classes)")
    per = ch // 3
    if image_size is None:
        image_size = (gh * stride, gw * stride)
    img_h, img_w = image_size
    p = data[0].reshape(3, per, gh, gw)
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    dets = []
    for a in range(3):
        aw, ah = anchors[a]
        cx = (_sigmoid(p[a, 0]) + jj) * stride
        cy = (_sigmoid(p[a, 1]) + ii) * stride
        bw = aw * np.exp(np.clip(p[a, 2], None, 30.0))
        bh = ah * np.exp(np.clip(p[a, 3], None, 30.0))
        cls = _sigmoid(p[a, 5:])
        best = cls.argmax(axis=0)
        score = _sigmoid(p[a, 4]) * cls.max(axis=0)
        for i, j in zip(*np.nonzero(score > conf_threshold)):
            x1 = min(max(cx[i, j] - bw[i, j] / 2, 0.0), img_w)
            y1 = min(max(cy[i, j] - bh[i, j] / 2, 0.0), img_h)
            x2 = min(max(cx[i, j] + bw[i, j] / 2, 0.0), img_w)
            y2 = min(max(cy[i, j] + bh[i, j] / 2, 0.0), img_h)
            if x2 > x1 and y2 > y1:
                dets.append(Detection(int(best[i, j]), float(score[i, j]),
                                      (float(x1), float(y1), float(x2), float(y2))))
    return dets


def encode(box, cell: tuple[int, int], anchor, stride: int) -> tuple[float, float, float, float]:
    """Raw (t_x, t_y, t_w, t_h) that decode back to ``box`` (x1, y1, x2, y2) in ``cell`` (row, col)."""
    x1, y1, x2, y2 = box
    i, j = cell
    fx = (x1 + x2) / 2 / stride - j
    fy = (y1 + y2) / 2 / stride - i
    if not (0 < fx < 1 and 0 < fy < 1):
        raise ValueError(f"box centre is not strictly inside cell {cell}")
    logit = lambda v: math.log(v / (1 - v))
    return logit(fx), logit(fy), math.log((x2 - x1) / anchor[0]), math.log((y2 - y1) / anchor[1])


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; survivors returned by descending score."""
    order = sorted(detections, key=lambda d: -d.score)
    kept: list[Detection] = []
    for d in order:
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def detect(model: LFYOLO, image: Tensor, conf_threshold: float | None = None,
           nms_iou: float | None = None) -> list[Detection]:
    cfg = model.config
    conf = cfg.conf_threshold if conf_threshold is None else conf_threshold
    iou = cfg.nms_iou if nms_iou is None else nms_iou
    heads = model.forward(image)
    dets = []
    for k, (raw, stride) in enumerate(zip(heads, cfg.strides)):
        dets.extend(decode(raw, cfg.head_anchors(k), stride, conf, cfg.input_size))
    return nms(dets, iou)
