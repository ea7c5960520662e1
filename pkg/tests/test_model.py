import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfyolo.errors import ConfigError, ShapeError
from lfyolo.model import (REFERENCE_ANCHORS, Detection, ModelConfig, box_iou, build, decode, default_anchors,
                          detect, encode, nms)
from lfyolo.tensor import Tensor

SMALL = ModelConfig(width_multiplier=0.25, num_classes=3, input_size=(64, 64))


def zero_model(cfg):
    model = build(cfg)
    for _, p in model.named_parameters():
        p.data = np.zeros_like(p.data)
    return model


@pytest.mark.parametrize("size", [320, 640])
def test_backbone_trace_spatial_column(size):
    shapes, outs = build(ModelConfig(input_size=(size, size))).trace((1, 3, size, size), [])
    # S1 stem at full size, then each max-pool halves
    expected = {1: size}
    div = 1
    for k in range(2, 21):
        if k in (2, 4, 7, 12, 17):
            div *= 2
        expected[k] = size // div
    for k in range(1, 21):
        assert shapes[f"s{k}"][2:] == (expected[k], expected[k]), k
    assert shapes["s20"] == (1, 3072, size // 32, size // 32)
    g = size // 8
    assert [o[2] for o in outs] == [g, g // 2, g // 4]
    assert all(o[1] == 24 for o in outs)


def test_stage_widths_follow_channel_constant():
    shapes, _ = build(ModelConfig()).trace((1, 3, 320, 320), [])
    assert shapes["s1"][1] == 16
    assert [shapes[s][1] for s in ("s3", "s6", "s11", "s16", "s19")] == [64, 128, 256, 512, 512]
    assert shapes["s20"][1] == 6 * shapes["s19"][1]


def test_forward_head_shapes_small():
    model = build(SMALL)
    heads = model(Tensor(np.zeros((1, 3, 64, 64))))
    assert [h.shape for h in heads] == [(1, 24, 8, 8), (1, 24, 4, 4), (1, 24, 2, 2)]


def test_forward_is_deterministic_and_seeded():
    x = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)))
    a = build(SMALL, seed=3)(x)
    b = build(SMALL, seed=3)(x)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.data, q.data)


def test_zero_network_gives_zero_raw_outputs():
    model = zero_model(SMALL)
    for h in model(Tensor(np.zeros((1, 3, 64, 64)))):
        assert not h.data.any()


def test_zero_network_detects_nothing_at_quarter_threshold():
    # sigmoid(0)^2 = 0.25 exactly and the threshold is strict
    assert detect(zero_model(SMALL), Tensor(np.zeros((1, 3, 64, 64))), 0.25) == []


def test_input_shape_mismatch():
    with pytest.raises(ShapeError):
        build(SMALL)(Tensor(np.zeros((1, 3, 32, 32))))


@pytest.mark.parametrize("kw", [{"input_size": (100, 100)}, {"width_multiplier": 0.3},
                                {"num_classes": 0}, {"conf_threshold": 1.5}, {"anchors": ((1, 1),) * 8},
                                {"strides": (8, 16, 64)}])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_width_multiplier_sets_channel_constant():
    assert ModelConfig().width == 32
    assert ModelConfig(width_multiplier=0.5).width == 16


def test_anchors_sorted_and_scaled():
    cfg = ModelConfig(anchors=tuple(reversed(REFERENCE_ANCHORS)))
    areas = [w * h for w, h in cfg.anchors]
    assert areas == sorted(areas)
    assert default_anchors((416, 416)) == tuple(map(lambda a: (float(a[0]), float(a[1])), REFERENCE_ANCHORS))
    assert cfg.head_anchors(2)[-1] == (373.0, 326.0)


def raw_map(values, classes=3, grid=1):
    per = 5 + classes
    raw = np.full((1, 3 * per, grid, grid), -10.0)
    for (a, ch, i, j), v in values.items():
        raw[0, a * per + ch, i, j] = v
    return raw


def test_decode_centre_and_anchor_size():
    raw = raw_map({(0, 0, 0, 0): 0.0, (0, 1, 0, 0): 0.0, (0, 2, 0, 0): 0.0, (0, 3, 0, 0): 0.0,
                   (0, 4, 0, 0): 10.0, (0, 5, 0, 0): 10.0})
    (d,) = decode(raw, [(20, 10), (1, 1), (1, 1)], 32, 0.5, (64, 64))
    assert d.class_id == 0
    assert d.box == pytest.approx((6.0, 11.0, 26.0, 21.0))


def test_decode_saturated_negative_is_empty():
    assert decode(np.full((1, 24, 4, 4), -10.0), [(1, 1)] * 3, 8, 0.25) == []


def test_decode_channel_mismatch():
    with pytest.raises(ShapeError):
        decode(np.zeros((1, 20, 2, 2)), [(1, 1)] * 3, 8, 0.25)


def test_decode_clips_to_image():
    raw = raw_map({(0, 2, 0, 0): 3.0, (0, 3, 0, 0): 3.0, (0, 4, 0, 0): 10.0, (0, 5, 0, 0): 10.0,
                   (0, 0, 0, 0): 0.0, (0, 1, 0, 0): 0.0})
    (d,) = decode(raw, [(20, 20), (1, 1), (1, 1)], 32, 0.5, (32, 32))
    assert d.box == (0.0, 0.0, 32.0, 32.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(2.0, 200.0), st.floats(2.0, 200.0),
       st.integers(0, 3), st.integers(0, 3))
def test_encode_decode_round_trip(fx, fy, w, h, i, j):
    stride, anchor = 16, (30.0, 40.0)
    cx, cy = (j + fx) * stride, (i + fy) * stride
    box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    tx, ty, tw, th = encode(box, (i, j), anchor, stride)
    raw = raw_map({(1, 0, i, j): tx, (1, 1, i, j): ty, (1, 2, i, j): tw, (1, 3, i, j): th,
                   (1, 4, i, j): 20.0, (1, 6, i, j): 20.0}, grid=4)
    dets = decode(raw, [(1, 1), anchor, (1, 1)], stride, 0.5, (10_000, 10_000))
    big = [d for d in dets if d.score > 0.5]
    assert len(big) == 1
    # decode clips to the image; shift the check into positive coordinates
    for got, want in zip(big[0].box, box):
        assert got == pytest.approx(max(want, 0.0), abs=1e-9)


def det(box, score, cls=0):
    return Detection(cls, score, box)


def test_nms_identical_boxes():
    kept = nms([det((0, 0, 10, 10), 0.8), det((0, 0, 10, 10), 0.9)], 0.45)
    assert [d.score for d in kept] == [0.9]


def test_nms_disjoint_and_other_class_kept():
    dets = [det((0, 0, 10, 10), 0.9), det((20, 20, 30, 30), 0.8), det((0, 0, 10, 10), 0.7, cls=1)]
    assert len(nms(dets, 0.45)) == 3


def test_nms_hand_geometry():
    a, b, c = (0, 0, 10, 10), (0, 0, 10, 6), (9, 0, 19, 10)
    assert box_iou(a, b) == pytest.approx(0.6)
    assert box_iou(a, c) < 0.45 and box_iou(b, c) < 0.45
    kept = nms([det(c, 0.5), det(a, 0.9), det(b, 0.8)], 0.45)
    assert [d.box for d in kept] == [a, c]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30),
                          st.floats(0.01, 1.0), st.integers(0, 1)), max_size=12),
       st.floats(0.1, 0.9))
def test_nms_survivors_pairwise_below_threshold(boxes, thr):
    dets = [Detection(c, s, (x, y, x + w, y + h)) for x, y, w, h, s, c in boxes]
    kept = nms(dets, thr)
    for i, p in enumerate(kept):
        for q in kept[i + 1:]:
            if p.class_id == q.class_id:
                assert box_iou(p.box, q.box) < thr
    assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)


def test_box_iou_degenerate():
    assert box_iou((0, 0, 0, 5), (0, 0, 1, 1)) == 0.0
    assert math.isclose(box_iou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7)


def test_constant_image_gives_constant_interior_features():
    model = build(SMALL, seed=1)
    feats, _ = model.forward_features(Tensor(np.full((1, 3, 64, 64), 0.4)))
    s3 = feats["s3"].data[0, :, 4:-4, 4:-4]
    assert np.ptp(s3, axis=(1, 2)).max() < 1e-12
