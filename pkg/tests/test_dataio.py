import numpy as np
import pytest
from PIL import Image

from lfyolo.dataio import (AnnotatedSample, apply_weights, decode_weights, encode_weights, feature_grid,
                           format_config, load_annotations, load_config, load_image, load_manifest,
                           load_samples, load_weights, parse_annotations, parse_config, save_annotated_image,
                           save_annotations, save_feature_grid, save_weights)
from lfyolo.errors import ConfigError, FormatError, ParseError, ShapeError, ValidationError, WeightsError
from lfyolo.model import Detection, ModelConfig, build

from oracles import bilinear_pixel


# -- images ------------------------------------------------------------------------

def save_rgb(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)
    return path


def test_same_size_is_identity(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (320, 320, 3))
    img = load_image(save_rgb(tmp_path / "a.png", arr), 320)
    assert img.shape == (1, 3, 320, 320)
    np.testing.assert_array_equal(img.data[0], arr.transpose(2, 0, 1) / 255.0)


def test_uniform_gray_stays_uniform(tmp_path):
    img = load_image(save_rgb(tmp_path / "g.png", np.full((100, 150, 3), 128)), 64)
    np.testing.assert_allclose(img.data, 128 / 255, atol=1e-15)


def test_bilinear_matches_oracle(tmp_path):
    src = np.array([[0, 255], [100, 50]], dtype=np.uint8)
    Image.fromarray(src, mode="L").save(tmp_path / "s.png")
    img = load_image(tmp_path / "s.png", (4, 4)).data[0, 0]
    for y in range(4):
        for x in range(4):
            assert img[y, x] == pytest.approx(bilinear_pixel(src / 255.0, y, x, 4, 4), abs=1e-15)


def test_bilinear_downscale_oracle(tmp_path):
    rng = np.random.default_rng(3)
    src = rng.integers(0, 256, (13, 9)).astype(np.uint8)
    Image.fromarray(src, mode="L").save(tmp_path / "d.png")
    img = load_image(tmp_path / "d.png", (5, 7)).data[0, 1]
    for y in range(5):
        for x in range(7):
            assert img[y, x] == pytest.approx(bilinear_pixel(src / 255.0, y, x, 5, 7), abs=1e-14)


def test_grayscale_is_replicated(tmp_path):
    Image.fromarray(np.arange(64, dtype=np.uint8).reshape(8, 8), mode="L").save(tmp_path / "l.png")
    d = load_image(tmp_path / "l.png", 8).data[0]
    np.testing.assert_array_equal(d[0], d[1])
    np.testing.assert_array_equal(d[0], d[2])


def test_sixteen_bit_is_rejected(tmp_path):
    Image.fromarray(np.zeros((8, 8), dtype=np.uint16)).save(tmp_path / "w.png")
    with pytest.raises(FormatError):
        load_image(tmp_path / "w.png", 8)


def test_corrupt_and_missing_images(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="bad.png"):
        load_image(tmp_path / "bad.png", 8)
    with pytest.raises(OSError, match="none.png"):
        load_image(tmp_path / "none.png", 8)


# -- annotations ---------------------------------------------------------------------

def test_parse_annotation_examples():
    assert parse_annotations("0 0.5 0.5 0.2 0.1\n\n2 0.1 0.1 0.2 0.2\n") == [(0, 0.5, 0.5, 0.2, 0.1),
                                                                           (2, 0.1, 0.1, 0.2, 0.2)]
    assert parse_annotations("") == []


def test_parse_errors_carry_line_number():
    with pytest.raises(ParseError) as exc:
        parse_annotations("0 0.5 0.5 0.2 0.1\n1 0.5 0.5 0.2\n")
    assert exc.value.line == 2
    with pytest.raises(ParseError) as exc:
        parse_annotations("0 0.5 abc 0.2 0.1\n")
    assert exc.value.line == 1


@pytest.mark.parametrize("line", ["3 0.5 0.5 0.2 0.2", "-1 0.5 0.5 0.2 0.2", "0 0.5 0.5 0 0.2",
                                  "0 0.95 0.5 0.2 0.2", "0 0.5 0.05 0.2 0.2"])
def test_invalid_boxes(line, tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("0 0.5 0.5 0.1 0.1\n" + line + "\n")
    with pytest.raises(ValidationError, match="x.txt:2"):
        load_annotations(p, num_classes=3)


def test_box_touching_border_is_valid():
    assert parse_annotations("0 0.1 0.9 0.2 0.2\n", 3)


def test_annotation_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    boxes = [(int(c), *rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.4, 2)) for c in rng.integers(0, 3, 6)]
    save_annotations(boxes, tmp_path / "a.txt")
    again = load_annotations(tmp_path / "a.txt", 3)
    assert again == boxes
    save_annotations(again, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_manifest_relative_paths(tmp_path):
    sub = tmp_path / "set"
    sub.mkdir()
    (sub / "list.txt").write_text("# images\nimgs/a.png\n\n/abs/b.png\n")
    assert load_manifest(sub / "list.txt") == [sub / "imgs" / "a.png", __import__("pathlib").Path("/abs/b.png")]


def test_load_samples_skips_bad_annotations(tmp_path):
    (tmp_path / "a.txt").write_text("0 0.5 0.5 0.2 0.2\n")
    (tmp_path / "b.txt").write_text("0 0.5 0.5 0.2\n")
    (tmp_path / "m.txt").write_text("a.png\nb.png\nc.png\n")
    samples, skipped = load_samples(tmp_path / "m.txt", 3)
    assert skipped == 2
    assert samples == [AnnotatedSample(tmp_path / "a.png", [(0, 0.5, 0.5, 0.2, 0.2)])]


# -- config ------------------------------------------------------------------------

def test_empty_config_is_default():
    assert parse_config("# nothing\n") == ModelConfig()


def test_half_width_config():
    cfg = parse_config("width_multiplier = 0.5\n")
    assert cfg.width == 16


def test_config_round_trip():
    cfg = parse_config("width_multiplier = 0.25\ninput_size = 64x96\nnum_classes = 2\nconf_threshold = 0.3\n")
    assert cfg.input_size == (64, 96) and cfg.num_classes == 2
    assert parse_config(format_config(cfg)) == cfg


def test_wrong_anchor_count():
    pairs = ", ".join(["10x10"] * 8)
    with pytest.raises(ParseError, match="anchors"):
        parse_config(f"anchors = {pairs}\n")


def test_unknown_key_and_non_numeric(tmp_path):
    with pytest.raises(ParseError) as exc:
        parse_config("num_classes = 3\ndepth = 4\n")
    assert exc.value.line == 2
    p = tmp_path / "c.cfg"
    p.write_text("width_multiplier = 0.5\nnum_classes = three\n")
    with pytest.raises(ParseError, match="c.cfg:2"):
        load_config(p)


def test_semantic_config_errors():
    with pytest.raises(ConfigError):
        parse_config("input_size = 100\n")
    with pytest.raises(ConfigError):
        parse_config("num_classes = 0\n")


# -- weights -------------------------------------------------------------------------

SMALL = ModelConfig(width_multiplier=0.25, input_size=(64, 64))


def test_weights_round_trip(tmp_path):
    model = build(SMALL, seed=3)
    state = model.state_dict()
    save_weights(state, tmp_path / "w.lfyw")
    loaded = load_weights(tmp_path / "w.lfyw")
    assert set(loaded) == set(state)
    for k in state:
        np.testing.assert_array_equal(loaded[k], np.asarray(state[k], dtype=np.float32))
    other = build(SMALL, seed=9)
    apply_weights(other, loaded)
    save_weights(other.state_dict(), tmp_path / "w2.lfyw")
    assert (tmp_path / "w.lfyw").read_bytes() == (tmp_path / "w2.lfyw").read_bytes()


def test_weights_encoding_layout():
    blob = encode_weights({"b": np.ones(2), "a": np.zeros((1, 2))})
    assert blob[:4] == b"LFYW"
    assert blob.index(b"a") < blob.index(b"b", 12)
    assert len(blob) == 4 + 8 + (4 + 1 + 8 + 8) + (4 + 1 + 4 + 8)


@pytest.mark.parametrize("mutate", [lambda b: b[:-1], lambda b: b"XXXX" + b[4:], lambda b: b + b"\0",
                                    lambda b: b[:4] + b"\x02" + b[5:]])
def test_corrupt_weights(mutate):
    blob = encode_weights({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(WeightsError):
        decode_weights(mutate(blob))


def test_mismatched_width_names_first_layer():
    small = build(SMALL).state_dict()
    other = build(ModelConfig(width_multiplier=0.5, input_size=(64, 64)))
    with pytest.raises(WeightsError) as exc:
        apply_weights(other, small)
    first = exc.value.mismatches[0]
    assert first.split(":")[0] in str(exc.value).splitlines()[0]
    assert "expected" in first


def test_missing_weights_file(tmp_path):
    with pytest.raises(OSError, match="nope.lfyw"):
        load_weights(tmp_path / "nope.lfyw")


# -- visual output -----------------------------------------------------------------

def test_feature_grid_layout():
    rng = np.random.default_rng(5)
    grid, (rows, cols, cell_h, cell_w, label_h) = feature_grid(rng.standard_normal((1, 64, 10, 10)))
    assert (rows, cols) == (8, 8)
    assert grid.shape == (rows * cell_h, cols * cell_w)


def test_feature_grid_normalization():
    data = np.zeros((1, 2, 4, 4))
    data[0, 1] = np.arange(16).reshape(4, 4)
    grid, (_, cols, cell_h, cell_w, label_h) = feature_grid(data, min_tile=4)
    tile0 = grid[label_h + 1:label_h + 5, 1:5]
    tile1 = grid[label_h + 1:label_h + 5, cell_w + 1:cell_w + 5]
    assert (tile0 == 128).all()
    assert tile1.min() == 0 and tile1.max() == 255


def test_feature_grid_rejects_empty(tmp_path):
    with pytest.raises(ShapeError):
        feature_grid(np.zeros((1, 0, 4, 4)))
    rows, cols = save_feature_grid(np.ones((1, 3, 4, 4)), tmp_path / "f.png")
    assert (rows, cols) == (2, 2)
    assert Image.open(tmp_path / "f.png").mode == "L"


def test_annotated_image(tmp_path):
    img = np.random.default_rng(6).random((1, 3, 32, 32))
    save_annotated_image(img, [], tmp_path / "plain.png")
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "plain.png")),
                                  np.rint(img[0].transpose(1, 2, 0) * 255).astype(np.uint8))
    save_annotated_image(img, [Detection(1, 0.8, (4.0, 4.0, 20.0, 20.0))], tmp_path / "boxed.png")
    assert not np.array_equal(np.asarray(Image.open(tmp_path / "boxed.png")),
                              np.asarray(Image.open(tmp_path / "plain.png")))
