"""Images, YOLO-txt annotations, manifests, config files, LFYW weights, and PNG output."""

from __future__ import annotations

import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import ConfigError, FormatError, ParseError, ShapeError, ValidationError, WeightsError
from .model import Detection, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

BOX_SLACK = 1e-6
MAGIC = b"LFYW"
VERSION = 1
DTYPE_F32 = 1
MAX_LISTED = 20


def atomic_write(path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- images ---------------------------------------------------------------

def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a (C, H, W) array."""
    _, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    r0, r1, fr = _bilinear_axis(h, height)
    c0, c1, fc = _bilinear_axis(w, width)
    rows = img[:, r0, :] * (1 - fr)[None, :, None] + img[:, r1, :] * fr[None, :, None]
    return rows[:, :, c0] * (1 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]


def load_image(path, target_size: tuple[int, int] | int) -> Tensor:
    """8-bit grayscale/RGB image as a (1, 3, H, W) tensor in [0, 1], plain bilinear resize."""
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise FormatError(f"{path}: unsupported bit depth (mode {mode}); 8-bit images only")
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64)[None].repeat(3, axis=0)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    except (FileNotFoundError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    arr = resize_bilinear(arr / 255.0, *target_size)
    return Tensor(np.clip(arr, 0.0, 1.0)[None])


def to_uint8(image) -> np.ndarray:
    """(1, 3, H, W) tensor/array in [0, 1] -> (H, W, 3) uint8."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 4:
        data = data[0]
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


# -- annotations and manifests ------------------------------------------------

@dataclass
class AnnotatedSample:
    image_path: Path
    boxes: list[tuple[int, float, float, float, float]] = field(default_factory=list)


def validate_box(box, num_classes: int | None = None, where: str = "") -> None:
    c, cx, cy, w, h = box
    if c < 0 or (num_classes is not None and c >= num_classes):
        raise ValidationError(f"{where}class {c} out of range [0, {num_classes})")
    if w <= 0 or h <= 0:
        raise ValidationError(f"{where}box width/height must be positive")
    for lo, hi in ((cx - w / 2, cx + w / 2), (cy - h / 2, cy + h / 2)):
        if lo < -BOX_SLACK or hi > 1 + BOX_SLACK:
            raise ValidationError(f"{where}box extends outside [0, 1]: ({cx}, {cy}, {w}, {h})")


def parse_annotations(text: str, num_classes: int | None = None, path=None) -> list[tuple]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ParseError(f"expected 'class cx cy w h', got {len(parts)} fields", lineno, path)
        try:
            c = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise ParseError(f"non-numeric field in {line.strip()!r}", lineno, path) from None
        box = (c, cx, cy, w, h)
        try:
            validate_box(box, num_classes)
        except ValidationError as exc:
            loc = f"{path}:{lineno}: " if path else f"line {lineno}: "
            raise ValidationError(loc + str(exc)) from None
        boxes.append(box)
    return boxes


def load_annotations(path, num_classes: int | None = None) -> list[tuple]:
    return parse_annotations(Path(path).read_text(), num_classes, path)


def format_annotations(boxes: Iterable[tuple]) -> str:
    lines = []
    for c, *coords in boxes:
        lines.append(" ".join([str(int(c))] + [repr(float(v)) for v in coords]) + "\n")
    return "".join(lines)


def save_annotations(boxes: Iterable[tuple], path) -> None:
    atomic_write(path, format_annotations(boxes).encode())


def annotation_path(image_path) -> Path:
    return Path(image_path).with_suffix(".txt")


def load_manifest(path) -> list[Path]:
    """Image paths, one per non-blank line; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else base / p)
    return out


def load_samples(manifest, num_classes: int | None = None) -> tuple[list[AnnotatedSample], int]:
    """Samples from a manifest, skipping (with a warning) those whose annotation cannot be read."""
    samples, skipped = [], 0
    for img in load_manifest(manifest):
        try:
            boxes = load_annotations(annotation_path(img), num_classes)
        except (OSError, ParseError, ValidationError) as exc:
            log.warning("skipping %s: %s", img, exc)
            skipped += 1
            continue
        samples.append(AnnotatedSample(img, boxes))
    return samples, skipped


# -- config -------------------------------------------------------------------

CONFIG_KEYS = ("width_multiplier", "num_classes", "input_size", "anchors", "strides",
               "conf_threshold", "nms_iou")


def _numbers(value: str, lineno: int, path, kind=float) -> list:
    items = [v for v in value.replace("x", ",").replace("X", ",").split(",") if v.strip()]
    try:
        return [kind(v) for v in items]
    except ValueError:
        raise ParseError(f"non-numeric value {value!r}", lineno, path) from None


def parse_config(text: str, path=None) -> ModelConfig:
    kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ParseError(f"unknown key {key!r} (valid: {', '.join(CONFIG_KEYS)})", lineno, path)
        if key == "num_classes":
            (kw[key],) = _numbers(value, lineno, path, int) or [None]
        elif key == "input_size":
            nums = _numbers(value, lineno, path, int)
            if len(nums) not in (1, 2):
                raise ParseError(f"input_size takes 1 or 2 numbers, got {len(nums)}", lineno, path)
            kw[key] = (nums[0], nums[-1])
        elif key == "anchors":
            nums = _numbers(value, lineno, path)
            if len(nums) != 18:
                raise ParseError(f"anchors need 9 w x h pairs, got {len(nums) / 2:g}", lineno, path)
            kw[key] = tuple(zip(nums[0::2], nums[1::2]))
        elif key == "strides":
            kw[key] = tuple(_numbers(value, lineno, path, int))
        else:
            nums = _numbers(value, lineno, path)
            if len(nums) != 1:
                raise ParseError(f"{key} takes a single number", lineno, path)
            kw[key] = nums[0]
    try:
        return ModelConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}" if path else str(exc)) from None


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text(), path)


def format_config(cfg: ModelConfig) -> str:
    anchors = ", ".join(f"{float(w)!r}x{float(h)!r}" for w, h in cfg.anchors)
    return (f"width_multiplier = {float(cfg.width_multiplier)!r}\n"
            f"num_classes = {cfg.num_classes}\n"
            f"input_size = {cfg.input_size[0]}x{cfg.input_size[1]}\n"
            f"anchors = {anchors}\n"
            f"strides = {', '.join(str(s) for s in cfg.strides)}\n"
            f"conf_threshold = {float(cfg.conf_threshold)!r}\n"
            f"nms_iou = {float(cfg.nms_iou)!r}\n")


# -- weights ------------------------------------------------------------------

def encode_weights(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<HBB", len(raw_name), DTYPE_F32, arr.ndim) + raw_name)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(params: dict[str, np.ndarray], path) -> None:
    atomic_write(path, encode_weights(params))


def decode_weights(blob: bytes, source="<bytes>") -> dict[str, np.ndarray]:
    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise WeightsError(f"{source}: truncated while reading {what} (need {n} bytes at offset {pos}, "
                               f"file has {len(blob)})")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    magic = take(4, "magic")
    if magic != MAGIC:
        raise WeightsError(f"{source}: bad magic, expected {MAGIC!r}, found {magic!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightsError(f"{source}: unsupported version, expected {VERSION}, found {version}")
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        name_len, dtype, rank = struct.unpack("<HBB", take(4, f"entry {k} header"))
        name = take(name_len, f"entry {k} name").decode("utf-8")
        if dtype != DTYPE_F32:
            raise WeightsError(f"{source}: entry {name!r} has unknown dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"{name} data"), dtype="<f4").reshape(dims)
        if name in out:
            raise WeightsError(f"{source}: duplicate entry {name!r}")
        out[name] = data.astype(np.float32)
    if pos != len(blob):
        raise WeightsError(f"{source}: {len(blob) - pos} trailing bytes after {count} entries")
    return out


def load_weights(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read weights {path}: {exc}") from exc
    return decode_weights(blob, path)


def apply_weights(model, weights: dict[str, np.ndarray]) -> None:
    """Load ``weights`` into ``model`` after checking names and dims; reports every mismatch."""
    expected = {name: np.shape(v) for name, v in model.state_dict().items()}
    problems = []
    for name, shape in expected.items():
        if name not in weights:
            problems.append(f"{name}: missing (expected {shape})")
        elif tuple(weights[name].shape) != tuple(shape):
            problems.append(f"{name}: expected {tuple(shape)}, found {tuple(weights[name].shape)}")
    for name in weights:
        if name not in expected:
            problems.append(f"{name}: unexpected entry {tuple(weights[name].shape)}")
    if problems:
        shown = problems[:MAX_LISTED]
        more = len(problems) - len(shown)
        err = WeightsError(f"weights do not match model ({len(problems)} mismatches); first: {problems[0]}\n"
                           + "\n".join(shown) + (f"\n... and {more} more" if more else ""))
        err.mismatches = problems
        raise err
    model.load_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in weights.items()})


# -- visual output -------------------------------------------------------------

def feature_grid(tensor, min_tile: int = 32, label_height: int = 12) -> tuple[np.ndarray, tuple]:
    """Tile channels row-major into one grayscale image, each min-max normalized."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if data.ndim != 4 or data.shape[0] != 1:
        raise ShapeError(f"feature grid needs a (1, C, H, W) tensor, got {data.shape}")
    _, c, h, w = data.shape
    if c == 0:
        raise ShapeError("feature grid of a zero-channel tensor")
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    scale = max(1, math.ceil(min_tile / max(h, w)))
    th, tw = h * scale, w * scale
    cell_h, cell_w = th + label_height + 2, tw + 2
    grid = np.zeros((rows * cell_h, cols * cell_w), dtype=np.uint8)
    for k in range(c):
        ch = data[0, k]
        lo, hi = ch.min(), ch.max()
        norm = np.full(ch.shape, 0.5) if hi == lo else (ch - lo) / (hi - lo)
        tile = np.rint(norm * 255).astype(np.uint8).repeat(scale, axis=0).repeat(scale, axis=1)
        r, q = divmod(k, cols)
        y0, x0 = r * cell_h + label_height + 1, q * cell_w + 1
        grid[y0:y0 + th, x0:x0 + tw] = tile
    return grid, (rows, cols, cell_h, cell_w, label_height)


def save_feature_grid(tensor, path) -> tuple[int, int]:
    """PNG of all channels with their indices; returns the (rows, cols) tiling."""
    grid, (rows, cols, cell_h, cell_w, label_h) = feature_grid(tensor)
    im = Image.fromarray(grid, mode="L")
    draw = ImageDraw.Draw(im)
    c = (tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)).shape[1]
    for k in range(c):
        r, q = divmod(k, cols)
        draw.text((q * cell_w + 1, r * cell_h), str(k), fill=255)
    _save_png(im, path)
    return rows, cols


def annotate(image, detections: list[Detection], class_names=None) -> Image.Image:
    im = Image.fromarray(to_uint8(image), mode="RGB")
    if not detections:
        return im
    draw = ImageDraw.Draw(im)
    palette = [(255, 64, 64), (255, 200, 0), (64, 128, 255), (64, 220, 64), (220, 64, 220)]
    for d in detections:
        color = palette[d.class_id % len(palette)]
        x1, y1, x2, y2 = d.box
        draw.rectangle([x1, y1, x2, y2], outline=color)
        name = class_names[d.class_id] if class_names else str(d.class_id)
        draw.text((x1 + 1, max(y1 - 11, 0)), f"{name} {d.score:.2f}", fill=color)
    return im


def save_annotated_image(image, detections: list[Detection], path, class_names=None) -> None:
    _save_png(annotate(image, detections, class_names), path)


def _save_png(im: Image.Image, path) -> None:
    import io

    buf = io.BytesIO()
    im.save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
