"""Layer-by-layer parameter and MAC accounting.

"FLOPs" here count multiply-accumulates: one per kernel
weight per output position. The analyzer reports MACs and can double them
for the multiply-add convention on request.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .layers import Layer, TraceRow
from .model import LFYOLO, ModelConfig, build

CSV_FIELDS = ("layer", "type", "c_in", "c_out", "kernel", "stride", "dilation", "params", "macs")


@dataclass
class ComplexityReport:
    rows: list[TraceRow]
    resolution: tuple[int, int]
    flops_convention: str = "mac"
    title: str = "model"
    breakdown: dict = field(init=False)

    def __post_init__(self):
        if self.flops_convention not in ("mac", "madd"):
            raise ValueError(f"unknown FLOPs convention {self.flops_convention!r}")
        self.breakdown = {
            "conv_weights": sum(r.weights for r in self.rows),
            "conv_bias": sum(r.bias for r in self.rows),
            "bn_affine": sum(r.bn_affine for r in self.rows),
            "bn_stats": sum(r.bn_stats for r in self.rows),
        }

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return self.total_macs * (2 if self.flops_convention == "madd" else 1)

    @property
    def totals(self) -> tuple[int, int]:
        return self.total_params, self.total_macs

    def grouped(self, depth: int = 2) -> list[tuple[str, int, int]]:
        """Rows summed by the first ``depth`` path components, in trace order."""
        out: dict[str, list[int]] = {}
        for r in self.rows:
            key = ".".join(r.layer.split(".")[:depth])
            acc = out.setdefault(key, [0, 0])
            acc[0] += r.params
            acc[1] += r.macs
        return [(k, p, m) for k, (p, m) in out.items()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.rows:
            writer.writerow([r.layer, r.type, r.c_in, r.c_out, r.kernel, r.stride, r.dilation, r.params, r.macs])
        return buf.getvalue()

    def to_text(self, detail: bool = False) -> str:
        mult = 2 if self.flops_convention == "madd" else 1
        h, w = self.resolution
        lines = [f"{self.title} @ {h}x{w}"]
        if detail:
            lines.append(f"{'layer':<34}{'type':<10}{'c_in':>7}{'c_out':>7}{'k':>4}{'s':>3}{'d':>3}"
                         f"{'Params':>12}{'MACs':>16}")
            for r in self.rows:
                lines.append(f"{r.layer:<34}{r.type:<10}{r.c_in:>7}{r.c_out:>7}{r.kernel:>4}{r.stride:>3}"
                             f"{r.dilation:>3}{r.params:>12,}{r.macs:>16,}")
        else:
            lines.append(f"{'layer':<20}{'Params(M)':>12}{'FLOPs(G)':>12}")
            for name, p, m in self.grouped():
                lines.append(f"{name:<20}{p / 1e6:>12.3f}{m * mult / 1e9:>12.3f}")
        lines.append("-" * 44)
        lines.append(f"{'total':<20}{self.total_params / 1e6:>12.1f}{self.total_flops / 1e9:>12.1f}")
        b = self.breakdown
        lines.append(f"params: conv weights {b['conv_weights']:,}, conv bias {b['conv_bias']:,}, "
                     f"BN affine {b['bn_affine']:,}, BN stats {b['bn_stats']:,}")
        lines.append("FLOPs counted as " + ("multiply-accumulates (MACs)" if mult == 1
                                            else "2 x MACs (multiply + add)"))
        return "\n".join(lines)


def _trace(block: Layer, shape: tuple) -> list[TraceRow]:
    rows: list[TraceRow] = []
    if isinstance(block, LFYOLO):
        block.trace(shape, rows)
    else:
        block.trace(shape, rows, type(block).__name__.lower())
    return rows


def count_params(block: Layer, c_in: int | None = None, size: int = 32) -> list[TraceRow]:
    """Per-layer parameter rows. Parameter counts do not depend on resolution."""
    if c_in is None:
        c_in = _input_channels(block)
    return _trace(block, (1, c_in, size, size))


def count_macs(block: Layer, height: int, width: int, c_in: int | None = None) -> list[TraceRow]:
    if c_in is None:
        c_in = _input_channels(block)
    return _trace(block, (1, c_in, height, width))


def _input_channels(block: Layer) -> int:
    if isinstance(block, LFYOLO):
        return 3
    spec = getattr(block, "spec", None)
    if spec is not None:
        return spec.c_in
    for _, p in block.named_parameters():
        return p.shape[1] * getattr(block, "groups", 1)
    raise ValueError("cannot infer input channels; pass c_in")


def block_report(block: Layer, height: int, width: int, c_in: int | None = None,
                 flops_convention: str = "mac", title: str | None = None) -> ComplexityReport:
    return ComplexityReport(count_macs(block, height, width, c_in), (height, width), flops_convention,
                            title or type(block).__name__)


def report(config: ModelConfig, height: int | None = None, width: int | None = None,
           flops_convention: str = "mac") -> ComplexityReport:
    """Whole-model report; the graph is built at ``config``'s width and traced at H x W."""
    h = height or config.input_size[0]
    w = width or config.input_size[1]
    model = build(config)
    title = f"LF-YOLO x{config.width_multiplier:g} (C={config.width}, {config.num_classes} classes)"
    return ComplexityReport(count_macs(model, h, w), (h, w), flops_convention, title)
