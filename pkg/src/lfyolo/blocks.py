"""Building blocks: CBL, Ghost/GD convolution, EFE, RMF, and the YOLOv3 residual reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, Layer, TraceRow

LEAKY_SLOPE = 0.1


class CBL(Layer):
    """Conv (no bias, same padding) -> BatchNorm -> LeakyReLU(0.1)."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 1, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"CBL kernel must be odd, got {kernel}")
        self.conv = Conv2d(c_in, c_out, kernel, stride, padding=kernel // 2, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return T.leaky_relu(self.bn(self.conv(x)), LEAKY_SLOPE)

    def trace(self, shape, rows, prefix):
        shape = self.conv.trace(shape, rows, prefix + ".conv")
        return self.bn.trace(shape, rows, prefix + ".bn")


@dataclass(frozen=True)
class GhostSpec:
    c_in: int
    c_out: int
    ratio_s: int = 2
    primary_kernel: int = 1
    cheap_kernel: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.ratio_s < 1:
            raise ConfigError(f"ghost ratio must be >= 1, got {self.ratio_s}")
        if self.c_out % self.ratio_s:
            raise ConfigError(f"ghost conv: c_out={self.c_out} not divisible by ratio s={self.ratio_s}")
        if self.primary_kernel % 2 == 0 or self.cheap_kernel % 2 == 0:
            raise ConfigError("ghost conv kernels must be odd")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def intrinsic(self) -> int:
        return self.c_out // self.ratio_s

    @property
    def ghosts(self) -> int:
        return self.intrinsic * (self.ratio_s - 1)


class GhostConv(Layer):
    """Intrinsic maps from a conventional conv, ghost maps from a depthwise conv on them.

    ``out = LeakyReLU(BN(concat(N', cheap(N'))))`` with one BN over all
    ``c_out`` channels. A dilation above 1 turns this into GDConv.
    """

    def __init__(self, spec: GhostSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        b = spec.intrinsic
        self.primary = Conv2d(spec.c_in, b, spec.primary_kernel, rng=rng)
        if spec.ratio_s > 1:
            self.cheap = Conv2d(b, spec.ghosts, spec.cheap_kernel, dilation=spec.dilation, groups=b, rng=rng)
        else:
            self.cheap = None
        self.bn = BatchNorm2d(spec.c_out)

    def forward(self, x):
        intrinsic = self.primary(x)
        if self.cheap is None:
            merged = intrinsic
        else:
            merged = T.concat([intrinsic, self.cheap(intrinsic)], axis=1)
        return T.leaky_relu(self.bn(merged), LEAKY_SLOPE)

    def trace(self, shape, rows, prefix):
        inner = self.primary.trace(shape, rows, prefix + ".primary")
        if self.cheap is not None:
            self.cheap.trace(inner, rows, prefix + ".cheap")
        out = (inner[0], self.spec.c_out, inner[2], inner[3])
        return self.bn.trace(out, rows, prefix + ".bn")


def GDConv(c_in: int, c_out: int, dilation: int, rng: np.random.Generator | None = None,
           ratio_s: int = 2, cheap_kernel: int = 3) -> GhostConv:
    """Ghost convolution whose cheap depthwise op is dilated."""
    return GhostConv(GhostSpec(c_in, c_out, ratio_s, 1, cheap_kernel, dilation), rng=rng)


@dataclass(frozen=True)
class EfeSpec:
    """EFE geometry; the expansion width ``m`` equals ``c_out``."""

    c_in: int
    c_out: int
    split_ratio: float = 0.25
    ghost_ratio: int = 2

    def __post_init__(self):
        m = self.c_out
        ident = self.split_ratio * m
        if not 0.0 < self.split_ratio < 1.0 or ident != int(ident):
            raise ConfigError(f"EFE: split ratio {self.split_ratio} of m={m} is not a whole channel count")
        if m % 2 or (m // 2) % self.ghost_ratio:
            raise ConfigError(f"EFE: m/2 = {m / 2} is not a whole, ghost-divisible channel count")

    @property
    def m(self) -> int:
        return self.c_out

    @property
    def identity_channels(self) -> int:
        return int(self.split_ratio * self.m)

    @property
    def transform_channels(self) -> int:
        return self.m - self.identity_channels


class EFE(Layer):
    """Expand (1x1 CBL) -> split -> ghost dense block -> merge (2m) -> compress (1x1 CBL) -> residual add."""

    def __init__(self, spec: EfeSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        m, t = spec.m, spec.transform_channels
        self.conv1 = CBL(spec.c_in, m, 1, rng=rng)
        self.gc1 = GhostConv(GhostSpec(t, m // 2, spec.ghost_ratio), rng=rng)
        self.gc2 = GhostConv(GhostSpec(t + m // 2, m // 2, spec.ghost_ratio), rng=rng)
        self.conv2 = CBL(2 * m, m, 1, rng=rng)

    def forward(self, x):
        y = self.conv1(x)
        k = self.spec.identity_channels
        ident, branch = y[:, :k], y[:, k:]
        g1 = self.gc1(branch)
        g2 = self.gc2(T.concat([branch, g1], axis=1))
        merged = T.concat([ident, branch, g1, g2], axis=1)
        return T.add(self.conv2(merged), y)

    def trace(self, shape, rows, prefix):
        n, _, h, w = shape
        m, t = self.spec.m, self.spec.transform_channels
        y = self.conv1.trace(shape, rows, prefix + ".conv1")
        g1 = self.gc1.trace((n, t, h, w), rows, prefix + ".gc1")
        self.gc2.trace((n, t + g1[1], h, w), rows, prefix + ".gc2")
        return self.conv2.trace((n, 2 * m, y[2], y[3]), rows, prefix + ".conv2")


@dataclass(frozen=True)
class RmfSpec:
    c_in: int
    pool_kernels: tuple = (1, 5, 9, 13)
    dilations: tuple = (1, 5, 9)
    branch_ratio: float = 0.5
    ghost_ratio: int = 2

    def __post_init__(self):
        width = self.branch_ratio * self.c_in
        if width != int(width) or int(width) % self.ghost_ratio:
            raise ConfigError(f"RMF: branch width {width} is not a whole, ghost-divisible channel count")
        if any(k % 2 == 0 for k in self.pool_kernels):
            raise ConfigError(f"RMF pool kernels must be odd: {self.pool_kernels}")

    @property
    def branch_width(self) -> int:
        return int(self.branch_ratio * self.c_in)

    @property
    def c_out(self) -> int:
        return len(self.pool_kernels) * len(self.dilations) * self.branch_width


class RMF(Layer):
    """Same-size max-pool pyramid, each level feeding parallel dilated GDConvs; all outputs concatenated."""

    def __init__(self, spec: RmfSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.branches: list[tuple[int, list[tuple[int, GhostConv]]]] = []
        for k in spec.pool_kernels:
            convs = []
            for d in spec.dilations:
                gd = GDConv(spec.c_in, spec.branch_width, d, rng=rng, ratio_s=spec.ghost_ratio)
                self.add_child(f"p{k}_d{d}", gd)
                convs.append((d, gd))
            self.branches.append((k, convs))

    def forward(self, x):
        outs = []
        for k, convs in self.branches:
            pooled = x if k == 1 else T.maxpool2d(x, k, padding="same")
            outs.append(T.concat([gd(pooled) for _, gd in convs], axis=1))
        return T.concat(outs, axis=1)

    def trace(self, shape, rows, prefix):
        n, c, h, w = shape
        if c != self.spec.c_in:
            raise ShapeError(f"{prefix}: RMF expects {self.spec.c_in} channels, got {c}")
        for k, convs in self.branches:
            if k != 1:
                rows.append(TraceRow(f"{prefix}.pool{k}", "maxpool", c, c, k, 1))
            for d, gd in convs:
                gd.trace(shape, rows, f"{prefix}.p{k}_d{d}")
        return (n, self.spec.c_out, h, w)


class ResidualRef(Layer):
    """YOLOv3 residual stage with its downsampling conv set to stride 1 (comparison baseline)."""

    def __init__(self, c_in: int = 128, c_out: int = 256, rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = CBL(c_in, c_out, 3, rng=rng)
        self.reduce = CBL(c_out, c_out // 2, 1, rng=rng)
        self.expand = CBL(c_out // 2, c_out, 3, rng=rng)

    def forward(self, x):
        y = self.conv(x)
        return T.add(self.expand(self.reduce(y)), y)

    def trace(self, shape, rows, prefix):
        y = self.conv.trace(shape, rows, prefix + ".conv")
        r = self.reduce.trace(y, rows, prefix + ".reduce")
        return self.expand.trace(r, rows, prefix + ".expand")
