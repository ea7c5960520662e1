"""Finite-difference gradient checks for single ops and composite blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import EFE, RMF, EfeSpec, GDConv, GhostConv, GhostSpec, RmfSpec
from .errors import ConfigError
from .loss import bce_loss, iou_loss
from .tensor import Tensor, analytic_gradient, gradient_error, numeric_gradient

OP_TOL = 1e-6
BLOCK_TOL = 1e-5


@dataclass
class Case:
    name: str
    fn: Callable[[Tensor], Tensor]
    x: np.ndarray
    tol: float


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)

    def line(self) -> str:
        return f"{self.name:<16} rel_err={self.error:.3e}  tol={self.tol:.0e}  {'PASS' if self.passed else 'FAIL'}"


def _projected(out_fn, shape, rng):
    """Scalar loss sum(out * R) with a fixed random R, so every output element matters."""
    proj = {}

    def fn(x):
        out = out_fn(x)
        if "r" not in proj:
            proj["r"] = rng.standard_normal(out.shape)
        return T.tsum(T.mul(out, proj["r"]))
    return fn


def _cases(seed: int) -> dict[str, Callable[[], Case]]:
    def rng():
        return np.random.default_rng(seed)

    def conv():
        r = rng()
        w = r.standard_normal((4, 3, 3, 3))
        b = r.standard_normal(4)
        f = _projected(lambda x: T.conv2d(x, Tensor(w), Tensor(b), stride=2, padding=1, dilation=1), None, r)
        return Case("conv2d", f, r.standard_normal((2, 3, 7, 7)), OP_TOL)

    def conv_weight():
        r = rng()
        x = r.standard_normal((1, 4, 8, 8))
        f = _projected(lambda w: T.conv2d(Tensor(x), w, padding=2, dilation=2, groups=2), None, r)
        return Case("conv2d_weight", f, r.standard_normal((6, 2, 3, 3)), OP_TOL)

    def depthwise():
        r = rng()
        w = r.standard_normal((6, 1, 3, 3))
        f = _projected(lambda x: T.conv2d(x, Tensor(w), padding=3, dilation=3, groups=3), None, r)
        return Case("depthwise", f, r.standard_normal((1, 3, 7, 7)), OP_TOL)

    def maxpool():
        r = rng()
        # distinct, well-separated values keep the argmax stable under the FD step
        x = r.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.01
        f = _projected(lambda t: T.maxpool2d(t, 5, padding="same"), None, r)
        return Case("maxpool", f, x, OP_TOL)

    def batchnorm():
        r = rng()
        g, b = r.standard_normal(3), r.standard_normal(3)
        rm, rv = np.zeros(3), np.ones(3)
        f = _projected(lambda x: T.batchnorm(x, Tensor(g), Tensor(b), rm.copy(), rv.copy(), training=True),
                       None, r)
        return Case("batchnorm", f, r.standard_normal((2, 3, 4, 4)), OP_TOL)

    def elementwise():
        r = rng()
        f = _projected(lambda x: T.add(T.leaky_relu(x, 0.1), T.mul(T.sigmoid(x), T.exp(T.neg(x)))), None, r)
        return Case("elementwise", f, r.standard_normal((3, 5)), OP_TOL)

    def combine():
        r = rng()
        y = r.standard_normal((1, 2, 3, 3))
        f = _projected(lambda x: T.upsample_nearest_2x(T.concat([x, Tensor(y), x[:, 1:]], axis=1)), None, r)
        return Case("concat_upsample", f, r.standard_normal((1, 2, 3, 3)), OP_TOL)

    def ghost():
        r = rng()
        block = GhostConv(GhostSpec(4, 8, 2, 3, 3), rng=r)
        return Case("ghost", _projected(block, None, r), r.standard_normal((2, 4, 6, 6)), BLOCK_TOL)

    def gdconv():
        r = rng()
        block = GDConv(4, 8, 2, rng=r)
        return Case("gdconv", _projected(block, None, r), r.standard_normal((2, 4, 6, 6)), BLOCK_TOL)

    def efe():
        r = rng()
        block = EFE(EfeSpec(4, 8), rng=r)
        return Case("efe", _projected(block, None, r), r.standard_normal((2, 4, 5, 5)), BLOCK_TOL)

    def rmf():
        r = rng()
        block = RMF(RmfSpec(4, pool_kernels=(1, 3, 5), dilations=(1, 2)), rng=r)
        return Case("rmf", _projected(block, None, r), r.standard_normal((2, 4, 5, 5)), BLOCK_TOL)

    def bce():
        r = rng()
        target = (r.random((4, 3)) > 0.5).astype(float)
        return Case("bce", lambda x: bce_loss(T.sigmoid(x), target), r.standard_normal((4, 3)), OP_TOL)

    def iou():
        r = rng()
        gt = np.array([[1.0, 1.0, 4.0, 5.0], [0.0, 2.0, 3.0, 6.0]])
        x = gt + 0.4 * r.standard_normal(gt.shape)
        return Case("iou_loss", lambda p: iou_loss(p, gt), x, OP_TOL)

    return {"conv2d": conv, "conv2d_weight": conv_weight, "depthwise": depthwise, "maxpool": maxpool,
            "batchnorm": batchnorm, "elementwise": elementwise, "concat_upsample": combine,
            "ghost": ghost, "gdconv": gdconv, "efe": efe, "rmf": rmf, "bce": bce, "iou_loss": iou}


BLOCKS = tuple(_cases(0))


def run(blocks=None, seed: int = 0, step: float = 1e-5, corrupt: bool = False) -> list[CheckResult]:
    """Check each named block; ``corrupt`` perturbs the analytic gradient (negative control)."""
    table = _cases(seed)
    names = list(table) if not blocks else list(blocks)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise ConfigError(f"unknown gradcheck block(s) {unknown}; valid: {', '.join(table)}")
    results = []
    for name in names:
        case = table[name]()
        numeric = numeric_gradient(case.fn, case.x, step)
        analytic = analytic_gradient(case.fn, case.x)
        if corrupt:
            analytic = analytic.copy()
            analytic.reshape(-1)[0] += 1e-3 * max(np.max(np.abs(analytic)), 1.0)
        results.append(CheckResult(name, gradient_error(analytic, numeric), case.tol))
    return results
