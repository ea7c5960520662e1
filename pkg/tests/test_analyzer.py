import csv
import io

import numpy as np
import pytest

from lfyolo.analyzer import CSV_FIELDS, block_report, count_macs, count_params, report
from lfyolo.blocks import EFE, RMF, EfeSpec, ResidualRef, RmfSpec
from lfyolo.layers import Conv2d
from lfyolo.model import ModelConfig, build


def test_one_by_one_conv_with_bias_has_two_params():
    rows = count_params(Conv2d(1, 1, 1, bias=True), c_in=1)
    assert sum(r.params for r in rows) == 2


def test_depthwise_macs():
    rows = count_macs(Conv2d(4, 8, 3, groups=4), 10, 10, c_in=4)
    assert rows[0].macs == 8 * 1 * 9 * 100


def test_totals_are_column_sums():
    rep = report(ModelConfig(width_multiplier=0.25))
    assert rep.total_params == sum(r.params for r in rep.rows)
    assert rep.total_macs == sum(r.macs for r in rep.rows)
    assert rep.total_params == sum(rep.breakdown.values())


def test_stride_one_conv_rows_obey_weight_area_law():
    rep = report(ModelConfig(width_multiplier=0.25), 64, 64)
    for r in rep.rows:
        if r.type.startswith("conv") and r.stride == 1 and r.macs:
            assert r.macs % r.weights == 0


def test_params_equal_serialized_elements():
    cfg = ModelConfig(width_multiplier=0.5)
    assert report(cfg).total_params == build(cfg).num_elements()
    block = EFE(EfeSpec(16, 32))
    assert block_report(block, 8, 8).total_params == block.num_elements()


def test_macs_scale_by_four():
    a = report(ModelConfig(), 320, 320)
    b = report(ModelConfig(), 640, 640)
    assert b.total_macs == 4 * a.total_macs
    assert b.total_params == a.total_params


def test_monotone_in_width():
    p = [report(ModelConfig(width_multiplier=n)).total_params for n in (0.5, 1.0, 1.25)]
    assert p[0] < p[1] < p[2]


def test_csv_schema():
    rep = block_report(ResidualRef(), 208, 208)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_FIELDS
    assert sum(int(r[-1]) for r in rows[1:]) == rep.total_macs


def test_text_rounding_and_convention_footnote():
    text = block_report(ResidualRef(), 208, 208).to_text()
    total = [line for line in text.splitlines() if line.startswith("total")][0].split()
    assert total[1:] == ["0.6", "26.9"]
    assert "multiply-accumulates" in text
    madd = block_report(ResidualRef(), 208, 208, flops_convention="madd")
    assert madd.total_flops == 2 * madd.total_macs


def test_unknown_convention():
    with pytest.raises(ValueError):
        block_report(ResidualRef(), 8, 8, flops_convention="flops")


def test_rmf_trace_includes_pool_rows_with_zero_macs():
    rep = block_report(RMF(RmfSpec(8)), 10, 10)
    pools = [r for r in rep.rows if r.type == "maxpool"]
    assert len(pools) == 3 and all(r.macs == 0 for r in pools)


def test_detail_text_lists_every_row():
    rep = block_report(EFE(EfeSpec(8, 16)), 8, 8)
    assert len(rep.to_text(detail=True).splitlines()) >= len(rep.rows)
    assert np.isfinite(rep.total_macs)
