from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from equikernel.accounting import count_params_flops
from equikernel.core import ConvSpec
from equikernel.model import BackboneConfig, Network
from equikernel.reflect import PlainConv, ReflectConv

S = BackboneConfig()


def module_params(net: Network) -> dict[str, int]:
    out = {"stem": net.stem.num_parameters() + net.stem_bn.num_parameters()}
    for i, st_ in enumerate(net.stages, start=1):
        out[f"stage{i}"] = st_.num_parameters()
    if net.roel is not None:
        out["roel"] = net.roel.num_parameters()
    if net.sel is not None:
        out["sel"] = net.sel.num_parameters()
    out["head"] = net.head.num_parameters()
    return out


class TestClosedFormAgainstModules:
    @pytest.mark.parametrize("cfg", [S, S.ablated(), replace(S, sel=False), replace(S, sel=False, roel=False),
                                     replace(S, head_conv="full", branch_mode="dilated"),
                                     replace(S, widths=(4, 8, 8, 16), layers=(2, 1, 1, 2))])
    def test_rows_match_instantiated_counts(self, cfg):
        acc = count_params_flops(cfg)
        built = module_params(Network(cfg))
        assert {r.module: r.params for r in acc.rows} == built

    def test_reflect_halving_layer_by_layer(self):
        net = Network(S)
        convs = [m for m in net.modules() if isinstance(m, ReflectConv)]
        assert len(convs) >= 12
        for m in convs:
            c_in = 2 * m.in_channels if m.grouped else m.in_channels
            plain = PlainConv(c_in, m.out_channels, m.spec, bias=m.bias is not None, groups=m.groups)
            assert m.num_parameters() == plain.num_parameters()
            x = np.zeros((1, c_in, 5, 5), np.float32)
            assert m(x).shape[1] == 2 * plain(x).shape[1]


class TestTotals:
    def test_reflect_smaller_than_baseline(self):
        refl = count_params_flops(replace(S, roel=False, sel=False)).backbone_params
        base = count_params_flops(S.ablated()).backbone_params
        assert refl < base

    def test_baseline_near_reference(self):
        assert abs(count_params_flops(S.ablated()).backbone_params - 4.90e6) <= 0.25 * 4.90e6

    def test_toggles_are_additive(self):
        full = count_params_flops(S)
        no_sel = count_params_flops(replace(S, sel=False))
        no_both = count_params_flops(replace(S, sel=False, roel=False))
        assert full.backbone_params - no_sel.backbone_params == full.row("sel").params
        assert no_sel.backbone_params - no_both.backbone_params == full.row("roel").params

    @given(st.integers(1, 64))
    def test_backbone_macs_linear_in_frames(self, t):
        one = count_params_flops(S, frames=1)
        many = count_params_flops(S, frames=t)
        for name in ("stem", "stage1", "stage2", "stage3", "stage4"):
            assert many.row(name).macs == t * one.row(name).macs
        assert many.backbone_params == one.backbone_params

    def test_head_excluded(self):
        acc = count_params_flops(S)
        assert acc.backbone_params == sum(r.params for r in acc.rows) - acc.row("head").params

    def test_bad_frames(self):
        with pytest.raises(ValueError):
            count_params_flops(S, frames=0)
