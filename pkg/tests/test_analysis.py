import json

import numpy as np
import pytest

from crin import tensor as T
from crin.analysis import (CostTracker, bench_fps, conv_macs,
                           conventional_stage_macs, count_flops, count_params,
                           export_features, mti_stage_macs, scale_contribution)
from crin.nn import Conv2d, CrinConfig, CrinModel, ParamStore
from crin.tensor import Tensor


class TestParamCounts:
    @pytest.mark.parametrize("channels", [16, 64, 256])
    def test_depthwise_large_vs_small_kernel_ratio(self, channels):
        """A depthwise 21x21 kernel costs exactly 49x the parameters of a
        depthwise 3x3 at any channel count."""
        rng = np.random.default_rng(0)
        big = ParamStore()
        Conv2d(big, rng, "c", channels, channels, 21, groups=channels,
               bias=False)
        small = ParamStore()
        Conv2d(small, rng, "c", channels, channels, 3, groups=channels,
               bias=False)
        assert big.element_count() / small.element_count() == 49.0

    def test_count_params_matches_store(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        report = count_params(model)
        assert report.total_params == model.store.element_count()
        # independent re-count straight off the arrays
        manual = sum(t.data.size for _, t in model.store.learnable_items())
        assert report.total_params == manual

    def test_rows_cover_every_layer(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        report = count_params(model)
        names = {r.name for r in report.rows}
        assert any(n.startswith("encoder.stem") for n in names)
        assert any(".csi." in n for n in names)


class TestMacModels:
    def test_pointwise_conv_macs(self):
        assert conv_macs(64, 32, 1, 1, 10, 10) == 64 * 32 * 100

    def test_dense_vs_strip_decomposition_ratio(self):
        """A dense 21x21 convolution at 64 channels costs 672x the MACs of
        the decomposed depthwise column+row pair."""
        dense = conv_macs(64, 64, 21, 21, 8, 8)
        decomposed = (conv_macs(64, 64, 21, 1, 8, 8, groups=64)
                      + conv_macs(64, 64, 1, 21, 8, 8, groups=64))
        assert dense / decomposed == 672.0
        assert dense / decomposed >= 500.0

    def test_tracker_matches_mac_model(self, rng):
        store = ParamStore()
        conv = Conv2d(store, rng, "probe", 6, 9, 3, stride=2, groups=3)
        x = Tensor(rng.standard_normal((2, 6, 12, 12)).astype(np.float32))
        with CostTracker() as tracker:
            y = conv(x)
        oh, ow = y.shape[2:]
        expected = 2 * conv_macs(6, 9, 3, 3, oh, ow, groups=3)  # batch of 2
        assert tracker.macs["probe"] == expected

    @pytest.mark.parametrize("width", [12, 48, 96])
    def test_interaction_stage_cheaper_than_conventional(self, width):
        mti = mti_stage_macs(width, (16, 16))
        conventional = conventional_stage_macs(width, (16, 16))
        assert mti <= (2 / 3) * conventional


class TestFlopReport:
    def test_totals_and_convention(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        report = count_flops(model, (32, 32))
        assert report.total_macs > 0
        assert report.total_flops >= 2 * report.total_macs
        for row in report.rows:
            assert row.flops == 2 * row.macs + row.elem_ops

    def test_flops_scale_with_resolution(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        small = count_flops(model, (32, 32)).total_macs
        large = count_flops(model, (64, 64)).total_macs
        assert 3.5 < large / small < 4.5

    def test_csv_has_total_row(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        text = count_flops(model, (32, 32)).to_csv()
        assert text.splitlines()[0] == "layer,params,macs,flops"
        assert text.strip().splitlines()[-1].startswith("TOTAL,")


class TestFps:
    def test_report_fields(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        r = bench_fps(model, (32, 32), warmup=1, runs=3)
        assert r.runs == 3
        assert r.mean_fps > 0 and r.median_fps > 0

    def test_zero_runs_rejected(self, tiny_config):
        model = CrinModel(tiny_config, seed=0)
        with pytest.raises(ValueError, match="positive"):
            bench_fps(model, (32, 32), runs=0)


class TestScaleContribution:
    def test_fractions_sum_to_one(self, tiny_config, tiny_scenes):
        model = CrinModel(tiny_config, seed=0)
        sc = scale_contribution(model, tiny_scenes, batch_size=3)
        assert len(sc.rows) == tiny_config.num_stages * 3
        for row in sc.rows:
            assert abs(sum(row.fractions.values()) - 1.0) < 1e-9
            assert row.task_space in ("building", "shared", "road")

    def test_saturated_bias_wins_every_channel(self, tiny_config, tiny_scenes):
        model = CrinModel(tiny_config, seed=0)
        for block in model.csi_blocks:
            bias = model.store[f"{block.name}.mlp2.bias"].data
            bias[...] = 0.0
            bias[block.width:2 * block.width] = 50.0  # second scale branch
        sc = scale_contribution(model, tiny_scenes[:2], batch_size=2)
        label = str(tiny_config.branch_kernels[1])
        for row in sc.rows:
            assert row.fractions[label] == 1.0

    def test_requires_scale_blocks(self, tiny_config, tiny_scenes):
        model = CrinModel(tiny_config, seed=0, use_csi=False)
        with pytest.raises(ValueError, match="CSI"):
            scale_contribution(model, tiny_scenes)

    def test_csv_layout(self, tiny_config, tiny_scenes):
        model = CrinModel(tiny_config, seed=0)
        text = scale_contribution(model, tiny_scenes[:2], batch_size=2).to_csv()
        header = text.splitlines()[0]
        assert header.startswith("stage,resolution,task_space,")


class TestFeatureExport:
    def test_deterministic_export(self, tiny_config, tiny_scenes, tmp_path):
        model = CrinModel(tiny_config, seed=0)
        idx1 = export_features(model, tiny_scenes[0], tmp_path / "a",
                               max_channels=2)
        idx2 = export_features(model, tiny_scenes[0], tmp_path / "b",
                               max_channels=2)
        assert idx1["files"] == idx2["files"]
        f = idx1["files"][0]["file"]
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_index_written_and_stages_filtered(self, tiny_config, tiny_scenes,
                                               tmp_path):
        model = CrinModel(tiny_config, seed=0)
        idx = export_features(model, tiny_scenes[0], tmp_path, stages=[1],
                              max_channels=1)
        assert all(rec["stage"] == 1 for rec in idx["files"])
        on_disk = json.loads((tmp_path / "index.json").read_text())
        assert on_disk == idx
