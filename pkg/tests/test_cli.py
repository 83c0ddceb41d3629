import numpy as np
import pytest

from crin.cli import main
from crin.config import ConfigError, DEFAULTS, RunConfig
from crin.io import load_mask, load_pgm, load_ppm

TINY = [
    "--set", "model.stage_widths=6,12",
    "--set", "synth.scene_size=32",
    "--set", "synth.train_scenes=4",
    "--set", "synth.val_scenes=2",
    "--set", "synth.test_scenes=0",
    "--set", "synth.road_width=2,4",
    "--set", "synth.building_count=3",
    "--set", "synth.building_size=4,8",
    "--set", "train.max_iters=3",
    "--set", "train.eval_interval=3",
    "--set", "train.checkpoint_interval=3",
]


class TestRunConfig:
    def test_defaults_resolve(self):
        rc = RunConfig.resolve()
        assert rc.get_int("train.max_iters") == 2000
        assert rc.get_float("train.base_lr") == 0.001
        assert rc.get_bool("train.augment") is True
        assert rc.crin_config().stage_widths == (12, 24, 48, 96)
        assert rc.train_config().batch_size == 4
        assert rc.synth_config().scene_size == 128

    def test_file_with_comments_and_overrides(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment line\n"
                       "train.max_iters = 50  # trailing comment\n"
                       "\n"
                       "synth.seed = 9\n")
        rc = RunConfig.resolve(str(cfg), ["train.max_iters=60"])
        assert rc.get_int("train.max_iters") == 60  # override wins
        assert rc.get_int("synth.seed") == 9

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("train.turbo = yes\n")
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.resolve(str(cfg))
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.resolve(None, ["nope=1"])

    def test_bad_value_types_reported(self):
        rc = RunConfig.resolve(None, ["train.max_iters=many"])
        with pytest.raises(ConfigError, match="not an integer"):
            rc.get_int("train.max_iters")
        with pytest.raises(ConfigError, match="not a boolean"):
            RunConfig.resolve(None, ["train.augment=maybe"]).get_bool("train.augment")

    def test_fingerprint_tracks_values(self):
        a = RunConfig.resolve().fingerprint()
        b = RunConfig.resolve(None, ["train.seed=1"]).fingerprint()
        assert a != b
        assert a == RunConfig.resolve().fingerprint()

    def test_every_key_has_help_text(self):
        for key, (default, help_text) in DEFAULTS.items():
            assert help_text, key
            assert default is not None, key

    def test_echo_writes_resolved_file(self, tmp_path):
        rc = RunConfig.resolve(None, ["train.seed=4"])
        rc.echo(tmp_path, "0.0-test")
        text = (tmp_path / "resolved_config.cfg").read_text()
        assert "train.seed = 4" in text
        assert text.startswith("# crin 0.0-test")


class TestCliContract:
    def test_unknown_flag_exits_1_writes_nothing(self, tmp_path):
        out = tmp_path / "never"
        assert main(["synth", "--out", str(out), "--frobnicate"]) == 1
        assert not out.exists()

    def test_unknown_subcommand_exits_1(self):
        assert main(["transmogrify"]) == 1

    def test_bad_config_value_exits_1(self, tmp_path):
        rcode = main(["synth", "--out", str(tmp_path / "ds"),
                      "--set", "synth.train_scenes=lots"])
        assert rcode == 1

    def test_missing_dataset_exits_1(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "run")] + TINY) == 1

    def test_corrupt_checkpoint_exits_2(self, tmp_path, capsys):
        ds = tmp_path / "ds"
        assert main(["synth", "--out", str(ds)] + TINY) == 0
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"JUNKJUNKJUNK")
        rcode = main(["eval", "--data", str(ds), "--checkpoint", str(junk)]
                     + TINY)
        assert rcode == 2

    def test_version_flag(self, capsys):
        assert main(["--version"]) == 0
        assert capsys.readouterr().out.startswith("crin ")


class TestSynthCommand:
    def test_deterministic_trees(self, tmp_path):
        for d in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / d)] + TINY) == 0
        a_files = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        b_files = sorted(p.relative_to(tmp_path / "b")
                         for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert a_files == b_files and a_files
        for rel in a_files:
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_writes_manifest_and_resolved_config(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "ds")] + TINY) == 0
        assert (tmp_path / "ds" / "manifest.json").exists()
        assert (tmp_path / "ds" / "resolved_config.cfg").exists()
        assert (tmp_path / "ds" / "train").is_dir()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth + short train shared by the heavier CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    ds, run = root / "ds", root / "run"
    assert main(["synth", "--out", str(ds)] + TINY) == 0
    assert main(["train", "--data", str(ds), "--out", str(run),
                 "--progress", "0"] + TINY) == 0
    return root, ds, run


class TestPipeline:
    def test_train_outputs(self, pipeline):
        _, _, run = pipeline
        log = (run / "train_log.csv").read_text().splitlines()
        assert log[0] == "iter,lr,l_building,l_road,l_aux,l_total"
        assert len(log) == 4  # header + 3 iterations
        assert (run / "checkpoint_latest.ckpt").exists()
        assert (run / "val_metrics.csv").exists()

    def test_eval_prints_metric_table(self, pipeline, capsys):
        _, ds, run = pipeline
        rcode = main(["eval", "--data", str(ds),
                      "--checkpoint", str(run / "checkpoint_latest.ckpt")]
                     + TINY)
        assert rcode == 0
        out = capsys.readouterr().out
        assert "IoU" in out and "Precision" in out
        assert "building" in out and "road" in out

    def test_eval_fingerprint_guard(self, pipeline):
        _, ds, run = pipeline
        args = ["eval", "--data", str(ds),
                "--checkpoint", str(run / "checkpoint_latest.ckpt")] + TINY
        assert main(args + ["--set", "train.seed=99"]) == 2
        assert main(args + ["--set", "train.seed=99",
                            "--allow-fingerprint-mismatch"]) == 0

    def test_predict_writes_maps_and_error_colors(self, pipeline):
        root, ds, run = pipeline
        img = ds / "val" / "scene_00004.ppm"
        pred = root / "pred"
        rcode = main(["predict", "--image", str(img),
                      "--checkpoint", str(run / "checkpoint_latest.ckpt"),
                      "--out", str(pred),
                      "--building-mask", str(ds / "val" / "scene_00004_building.pgm"),
                      "--road-mask", str(ds / "val" / "scene_00004_road.pgm")]
                     + TINY) == 0
        assert rcode
        prob = load_pgm(pred / "scene_00004_building_prob.pgm")
        assert prob.shape == (32, 32)
        mask = load_mask(pred / "scene_00004_building_pred.pgm")
        assert set(np.unique(mask)) <= {0, 1}
        err = load_ppm(pred / "scene_00004_road_error.ppm")
        pixels = {tuple(p) for p in err.reshape(3, -1).T}
        allowed = {(0, 0, 0), (0, 255, 0), (0, 0, 255), (255, 0, 0)}
        assert pixels <= allowed

    def test_analyze_reports(self, pipeline, capsys):
        root, ds, run = pipeline
        rcode = main(["analyze", "--params", "--flops", "--scales",
                      "--features", str(root / "feats"),
                      "--data", str(ds), "--input-size", "32",
                      "--checkpoint", str(run / "checkpoint_latest.ckpt")]
                     + TINY)
        assert rcode == 0
        out = capsys.readouterr().out
        assert "TOTAL," in out
        assert "stage,resolution,task_space," in out
        assert (root / "feats" / "index.json").exists()

    def test_analyze_without_flags_is_usage_error(self, pipeline):
        assert main(["analyze"] + TINY) == 1

    def test_resume_from_checkpoint(self, pipeline):
        root, ds, run = pipeline
        out2 = root / "resumed"
        rcode = main(["train", "--data", str(ds), "--out", str(out2),
                      "--resume", str(run / "checkpoint_000003.ckpt"),
                      "--progress", "0"] + TINY
                     + ["--set", "train.max_iters=5",
                        "--set", "train.eval_interval=5",
                        "--set", "train.checkpoint_interval=5",
                        "--allow-fingerprint-mismatch"])
        assert rcode == 0
        assert (out2 / "checkpoint_000005.ckpt").exists()


class TestGradcheckCommand:
    def test_csv_output_and_tolerance(self, capsys):
        assert main(["gradcheck", "--tol", "1e-5"]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "param,max_rel_err,mean_rel_err"
        assert "conv2d" in out

    def test_impossible_tolerance_fails(self, capsys):
        assert main(["gradcheck", "--tol", "1e-30"]) == 2
