import json
import os
from pathlib import Path

import numpy as np
import pytest

from cpmn.cli import build_config, main, parse_flat_config, resolve_ifa_auto


def _dataset_bytes(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data") / "data"
    rc = main(
        ["synth", "--pe", "4", "--normal", "8", "--extent", "32", "--seed", "5",
         "--vessels", "4", "--embolisms", "2",
         "--train-frac", "0.6", "--val-frac", "0.2", "--out", str(out)]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_run(tiny_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("cli-run") / "run"
    rc = main(
        ["train", "--data", str(tiny_dataset), "--patch-size", "32", "--epochs", "2",
         "--batch-size", "2", "--width-scale", "0.125", "--seed", "1", "--out", str(run)]
    )
    assert rc == 0
    return run


class TestSynth:
    def test_counts_and_split(self, tiny_dataset):
        manifest = json.loads((tiny_dataset / "manifest.json").read_text())
        assert len(manifest["cases"]) == 12
        assert sum(c["label"] for c in manifest["cases"]) == 4
        assert set(manifest["split"].values()) == {"train", "val", "test"}

    def test_rerun_is_byte_identical(self, tiny_dataset, tmp_path):
        again = tmp_path / "again"
        rc = main(
            ["synth", "--pe", "4", "--normal", "8", "--extent", "32", "--seed", "5",
             "--vessels", "4", "--embolisms", "2",
             "--train-frac", "0.6", "--val-frac", "0.2", "--out", str(again)]
        )
        assert rc == 0
        assert _dataset_bytes(tiny_dataset) == _dataset_bytes(again)

    def test_too_small_extent_nonzero_exit(self, tmp_path, capsys):
        rc = main(["synth", "--pe", "1", "--normal", "0", "--extent", "8",
                   "--out", str(tmp_path / "d")])
        assert rc != 0
        assert "generation error" in capsys.readouterr().err


class TestConfigResolution:
    def test_parse_flat_config(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# comment\ntrain.epochs = 7\nifa.alpha = 3\nloss.lambda2 = 5.0  # inline\n"
        )
        values = parse_flat_config(path)
        assert values == {"train.epochs": "7", "ifa.alpha": "3", "loss.lambda2": "5.0"}

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("nope.key = 1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            parse_flat_config(path)

    def test_env_overrides_file_and_flags_override_env(self, tmp_path, monkeypatch):
        path = tmp_path / "c.cfg"
        path.write_text("train.epochs = 7\ntrain.lr = 0.5\n")
        monkeypatch.setenv("CPMN_TRAIN_EPOCHS", "9")

        class Args:
            config = str(path)
            epochs = 11
            patch_size = "32"
            lr = None

        from cpmn.cli import assemble_settings

        values = assemble_settings(Args())
        assert values["train.epochs"] == "11"  # flag wins
        assert values["train.lr"] == "0.5"  # file survives when no override

        class ArgsNoFlag:
            config = str(path)
            epochs = None

        values = assemble_settings(ArgsNoFlag())
        assert values["train.epochs"] == "9"  # env beats file

    def test_ifa_auto_resolution(self):
        # 64^3 patch: bottleneck (4, 2, 2) tiles into 2 blocks of 8 voxels
        assert resolve_ifa_auto((64, 64, 64)) == (1, 8)
        # 32^3 patch: bottleneck (2, 1, 1) cannot tile, granularity 1
        assert resolve_ifa_auto((32, 32, 32)) == (1, 1)
        config, extras = build_config({"data.patch_size": "64"})
        assert (config.alpha, config.beta) == (1, 8)


class TestTrain:
    def test_run_dir_contents(self, trained_run):
        assert (trained_run / "config.cfg").exists()
        assert (trained_run / "log.jsonl").exists()
        assert (trained_run / "checkpoints" / "best.pt").exists()
        echoed = parse_flat_config(trained_run / "config.cfg")
        assert echoed["train.ablation"] == "mls_ifa_ifd"
        assert echoed["loss.lambda1"] == "0.25"

    def test_ablation_lambda_mapping_echoed(self, tiny_dataset, tmp_path):
        run = tmp_path / "mls"
        rc = main(
            ["train", "--data", str(tiny_dataset), "--patch-size", "32", "--epochs", "1",
             "--batch-size", "2", "--width-scale", "0.125", "--seed", "1",
             "--ablation", "mls", "--out", str(run)]
        )
        assert rc == 0
        echoed = parse_flat_config(run / "config.cfg")
        assert echoed["loss.lambda1"] == "0.25"
        assert echoed["loss.lambda2"] == "0.0"
        assert echoed["loss.lambda3"] == "0.0"

    def test_single_nct_zeroes_all_lambdas(self, tiny_dataset, tmp_path):
        run = tmp_path / "solo"
        rc = main(
            ["train", "--data", str(tiny_dataset), "--patch-size", "32", "--epochs", "1",
             "--batch-size", "2", "--width-scale", "0.125", "--seed", "1",
             "--ablation", "single_nct", "--out", str(run)]
        )
        assert rc == 0
        echoed = parse_flat_config(run / "config.cfg")
        assert echoed["loss.lambda1"] == "0.0"
        assert echoed["loss.lambda2"] == "0.0"
        assert echoed["loss.lambda3"] == "0.0"

    def test_invalid_ablation_usage_error(self, tiny_dataset):
        with pytest.raises(SystemExit) as excinfo:
            main(["train", "--data", str(tiny_dataset), "--ablation", "bogus"])
        assert excinfo.value.code == 2


class TestEvalAndInfer:
    def test_eval_writes_report_and_roc(self, tiny_dataset, trained_run, tmp_path):
        out = tmp_path / "eval"
        rc = main(
            ["eval", "--data", str(tiny_dataset),
             "--checkpoint", str(trained_run / "checkpoints" / "best.pt"),
             "--roc-out", str(out / "custom_roc.png"), "--out", str(out)]
        )
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        for key in ("sensitivity", "specificity", "auc", "mean_dice"):
            assert key in report
        assert report["phase"] == "nct"
        assert (out / "custom_roc.png").stat().st_size > 0

    def test_missing_checkpoint_nonzero_exit(self, tiny_dataset, tmp_path, capsys):
        rc = main(["eval", "--data", str(tiny_dataset),
                   "--checkpoint", str(tmp_path / "nope.pt")])
        assert rc == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_compare_reports(self, tiny_dataset, trained_run, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            rc = main(
                ["eval", "--data", str(tiny_dataset),
                 "--checkpoint", str(trained_run / "checkpoints" / "best.pt"),
                 "--out", str(out)]
            )
            assert rc == 0
        rc = main(
            ["eval", "--compare", str(out_a / "report.json"), str(out_b / "report.json"),
             "--n-perm", "200", "--seed", "0", "--out", str(tmp_path / "cmp")]
        )
        assert rc == 0
        result = json.loads((tmp_path / "cmp" / "compare.json").read_text())
        # identical checkpoints: no detectable difference
        assert result["permutation_p"] == 1.0
        assert result["delong_p"] == 1.0

    def test_infer_writes_arrays_and_summary(self, tiny_dataset, trained_run, tmp_path):
        out = tmp_path / "infer"
        rc = main(
            ["infer", "--data", str(tiny_dataset),
             "--checkpoint", str(trained_run / "checkpoints" / "best.pt"),
             "--split", "test", "--out", str(out)]
        )
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary
        from cpmn.dataset_io import read_array

        for case_id, entry in summary.items():
            prob = read_array(out / entry["seg_probmap"])
            assert prob.dtype == np.float32
            assert 0.0 <= prob.min() and prob.max() <= 1.0
            cam = read_array(out / entry["cam"])
            assert cam.shape == prob.shape
