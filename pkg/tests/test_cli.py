"""End-to-end command-line flow on a small synthetic run.

The expensive chain (train, build-index, finetune, evaluate) runs once
per module; the assertions read its artifacts. Commands are invoked
in-process through ``main`` so exit codes and stderr are observable.
"""

from pathlib import Path

import numpy as np
import pytest
import yaml

from dicad.cli import main
from dicad.config import apply_overrides, default_config, load_config, save_config
from dicad.data import generate_synthetic, load_dataset, save_image, save_mask, SyntheticSpec
from dicad.metrics import EvalReport

SMALL_OVERRIDES = [
    "data.resolution=32",
    "data.num_train=24",
    "data.num_test_nominal=4",
    "data.num_test_per_kind=2",
    "denoiser.epochs=20",
    "denoiser.batch_size=8",
    "denoiser.learning_rate=1e-3",
    "denoiser.base_channels=16",
    "denoiser.time_dim=64",
    "codec.factor=2",
    "extractor.widths=8,16,32,64",
    "depth.num_neighbors=10",
    "sampling.eta=0",
    "eval.calibration_count=8",
    "seed=5",
]


def small_config():
    return apply_overrides(default_config(), SMALL_OVERRIDES)


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """Config file plus a run directory taken through the full chain."""
    base = tmp_path_factory.mktemp("cli")
    cfg_path = base / "small.yaml"
    save_config(cfg_path, small_config())
    run_dir = base / "run"
    for cmd in (["train"], ["build-index"], ["finetune"], ["evaluate", "--workers", "2"]):
        rc = main(cmd + ["--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 0, f"{cmd[0]} failed"
    return cfg_path, run_dir


class TestFullChain:
    def test_artifacts_present(self, cli_run):
        _, run_dir = cli_run
        for name in (
            "config.yaml",
            "denoiser.ckpt",
            "backbone.ckpt",
            "backbone_adapted.ckpt",
            "index.bin",
            "calibration.yaml",
            "report.txt",
            "report_table.txt",
        ):
            assert (run_dir / name).is_file(), name

    def test_config_snapshot_reproduces_config(self, cli_run):
        cfg_path, run_dir = cli_run
        assert load_config(run_dir / "config.yaml") == load_config(cfg_path)

    def test_report_parses_and_counts_match(self, cli_run):
        _, run_dir = cli_run
        report = EvalReport.load(run_dir / "report.txt")
        assert len(report.categories) == 1
        cat = report.categories[0]
        assert cat.category == "synthetic"
        assert cat.num_images == 10
        assert cat.num_anomalous == 6
        assert 0.0 <= cat.image_auroc <= 1.0
        assert 0.0 <= cat.pixel_auroc <= 1.0
        assert 0.0 <= cat.pro_score <= 1.0

    def test_heatmap_artifacts_per_test_image(self, cli_run):
        _, run_dir = cli_run
        heat = run_dir / "heatmaps"
        assert len(list(heat.glob("*_heat.png"))) == 10
        assert len(list(heat.glob("*_map.amap"))) == 10
        assert len(list(heat.glob("*_overlay.png"))) == 10

    def test_calibration_record(self, cli_run):
        _, run_dir = cli_run
        record = yaml.safe_load((run_dir / "calibration.yaml").read_text())
        assert record["feature_max"] > 0
        assert record["latent_max"] > 0
        assert record["num_images"] == 8
        assert record["image_threshold"] > 0

    def test_bench_writes_timings(self, cli_run, capsys):
        cfg_path, run_dir = cli_run
        rc = main(["bench", "--batch", "3",
                   "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 0
        text = (run_dir / "bench.txt").read_text()
        assert text.splitlines()[0] == "batch 3"
        assert "fps" in text
        assert text == capsys.readouterr().out

    def test_ablate_static_vs_dynamic(self, cli_run, capsys):
        cfg_path, run_dir = cli_run
        rc = main(["ablate", "--mode", "static-vs-dic",
                   "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 0
        table = (run_dir / "ablations" / "static_vs_dic.txt").read_text()
        lines = table.strip().splitlines()
        assert len(lines) == 6  # header + 4 static depths + dynamic
        assert lines[0].split() == ["row", "image_auroc", "pixel_auroc", "pro"]
        assert lines[-1].startswith("dynamic")
        assert {l.split()[0] for l in lines[1:-1]} == {
            "static-20", "static-40", "static-60", "static-80"
        }
        assert table == capsys.readouterr().out

    def test_ablate_adapt(self, cli_run):
        cfg_path, run_dir = cli_run
        rc = main(["ablate", "--mode", "adapt",
                   "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 0
        lines = (run_dir / "ablations" / "adapt.txt").read_text().strip().splitlines()
        assert [l.split()[0] for l in lines] == ["row", "unadapted", "adapted"]

    def test_ablate_omega_custom_values(self, cli_run):
        cfg_path, run_dir = cli_run
        rc = main(["ablate", "--mode", "omega", "--values", "0", "1",
                   "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 0
        lines = (run_dir / "ablations" / "omega.txt").read_text().strip().splitlines()
        assert [l.split()[0] for l in lines] == ["row", "omega-0", "omega-1"]

    def test_infer_scores_files(self, cli_run, tmp_path, capsys):
        cfg_path, run_dir = cli_run
        cfg = load_config(cfg_path)
        dataset = generate_synthetic(SyntheticSpec(
            image_size=cfg.data.resolution, seed=cfg.seed,
            num_train=cfg.data.num_train,
            num_test_nominal=cfg.data.num_test_nominal,
            num_test_per_kind=cfg.data.num_test_per_kind,
        ))
        nominal = next(s for s in dataset.test if s.label == 0)
        defect = next(s for s in dataset.test if s.defect_type == "missing")
        save_image(tmp_path / "a_nominal.png", nominal.image)
        save_image(tmp_path / "b_defect.png", defect.image)
        rc = main(["infer", str(tmp_path / "a_nominal.png"), str(tmp_path / "b_defect.png"),
                   "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "a_nominal:" in out and "b_defect:" in out
        scores = (run_dir / "scores.txt").read_text().strip().splitlines()
        assert len(scores) == 2
        assert scores[0].startswith("a_nominal score=")
        assert (run_dir / "heatmaps" / "b_defect_heat.png").is_file()
        assert (run_dir / "heatmaps" / "b_defect_map.amap").is_file()

    def test_infer_verdicts_follow_threshold(self, cli_run):
        _, run_dir = cli_run
        record = yaml.safe_load((run_dir / "calibration.yaml").read_text())
        for line in (run_dir / "scores.txt").read_text().strip().splitlines():
            fields = dict(kv.split("=") for kv in line.split()[1:])
            expected = int(float(fields["score"]) > record["image_threshold"])
            assert int(fields["anomalous"]) == expected


class TestErrorPaths:
    def test_missing_denoiser_names_artifact_and_command(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.yaml"
        save_config(cfg_path, small_config())
        run_dir = tmp_path / "fresh"
        rc = main(["evaluate", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "missing artifact" in err
        assert str(run_dir / "denoiser.ckpt") in err
        assert "dicad train" in err
        # the run dir was still prepared with its config snapshot
        assert (run_dir / "config.yaml").is_file()

    def test_train_codec_rejected_for_pooled(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.yaml"
        save_config(cfg_path, small_config())
        rc = main(["train-codec", "--config", str(cfg_path),
                   "--run-dir", str(tmp_path / "run")])
        assert rc == 1
        assert "codec.kind" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "absent.yaml"),
                   "--run-dir", str(tmp_path / "run")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_bad_override(self, tmp_path, capsys):
        rc = main(["train", "--set", "depth.nosuch=1",
                   "--run-dir", str(tmp_path / "run")])
        assert rc == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_inconsistent_config_rejected(self, tmp_path, capsys):
        rc = main(["train", "--set", "depth.t_max=5000",
                   "--run-dir", str(tmp_path / "run")])
        assert rc == 1
        assert "exceeds schedule.total_steps" in capsys.readouterr().err

    def test_unknown_ablate_mode_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["ablate", "--mode", "bogus", "--run-dir", str(tmp_path / "run")])
        assert info.value.code == 2

    def test_infer_missing_image(self, tmp_path, capsys, cli_run):
        cfg_path, run_dir = cli_run
        rc = main(["infer", str(tmp_path / "ghost.png"),
                   "--config", str(cfg_path), "--run-dir", str(run_dir)])
        assert rc == 1
        assert "image file not found" in capsys.readouterr().err

    def test_run_dir_defaults_to_category_under_env_root(
        self, tmp_path, monkeypatch, capsys
    ):
        cfg_path = tmp_path / "cfg.yaml"
        save_config(cfg_path, small_config())
        monkeypatch.setenv("DICAD_RUN_ROOT", str(tmp_path / "root"))
        rc = main(["evaluate", "--config", str(cfg_path)])
        assert rc == 1  # nothing trained there, but the dir was resolved
        assert str(tmp_path / "root" / "synthetic" / "denoiser.ckpt") in capsys.readouterr().err
        assert (tmp_path / "root" / "synthetic" / "config.yaml").is_file()


class TestDatasetCommands:
    def test_gen_synthetic_writes_loadable_tree(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.yaml"
        save_config(cfg_path, small_config())
        out = tmp_path / "data"
        rc = main(["gen-synthetic", "--out", str(out), "--config", str(cfg_path)])
        assert rc == 0
        assert "written to" in capsys.readouterr().out
        dataset = load_dataset(out, "synthetic")
        assert len(dataset.train) == 24
        assert len(dataset.test) == 10

    def test_convert_visa_round_trip(self, tmp_path, capsys):
        images = tmp_path / "visa"
        rng = np.random.default_rng(0)
        rows = ["object,split,label,image,mask"]
        for i in range(3):
            save_image(images / f"n{i}.png",
                       rng.random((3, 16, 16), dtype=np.float32))
            rows.append(f"candle,train,normal,n{i}.png,")
        save_image(images / "t0.png", rng.random((3, 16, 16), dtype=np.float32))
        rows.append("candle,test,normal,t0.png,")
        save_image(images / "t1.png", rng.random((3, 16, 16), dtype=np.float32))
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:9, 4:9] = True
        save_mask(images / "t1_mask.png", mask)
        rows.append("candle,test,anomaly,t1.png,t1_mask.png")
        csv_path = tmp_path / "split.csv"
        csv_path.write_text("\n".join(rows) + "\n")

        out = tmp_path / "converted"
        rc = main(["convert-visa", "--csv", str(csv_path),
                   "--images-root", str(images), "--out", str(out)])
        assert rc == 0
        assert "candle" in capsys.readouterr().out
        dataset = load_dataset(out, "candle")
        assert len(dataset.train) == 3
        assert len(dataset.test) == 2
        anomalous = [s for s in dataset.test if s.label == 1]
        assert len(anomalous) == 1
        assert anomalous[0].mask.sum() == 25
