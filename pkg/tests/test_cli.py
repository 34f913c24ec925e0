"""Command-line behavior: artifacts, determinism, exit codes."""

import json

import numpy as np
import pytest

from effseg.cli import main
from effseg.storage import load_dataset, load_weights, read_metrics_csv

TINY = {
    "seed": 7,
    "phantom": {"preset": "a", "n": 8},
    "net": {"depth": 1, "base_channels": 2},
    "train": {"epochs": 2, "steps_per_epoch": 2, "batch_size": 2},
    "eval": {"k": 4},
}


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture()
def dataset(tmp_path, cfg_path):
    out = tmp_path / "ds"
    assert main(["phantom", "--config", cfg_path, "--out", str(out)]) == 0
    return out


class TestPhantomCmd:
    def test_writes_layout_and_count(self, dataset, capsys):
        samples = load_dataset(dataset)
        assert len(samples) == 8
        assert (dataset / "resolved_config.json").exists()

    def test_rerun_byte_identical(self, tmp_path, cfg_path, dataset):
        again = tmp_path / "ds2"
        assert main(["phantom", "--config", cfg_path, "--out", str(again)]) == 0
        for rel in ("meta.csv", "images/0003.pgm", "masks/0007.pgm"):
            assert (dataset / rel).read_bytes() == (again / rel).read_bytes()

    def test_seed_flag_overrides(self, tmp_path, cfg_path, dataset):
        other = tmp_path / "ds3"
        assert main(["phantom", "--config", cfg_path, "--seed", "8",
                     "--out", str(other)]) == 0
        assert (dataset / "images/0000.pgm").read_bytes() != \
            (other / "images/0000.pgm").read_bytes()

    def test_preset_b_is_curved(self, tmp_path):
        cfg = tmp_path / "b.json"
        cfg.write_text(json.dumps({"phantom": {"preset": "b", "n": 2}}))
        out = tmp_path / "dsb"
        assert main(["phantom", "--config", str(cfg), "--out", str(out)]) == 0
        meta = (out / "meta.csv").read_text()
        assert "curved" in meta and "-20.0" in meta

    def test_resolved_config_materializes_defaults(self, dataset):
        doc = json.loads((dataset / "resolved_config.json").read_text())
        assert doc["train"]["momentum"] == 0.99
        assert doc["phantom"]["intensity_pleura"] == 0.85
        assert doc["net"]["coord_mode"] == "none"
        assert doc["eval"]["k"] == 4


class TestPreprocessCmd:
    def test_cleaned_layout_and_log(self, tmp_path, cfg_path, dataset):
        out = tmp_path / "clean"
        assert main(["preprocess", str(dataset), "--config", cfg_path,
                     "--out", str(out)]) == 0
        lines = (out / "preproc_log.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 8
        assert lines[0].startswith("id,n_detections,detections,crop_r0")
        cleaned = load_dataset(out)
        assert len(cleaned) == 8
        assert all(s.cross_positions == [] for s in cleaned)

    def test_cross_free_dataset_images_unchanged(self, tmp_path, cfg_path):
        cfg = dict(TINY)
        cfg["phantom"] = {"preset": "a", "n": 3, "burn_crosses": False}
        p = tmp_path / "nc.json"
        p.write_text(json.dumps(cfg))
        ds = tmp_path / "nc_ds"
        out = tmp_path / "nc_clean"
        assert main(["phantom", "--config", str(p), "--out", str(ds)]) == 0
        assert main(["preprocess", str(ds), "--config", str(p), "--out", str(out)]) == 0
        for i in range(3):
            assert (ds / f"images/{i:04d}.pgm").read_bytes() == \
                (out / f"images/{i:04d}.pgm").read_bytes()

    def test_malformed_pgm_reported_run_continues(self, tmp_path, cfg_path, dataset, capsys):
        (dataset / "images" / "0002.pgm").write_bytes(b"P5\n4 4\n255\nxx")
        out = tmp_path / "clean"
        assert main(["preprocess", str(dataset), "--config", cfg_path,
                     "--out", str(out)]) == 2
        assert "0002" in capsys.readouterr().err
        assert len(load_dataset(out)) == 7


class TestTrainCmd:
    def test_weights_round_trip_and_log(self, tmp_path, cfg_path, dataset):
        out = tmp_path / "tr"
        assert main(["train", str(dataset), "--config", cfg_path,
                     "--out", str(out), "--fold", "0"]) == 0
        weights = load_weights(out / "weights_baseline_fold0.efsg")
        assert weights["enc0.conv0.w"].shape == (2, 1, 3, 3)
        log = (out / "train_log_baseline_fold0.csv").read_text().strip().splitlines()
        assert len(log) == 1 + TINY["train"]["epochs"]

    def test_coordconv_widens_first_layer(self, tmp_path, cfg_path, dataset):
        out = tmp_path / "trc"
        assert main(["train", str(dataset), "--config", cfg_path,
                     "--out", str(out), "--fold", "0", "--coordconv"]) == 0
        weights = load_weights(out / "weights_coordconv_fold0.efsg")
        assert weights["enc0.conv0.w"].shape == (2, 3, 3, 3)

    def test_invalid_fold_is_usage_error(self, tmp_path, cfg_path, dataset):
        assert main(["train", str(dataset), "--config", cfg_path,
                     "--out", str(tmp_path / "x"), "--fold", "9"]) == 1


class TestCvAndReportCmd:
    @pytest.fixture()
    def cv_out(self, tmp_path, cfg_path, dataset):
        out = tmp_path / "cv"
        assert main(["cv", str(dataset), "--config", cfg_path, "--out", str(out)]) == 0
        return out

    def test_metrics_two_variants(self, cv_out):
        records = read_metrics_csv(cv_out / "metrics.csv")
        assert len(records) == 2 * 8
        assert {r.variant for r in records} == {"baseline", "coordconv"}
        inter = read_metrics_csv(cv_out / "interobs.csv")
        assert len(inter) == 8
        assert all(r.variant == "interobs" and r.fold == -1 for r in inter)

    def test_report_shape(self, cv_out):
        text = (cv_out / "report.txt").read_text()
        assert "Baseline" in text and "Coord. conv." in text and "Inter-observer" in text
        assert text.count("(") >= 6  # median (q1, q3) per metric per variant

    def test_hist_counts_sum(self, cv_out):
        for name in ("hist_baseline.csv", "hist_coordconv.csv"):
            rows = (cv_out / name).read_text().strip().splitlines()[1:]
            assert sum(int(r.split(",")[2]) for r in rows) == 8

    def test_report_cmd_reproduces_byte_identical(self, tmp_path, cfg_path, cv_out):
        out = tmp_path / "rep"
        assert main(["report", str(cv_out / "metrics.csv"),
                     str(cv_out / "interobs.csv"),
                     "--config", cfg_path, "--out", str(out)]) == 0
        assert (out / "report.txt").read_bytes() == (cv_out / "report.txt").read_bytes()

    def test_report_merges_single_variant_files(self, tmp_path, cfg_path, cv_out):
        records = read_metrics_csv(cv_out / "metrics.csv")
        from effseg.storage import write_metrics_csv
        b = tmp_path / "base.csv"
        c = tmp_path / "coord.csv"
        write_metrics_csv(b, [r for r in records if r.variant == "baseline"])
        write_metrics_csv(c, [r for r in records if r.variant == "coordconv"])
        out = tmp_path / "merged"
        assert main(["report", str(b), str(c), "--config", cfg_path,
                     "--out", str(out)]) == 0
        assert (out / "report.txt").read_text().count("Wilcoxon") == 1

    def test_empty_csv_is_data_error(self, tmp_path, cfg_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert main(["report", str(p), "--config", cfg_path,
                     "--out", str(tmp_path / "r")]) == 2


class TestUsageAndConfigErrors:
    def test_unknown_command_exits_1(self):
        assert main(["frobnicate"]) == 1

    def test_missing_dataset_dir_is_data_error(self, tmp_path, cfg_path):
        assert main(["cv", str(tmp_path / "nope"), "--config", cfg_path,
                     "--out", str(tmp_path / "o")]) == 2

    def test_bad_json_is_data_error(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        assert main(["phantom", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_config_key_is_data_error(self, tmp_path):
        p = tmp_path / "k.json"
        p.write_text(json.dumps({"train": {"leerning_rate": 1}}))
        assert main(["phantom", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_section_is_data_error(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"optimizer": {}}))
        assert main(["phantom", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
