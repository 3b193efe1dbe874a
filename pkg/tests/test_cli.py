"""Tests for cli.py — command handler integration tests."""

import csv
import json
from unittest.mock import patch

import pytest

import radar_fusion.config as config_mod
from radar_fusion import __version__
from radar_fusion.cli import main, run_forward
from radar_fusion.config import config_from_dict
from radar_fusion.nn_kernels import read_weights

SMALL = {
    "synthetic": {"n_frames": 2, "n_boxes": 4, "n_points": 150, "image_size": [64, 48]},
    "fusion": {"image_channels": 4, "n_levels": 3, "n_samples": 2},
    "backbone": {"base_channels": [4, 4, 8, 8, 8, 8], "double_channels": False, "n_residual": 1},
}


def write_config(path, **sections):
    data = {k: dict(v) for k, v in SMALL.items()}
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(autouse=True)
def patched_env(tmp_path, monkeypatch):
    """Keep debug output and env overrides out of the tests."""
    monkeypatch.delenv("RADAR_FUSION_SEED", raising=False)
    monkeypatch.delenv("RADAR_FUSION_THREADS", raising=False)
    with patch.object(config_mod, "DEBUG_LOG", tmp_path / "debug.log"):
        yield


@pytest.fixture
def config_file(tmp_path):
    return write_config(tmp_path / "run.json")


class TestVersion:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_no_args_shows_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 0
        assert "forward" in capsys.readouterr().out


class TestConfigErrors:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", fusion={"bogus": 1})
        with pytest.raises(SystemExit) as exc:
            main(["forward", "--config", str(cfg), "--out-dir", str(tmp_path / "out")])
        assert exc.value.code == 2
        assert "unknown config key: fusion.bogus" in capsys.readouterr().err

    def test_badly_typed_value_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", head={"attach_stage": "2"})
        with pytest.raises(SystemExit) as exc:
            main(["forward", "--config", str(cfg), "--out-dir", str(tmp_path / "out")])
        assert exc.value.code == 2
        assert "head.attach_stage must be an integer" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["forward", "--config", str(tmp_path / "nope.json")])
        assert exc.value.code == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_thread_count(self, config_file, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["forward", "--config", str(config_file), "--threads", "0", "--out-dir", str(tmp_path / "o")])
        assert exc.value.code == 2


class TestSynthAndIngest:
    def test_round_trip(self, config_file, tmp_path, capsys):
        data = tmp_path / "data"
        main(["synth", "--config", str(config_file), "--out-dir", str(data), "--frames", "3"])
        assert "Wrote 3 synthetic frame(s)" in capsys.readouterr().out
        out = tmp_path / "out"
        main(["ingest", "--config", str(config_file), "--data-root", str(data), "--out-dir", str(out)])
        printed = capsys.readouterr().out
        assert "000002" in printed
        report = json.loads((out / "ingest.json").read_text())
        assert sorted(report["frames"]) == ["000000", "000001", "000002"]
        row = report["frames"]["000000"]
        assert row["points"] == 150 and row["pyramid"] is True
        assert 0 < row["voxels"] <= row["in_range"]

    def test_ingest_needs_root(self, config_file, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["ingest", "--config", str(config_file), "--out-dir", str(tmp_path / "o")])
        assert exc.value.code == 2
        assert "dataset root" in capsys.readouterr().err

    def test_ingest_missing_points_dir(self, config_file, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(SystemExit) as exc:
            main(["ingest", "--config", str(config_file), "--data-root", str(tmp_path / "empty")])
        assert exc.value.code == 3


class TestForward:
    def test_writes_manifest_and_artifacts(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        main(["forward", "--config", str(config_file), "--out-dir", str(out)])
        assert "Processed 2 frame(s)" in capsys.readouterr().out
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["variant"] == "voxel"
        assert manifest["bev_shape"] == [32, 32, 8]
        assert sorted(manifest["frames"]) == ["000000", "000001"]
        files = manifest["frames"]["000000"]
        assert set(files) == {"bev.pyr", "scores.csv", "detections/000000.txt"}
        assert (out / "000000" / "bev.pyr").exists()
        assert (out / "detections" / "000001.txt").exists()

    def test_seed_override_changes_hash(self, config_file, tmp_path):
        main(["forward", "--config", str(config_file), "--out-dir", str(tmp_path / "a")])
        main(["forward", "--config", str(config_file), "--seed", "3", "--out-dir", str(tmp_path / "b")])
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert a["config_hash"] != b["config_hash"]
        assert b["seed"] == 3

    @pytest.mark.parametrize("threads", [4, 8])
    def test_thread_count_does_not_change_outputs(self, tmp_path, threads):
        data = {k: dict(v) for k, v in SMALL.items()}
        data["synthetic"]["n_frames"] = 3
        data["seed"] = 7
        serial = run_forward(config_from_dict(data), tmp_path / "serial")
        data["threads"] = threads
        parallel = run_forward(config_from_dict(data), tmp_path / "parallel")
        assert serial["frames"] == parallel["frames"]
        assert serial["config_hash"] == parallel["config_hash"]

    def test_pillar_variant(self, tmp_path):
        cfg = write_config(
            tmp_path / "pillar.json",
            variant="pillar",
            pillar={"channels": 4, "n_blocks": 2, "strides": [1, 1], "z_bins": 5},
        )
        main(["forward", "--config", str(cfg), "--out-dir", str(tmp_path / "out")])
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["bev_shape"] == [80, 80, 4]


class TestEval:
    def test_echoed_ground_truth_scores_perfectly(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "echo.json", head={"echo_ground_truth": True}, eval={"regimes": ["EAA"]})
        out = tmp_path / "out"
        main(["eval", "--config", str(cfg), "--out-dir", str(out)])
        assert "AP" in capsys.readouterr().out
        with open(out / "ap_table.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows
        assert all(float(r["ap"]) == 1.0 for r in rows)
        assert {r["ap_points"] for r in rows} == {"11", "40"}

    def test_detections_directory_from_forward(self, tmp_path):
        cfg = write_config(tmp_path / "echo.json", head={"echo_ground_truth": True}, eval={"regimes": ["EAA"]})
        out = tmp_path / "out"
        main(["forward", "--config", str(cfg), "--out-dir", str(out)])
        main(["eval", "--config", str(cfg), "--out-dir", str(out), "--detections", str(out / "detections")])
        with open(out / "ap_table.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows and all(float(r["ap"]) == 1.0 for r in rows)

    def test_no_detections_gives_zero_ap(self, tmp_path):
        cfg = write_config(tmp_path / "none.json", eval={"regimes": ["EAA"], "ap_points": [40]})
        out = tmp_path / "out"
        main(["eval", "--config", str(cfg), "--out-dir", str(out)])
        with open(out / "ap_table.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows and all(float(r["ap"]) == 0.0 for r in rows)


class TestAnalyzeBlur:
    def test_reports_point_classes(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        main(["analyze-blur", "--config", str(config_file), "--out-dir", str(out)])
        printed = capsys.readouterr().out
        assert printed.startswith("Points:")
        assert (out / "instance_ratios.csv").exists()

    def test_needs_semantic_head(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "nohead.json", fusion={"n_fusion": 0})
        with pytest.raises(SystemExit) as exc:
            main(["analyze-blur", "--config", str(cfg), "--out-dir", str(tmp_path / "o")])
        assert exc.value.code == 2
        assert "semantic head" in capsys.readouterr().err


class TestDumpWeights:
    def test_lists_and_writes_tensors(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        main(["dump-weights", "--config", str(config_file), "--out-dir", str(out), "--list"])
        printed = capsys.readouterr().out
        assert "stem.weight" in printed
        tensors = read_weights(out / "weights.rfw")
        assert tensors["stem.weight"].shape == (3, 3, 3, 7, 4)
        assert any(name.startswith("head.") for name in tensors)
