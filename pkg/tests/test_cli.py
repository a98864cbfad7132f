import json
import subprocess
import sys

import numpy as np
import pytest

from woundseg.cli import build_parser, cli
from woundseg.data_io import read_mask, write_png

from conftest import run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


class TestPipeline:
    def test_train_outputs(self, pipeline):
        run = pipeline / "run"
        assert {p.name for p in run.iterdir()} >= {"best.futw", "history.csv", "run.json"}
        assert json.loads((run / "run.json").read_text())["epochs_run"] == 3

    def test_predict_mirrors_filenames(self, pipeline):
        inputs = sorted(p.name for p in (pipeline / "data" / "train" / "images").iterdir())
        assert sorted(p.name for p in (pipeline / "pred").iterdir()) == inputs
        for name in inputs:
            m = read_mask(pipeline / "pred" / name)
            assert m.shape == (64, 64) and set(np.unique(m)) <= {0, 255}

    def test_predict_restores_original_size(self, pipeline, tmp_path, rng):
        write_png(rng.integers(0, 256, (40, 50, 3), dtype=np.uint8), tmp_path / "in" / "odd.png")
        code = cli(["predict", "--weights", str(pipeline / "run" / "best.futw"), "--input", str(tmp_path / "in"),
                    "--out", str(tmp_path / "out")])
        assert code == 0 and read_mask(tmp_path / "out" / "odd.png").shape == (40, 50)

    def test_gradcam_panels(self, pipeline, tmp_path):
        code = cli(["gradcam", "--weights", str(pipeline / "run" / "best.futw"),
                    "--input", str(pipeline / "data" / "validation" / "images"), "--out", str(tmp_path)])
        assert code == 0
        names = {p.name for p in tmp_path.iterdir()}
        assert {"synth_0000_cam.png", "synth_0000_overlay.png", "synth_0000_sbs.png"} <= names

    def test_stats(self, pipeline, tmp_path, capsys):
        assert cli(["stats", "--data-dir", str(pipeline / "data"), "--out", str(tmp_path / "s.json")]) == 0
        data = json.loads((tmp_path / "s.json").read_text())
        assert data["split_counts"] == {"train": 8, "validation": 2}
        assert (tmp_path / "s.csv").exists() and "wound fraction" in capsys.readouterr().out


class TestUsage:
    def test_help_exits_zero_and_shows_defaults(self, capsys):
        assert cli(["train", "--help"]) == 0
        out = capsys.readouterr().out
        assert "--epochs" in out and "default: 50" in out

    @pytest.mark.parametrize("argv", [[], ["fly"], ["predict", "--input", "x"], ["gradcam", "--weights", "w",
                                      "--input", "i", "--out", "o", "--layer", "nope"]])
    def test_usage_errors_exit_two(self, argv, capsys):
        assert cli(argv) == 2
        assert "usage" in capsys.readouterr().err

    def test_bad_weights_exit_one(self, tmp_path, capsys):
        (tmp_path / "w.futw").write_bytes(b"garbage")
        write_png(np.zeros((8, 8, 3), np.uint8), tmp_path / "in" / "a.png")
        code = cli(["predict", "--weights", str(tmp_path / "w.futw"), "--input", str(tmp_path / "in"),
                    "--out", str(tmp_path / "out"), "--scaled"])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("woundseg predict: error:") and "Traceback" not in err

    def test_missing_data_exit_one(self, tmp_path, capsys):
        assert cli(["train", "--data-dir", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
        assert "missing image folder" in capsys.readouterr().err

    def test_every_subcommand_registered(self):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        assert set(sub.choices) == {"train", "predict", "gradcam", "stats", "synth"}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "woundseg", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
