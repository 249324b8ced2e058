from pathlib import Path

import numpy as np
import pytest

from collabseg import __version__
from collabseg.cli import main
from collabseg.data import load_manifest, load_prediction
from collabseg.trainer import StepLog, config_field_docs

TINY_FLAGS = [
    "--image-size", "64", "--backbone-channels", "8,16,24,32,40",
    "--decoder-width", "8", "--epochs", "1", "--batch-size", "4",
    "--checkpoint-every", "100",
]

GOLDEN_TRAIN_HELP = Path(__file__).parent / "data" / "train_help.txt"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset plus one trained tiny checkpoint, built via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["synth-data", "--out", str(data), "--n", "4", "--size", "64",
                 "--seed", "0", "--thickness", "3"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), *TINY_FLAGS]) == 0
    return root


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_no_subcommand_fails(self, capsys):
        assert main([]) == 1
        assert "required" in capsys.readouterr().err

    def test_unknown_flag_fails(self, capsys):
        assert main(["synth-data", "--out", "x", "--virulence", "9"]) == 1
        assert "--virulence" in capsys.readouterr().err

    def test_unknown_subcommand_fails(self):
        assert main(["deploy"]) == 1

    def test_train_help_matches_golden(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        assert capsys.readouterr().out == GOLDEN_TRAIN_HELP.read_text()

    def test_train_help_names_every_config_key(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--help"])
        text = capsys.readouterr().out
        for key in config_field_docs():
            assert f"--{key.replace('_', '-')}" in text
            assert f"config key {key} " in text

    def test_choice_flags_are_validated(self, capsys):
        assert main(["train", "--data", "x", "--out", "y",
                     "--prompt-source", "box9"]) == 1
        assert "box9" in capsys.readouterr().err


class TestSynthData:
    def test_layout_and_stdout(self, workspace, capsys):
        out = workspace / "data2"
        assert main(["synth-data", "--out", str(out), "--n", "2", "--size", "32"]) == 0
        printed = capsys.readouterr().out.strip()
        assert printed == str(out / "manifest.csv")
        for sub in ("images", "scribbles", "masks"):
            assert len(list((out / sub).glob("*.png"))) == 2
        records = load_manifest(out / "manifest.csv")
        assert len(records) == 2


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.pt").is_file()
        lines = (run / "history.csv").read_text().splitlines()
        assert lines[0] == StepLog.CSV_HEADER
        assert len(lines) == 2  # one epoch, one batch of four

    def test_missing_data_dir(self, workspace, capsys):
        assert main(["train", "--data", str(workspace / "absent"),
                     "--out", str(workspace / "r2"), *TINY_FLAGS]) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_segmenter_spec(self, workspace, capsys):
        assert main(["train", "--data", str(workspace / "data"),
                     "--out", str(workspace / "r3"), *TINY_FLAGS,
                     "--segmenter", "stub:psychic"]) == 1
        assert "psychic" in capsys.readouterr().err

    def test_oracle_without_masks_is_a_runtime_error(self, workspace, tmp_path, capsys):
        src = load_manifest(workspace / "data" / "manifest.csv")
        manifest = tmp_path / "manifest.csv"
        rows = ["id,image,scribble,mask,split"]
        rows += [f"{r.id},{r.image},{r.scribble},,train" for r in src]
        manifest.write_text("\n".join(rows) + "\n")
        assert main(["train", "--data", str(manifest),
                     "--out", str(tmp_path / "run"), *TINY_FLAGS,
                     "--segmenter", "stub:oracle"]) == 2
        assert "ground truth" in capsys.readouterr().err


class TestConfigMerge:
    def test_yaml_applies_and_flags_override(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            "image_size: 64\n"
            "backbone_channels: [8, 16, 24, 32, 40]\n"
            "decoder_width: 8\n"
            "batch_size: 4\n"
            "epochs: 3\n"
            "checkpoint_every: 100\n"
        )
        out = tmp_path / "yaml_run"
        assert main(["train", "--data", str(workspace / "data"),
                     "--out", str(out), "--config", str(cfg),
                     "--epochs", "1"]) == 0
        capsys.readouterr()
        # the --epochs flag overrode the file's 3: one step logged, not three
        assert len((out / "history.csv").read_text().splitlines()) == 2

    def test_unknown_yaml_key(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("image_size: 64\nlearning_rate: 0.1\n")
        assert main(["train", "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_config_file(self, workspace, tmp_path, capsys):
        assert main(["train", "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "x"),
                     "--config", str(tmp_path / "none.yaml")]) == 1
        assert "config file" in capsys.readouterr().err


class TestPredict:
    def test_directory_input(self, workspace, capsys):
        preds = workspace / "preds"
        assert main(["predict", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                     "--input", str(workspace / "data" / "images"),
                     "--out", str(preds)]) == 0
        assert capsys.readouterr().out.strip() == str(preds)
        files = sorted(p.name for p in preds.glob("*.png"))
        assert files == [f"sample_{i:03d}.png" for i in range(4)]
        prob = load_prediction(preds / "sample_000.png")
        assert prob.shape == (64, 64)
        assert 0.0 <= prob.min() and prob.max() <= 1.0

    def test_single_file_with_overlay(self, workspace, tmp_path):
        out = tmp_path / "one"
        image = workspace / "data" / "images" / "sample_001.png"
        assert main(["predict", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                     "--input", str(image), "--out", str(out), "--overlay"]) == 0
        assert (out / "sample_001.png").is_file()
        assert (out / "overlays" / "sample_001.png").is_file()
        # overlays must not pollute the prediction directory itself
        assert sorted(p.name for p in out.iterdir()) == ["overlays", "sample_001.png"]

    def test_empty_input_dir(self, workspace, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["predict", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                     "--input", str(empty), "--out", str(tmp_path / "o")]) == 1
        assert "no images" in capsys.readouterr().err


class TestMakePrompts:
    def test_stdout_schema(self, workspace, capsys):
        assert main(["make-prompts", "--data", str(workspace / "data")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "image_id,x0,y0,x1,y1,source"
        assert len(lines) == 5
        for line in lines[1:]:
            sid, x0, y0, x1, y1, source = line.split(",")
            assert sid.startswith("sample_")
            x0, y0, x1, y1 = map(int, (x0, y0, x1, y1))
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
            assert source in ("intersection", "fallback")

    def test_without_checkpoint_everything_falls_back(self, workspace, capsys):
        assert main(["make-prompts", "--data", str(workspace / "data")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()[1:]
        assert all(line.endswith(",fallback") for line in lines)

    def test_with_checkpoint_writes_file(self, workspace, tmp_path):
        out = tmp_path / "prompts.csv"
        assert main(["make-prompts", "--data", str(workspace / "data"),
                     "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 5
        sources = {line.split(",")[-1] for line in lines[1:]}
        assert sources <= {"intersection", "fallback"}

    def test_margin_widens_fallback_boxes(self, workspace, capsys):
        def areas(margin):
            assert main(["make-prompts", "--data", str(workspace / "data"),
                         "--margin-px", str(margin)]) == 0
            rows = capsys.readouterr().out.strip().splitlines()[1:]
            out = []
            for line in rows:
                _, x0, y0, x1, y1, _ = line.split(",")
                out.append((int(x1) - int(x0)) * (int(y1) - int(y0)))
            return out
        small, large = areas(0), areas(120)
        assert all(b >= a for a, b in zip(small, large))
        assert any(b > a for a, b in zip(small, large))


class TestEval:
    def test_report_files_and_stability(self, workspace, capsys):
        args = ["eval", "--pred", str(workspace / "preds"),
                "--gt", str(workspace / "data" / "masks"),
                "--out", str(workspace / "evald")]
        assert main(args) == 0
        first = capsys.readouterr().out
        report = workspace / "evald" / "report.csv"
        assert report.read_text() == first
        assert (workspace / "evald" / "report.md").read_text().startswith("| mDice")
        assert main(args) == 0
        assert capsys.readouterr().out == first
        header, row = first.strip().splitlines()
        assert header.startswith("mdice,")
        assert int(row.split(",")[-1]) == 4

    def test_metrics_are_sane(self, workspace, capsys):
        assert main(["eval", "--pred", str(workspace / "data" / "masks"),
                     "--gt", str(workspace / "data" / "masks")]) == 0
        row = capsys.readouterr().out.strip().splitlines()[1].split(",")
        mdice, miou = float(row[0]), float(row[1])
        assert mdice == 1.0 and miou == 1.0

    def test_mismatch_lists_stems(self, workspace, tmp_path, capsys):
        lonely = tmp_path / "lonely"
        lonely.mkdir()
        (lonely / "sample_000.png").write_bytes(
            (workspace / "preds" / "sample_000.png").read_bytes())
        (lonely / "stray.png").write_bytes(
            (workspace / "preds" / "sample_001.png").read_bytes())
        assert main(["eval", "--pred", str(lonely),
                     "--gt", str(workspace / "data" / "masks")]) == 1
        err = capsys.readouterr().err
        assert "stray" in err and "sample_001" in err

    def test_missing_directory(self, workspace, tmp_path, capsys):
        assert main(["eval", "--pred", str(tmp_path / "nope"),
                     "--gt", str(workspace / "data" / "masks")]) == 1
        assert "not found" in capsys.readouterr().err
