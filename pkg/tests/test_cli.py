import json
import subprocess
import sys

import pytest

from pavement_assess.cli import main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        code, _, err = run(["frobnicate"], capsys)
        assert code == 1
        assert "invalid choice" in err

    def test_missing_config(self, capsys):
        assert run(["train-pci"], capsys)[0] == 1

    def test_help_exits_zero(self, capsys):
        assert run(["--help"], capsys)[0] == 0

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "pavement_assess", "nope"], capture_output=True, text=True)
        assert proc.returncode == 1


class TestValidate:
    def test_good_file(self, workspace, capsys):
        code, out, _ = run(["validate", "--config", workspace], capsys)
        assert code == 0
        assert "4 records OK" in out

    def test_pci_out_of_range_reports_line(self, workspace, tmp_path, capsys):
        lines = (workspace.parent / "annotations.jsonl").read_text().splitlines()
        row = json.loads(lines[2])
        row["pci"] = 101
        lines[2] = json.dumps(row)
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        code, _, err = run(["validate", bad], capsys)
        assert code == 2
        assert "line 3" in err
        assert "pci out of range" in err

    def test_missing_file(self, tmp_path, capsys):
        assert run(["validate", tmp_path / "nope.jsonl"], capsys)[0] == 2

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 0, "extra": 1}))
        code, _, err = run(["train-pci", "--config", path], capsys)
        assert code == 2
        assert "extra" in err


class TestWorkflow:
    def test_full_run(self, workspace, capsys):
        code, out, _ = run(["train-pci", "--config", workspace], capsys)
        assert code == 0
        assert out.startswith("pci: epochs=5 final loss=")
        assert run(["train-captioner", "--config", workspace], capsys)[0] == 0
        code, out, _ = run(["infer", "--config", workspace, "--image-id", "img000"], capsys)
        assert code == 0
        assert out.startswith("img000: ")
        assert "The PCI of the pavement is" in out
        code, out, _ = run(["evaluate", "--config", workspace], capsys)
        assert code == 0
        assert "BLEU-4" in out
        code, out, _ = run(["report", "--config", workspace], capsys)
        assert code == 0
        assert "mse" in out
        reports = workspace.parent / "reports"
        assert (reports / "report.txt").read_text() == out
        assert (reports / "pci_loss.csv").read_text().startswith("epoch,loss\n0,")

    def test_train_captioner_is_reproducible(self, workspace, capsys):
        first = run(["train-captioner", "--config", workspace], capsys)
        second = run(["train-captioner", "--config", workspace], capsys)
        assert first[0] == second[0] == 0
        assert first[1] == second[1]
        assert "final loss=" in first[1]

    def test_seed_override_changes_training(self, workspace, capsys):
        base = run(["train-captioner", "--config", workspace], capsys)[1].splitlines()[0]
        other = run(["train-captioner", "--config", workspace, "--seed", "5"], capsys)[1].splitlines()[0]
        assert base != other

    def test_infer_without_checkpoints(self, workspace, capsys):
        code, _, err = run(["infer", "--config", workspace], capsys)
        assert code == 2
        assert "manifest" in err

    def test_report_before_evaluate(self, workspace, capsys):
        code, _, err = run(["report", "--config", workspace], capsys)
        assert code == 2
        assert "evaluate" in err


class TestSynth:
    def test_writes_valid_dataset(self, tmp_path, capsys):
        out = tmp_path / "ds"
        code, _, _ = run(["synth", "--out", out, "--n", 3, "--height", 6, "--width", 6, "--seed", 2], capsys)
        assert code == 0
        assert run(["validate", "--config", out / "config.json"], capsys)[1].strip().endswith("3 records OK")
        assert json.loads((out / "config.json").read_text())["seed"] == 2

    @pytest.mark.parametrize("n", [0, -1])
    def test_rejects_empty(self, tmp_path, capsys, n):
        assert run(["synth", "--out", tmp_path, "--n", n], capsys)[0] == 1
