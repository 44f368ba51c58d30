import json

import pytest
import yaml

from _oracles import BASELINE_ERRORS, synthesize_log
from tcil.analysis import PredictionRecord, write_class_task_map, write_prediction_log
from tcil.cli import main

TINY = {
    "num_classes": 4, "image_size": 8, "channels": 1, "train_per_class": 10, "test_per_class": 4,
    "num_steps": 2, "memory_budget": 8, "widths": [8, 16], "reduction": 4, "batch_size": 16,
    "epochs_per_step": 2, "warmup_epochs": 1, "lr_milestones": [1], "augmentation": [],
}


def write_config(path, **overrides):
    path.write_text(yaml.safe_dump({**TINY, **overrides}))
    return path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root


class TestTrain:
    def test_outputs(self, trained):
        out = trained / "out"
        for name in ("config.json", "run_log.jsonl", "class_task_map.csv", "predictions.csv", "results.json"):
            assert (out / name).exists(), name
        assert (out / "steps" / "step_02" / "checkpoint" / "manifest.json").exists()
        records = [json.loads(line) for line in (out / "run_log.jsonl").read_text().splitlines()]
        assert records and all("step" in r for r in records)

    def test_existing_run_needs_resume(self, trained, capsys):
        assert main(["train", "--config", str(trained / "cfg.yaml"), "--out", str(trained / "out")]) == 2
        assert error_line(capsys).startswith("error[STATE_ERROR]")

    def test_resume_finished(self, trained):
        assert main(["train", "--config", str(trained / "cfg.yaml"), "--out", str(trained / "out"), "--resume"]) == 0

    def test_resume_with_changed_config(self, trained, tmp_path, capsys):
        cfg = write_config(tmp_path / "other.yaml", memory_budget=6)
        assert main(["train", "--config", str(cfg), "--out", str(trained / "out"), "--resume"]) == 2
        line = error_line(capsys)
        assert line.startswith("error[RESUME_ERROR]") and "memory_budget: 8 -> 6" in line

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", lamda=0.5)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        line = error_line(capsys)
        assert line.startswith("error[CONFIG_ERROR]") and "lamda" in line

    def test_bad_protocol_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", protocol="B7")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "protocol" in error_line(capsys)


    def test_missing_dataset_files(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("TCIL_DATA_ROOT", raising=False)
        cfg = write_config(tmp_path / "c.yaml", dataset="cifar100", dataset_root=str(tmp_path / "none"))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert error_line(capsys).startswith("error[INPUT_ERROR]")


class TestAnalyze:
    def test_baseline_log(self, tmp_path):
        rows, mapping = synthesize_log()
        write_prediction_log([PredictionRecord(*r) for r in rows], tmp_path / "p.csv")
        write_class_task_map(mapping, tmp_path / "m.csv")
        out = tmp_path / "report"
        assert main(["analyze", "--log", str(tmp_path / "p.csv"), "--map", str(tmp_path / "m.csv"), "--out", str(out)]) == 0
        table = (out / "results.csv").read_text()
        assert "2943" in table and "1538" in table and "75" in table
        assert (out / "accuracy.png").exists() or any(p.suffix == ".png" for p in out.iterdir())

    def test_missing_file(self, tmp_path, capsys):
        assert main(["analyze", "--log", str(tmp_path / "nope.csv"), "--map", str(tmp_path / "m.csv"), "--out", str(tmp_path)]) == 2
        assert error_line(capsys).startswith("error[")


class TestPrune:
    def _prune(self, trained, tmp_path, payload):
        cfg = tmp_path / "prune.yaml"
        cfg.write_text(yaml.safe_dump(payload))
        ckpt = trained / "out" / "steps" / "step_02" / "checkpoint"
        code = main(["prune", "--ckpt", str(ckpt), "--config", str(cfg), "--out", str(tmp_path / "p")])
        return code, tmp_path / "p" / "prune_report.json"

    def test_ratio_zero_keeps_count(self, trained, tmp_path):
        code, report = self._prune(trained, tmp_path, {"mode": "ratio", "ratio": 0.0})
        data = json.loads(report.read_text())
        assert code == 0 and data["params_after"] == data["params_before"]

    def test_target_shrink(self, trained, tmp_path):
        code, report = self._prune(trained, tmp_path, {"target_shrink": 4.0})
        assert code == 0 and 3.5 <= json.loads(report.read_text())["shrink"] <= 4.5
        assert main(["prune", "--ckpt", str(tmp_path / "p" / "checkpoint"), "--config", str(tmp_path / "prune.yaml"),
                     "--out", str(tmp_path / "again")]) == 0

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        import shutil

        ckpt = tmp_path / "ck"
        shutil.copytree(trained / "out" / "steps" / "step_02" / "checkpoint", ckpt)
        with open(ckpt / "arrays.npz", "ab") as fh:
            fh.write(b"junk")
        cfg = tmp_path / "prune.yaml"
        cfg.write_text("ratio: 0.1\n")
        assert main(["prune", "--ckpt", str(ckpt), "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2
        assert error_line(capsys).startswith("error[INTEGRITY_ERROR]")
