import hashlib
import json

import pytest

from skelcon.checkpoint import read_checkpoint
from skelcon.cli import main

RUN = {
    "profile": "tiny",
    "dataset": {"synthetic": {"classes": 3, "per_class": 5}, "test_subjects": [4]},
    "contrast": {"queue_size": 8, "bn_groups": 2},
    "pretrain": {"batch_size": 4, "epochs": 1, "milestones": []},
    "probe": {"epochs": 3, "batch_size": 8, "milestones": []},
    "finetune": {"epochs": 1, "batch_size": 4, "milestones": []},
    "semi_fraction": 0.5,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(RUN))
    return path


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RUN))
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return cfg, root / "run"


def test_missing_field_names_it(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"profile": "tiny"}))
    assert main(["pretrain", "--config", str(path)]) == 2
    assert "dataset" in capsys.readouterr().err


def test_invalid_json_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    assert main(["pretrain", "--config", str(path)]) == 2


def test_unknown_command_and_task(config_file, tmp_path, capsys):
    assert main(["train"]) == 2
    assert main(["eval", "--config", str(config_file), "--task", "dance",
                 "--checkpoint", str(tmp_path / "x.ckpt")]) == 2
    assert "task" in capsys.readouterr().err


def test_missing_checkpoint_is_config_error(config_file, tmp_path, capsys):
    assert main(["eval", "--config", str(config_file), "--task", "probe",
                 "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_pretrain_writes_run(pretrained):
    cfg, run = pretrained
    names = {p.name for p in run.iterdir()}
    assert {"config.json", "config.sha256", "metrics.csv", "checkpoint_final.ckpt"} <= names
    header_hash, _ = read_checkpoint(run / "checkpoint_final.ckpt")
    assert header_hash.hex() == (run / "config.sha256").read_text().strip()


@pytest.mark.parametrize("task", ["probe", "retrieval", "semi"])
def test_eval_tasks(pretrained, task, tmp_path):
    cfg, run = pretrained
    out = tmp_path / task
    args = ["eval", "--config", str(cfg), "--task", task, "--checkpoint", str(run / "checkpoint_final.ckpt"),
            "--out", str(out)]
    assert main(args) == 0
    result = json.loads((out / f"results_{task}.json").read_text())
    assert set(result) == {"task", "dataset", "protocol", "top1", "top5", "config_hash"}
    assert 0.0 <= result["top1"] <= result["top5"] <= 1.0
    assert result["config_hash"] == (run / "config.sha256").read_text().strip()


def test_probe_twice_is_identical(pretrained, tmp_path):
    cfg, run = pretrained
    blobs = []
    for name in ("a", "b"):
        assert main(["eval", "--config", str(cfg), "--task", "probe", "--checkpoint",
                     str(run / "checkpoint_final.ckpt"), "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "results_probe.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_transfer_needs_dataset(pretrained, tmp_path, capsys):
    cfg, run = pretrained
    assert main(["eval", "--config", str(cfg), "--task", "transfer", "--checkpoint",
                 str(run / "checkpoint_final.ckpt"), "--out", str(tmp_path)]) == 2
    assert "transfer_dataset" in capsys.readouterr().err


def test_env_overrides_output(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("SCD_RUN_DIR", str(tmp_path / "env"))
    assert main(["gen-synth", "--classes", "2", "--per-class", "2", "--out", str(tmp_path / "ignored")]) == 0
    assert (tmp_path / "env" / "manifest.tsv").exists()
    assert not (tmp_path / "ignored").exists()


def directory_digest(path):
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_gen_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-synth", "--classes", "3", "--per-class", "2", "--seed", "5",
                     "--out", str(tmp_path / name)]) == 0
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    assert len(list((tmp_path / "a").glob("*.skel"))) == 6


def test_gen_synth_reads_run_config(config_file, tmp_path):
    assert main(["gen-synth", "--config", str(config_file), "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("*.skel"))) == 15


def test_gen_synth_rejects_one_class(tmp_path, capsys):
    assert main(["gen-synth", "--classes", "1", "--out", str(tmp_path / "d")]) == 2
    assert "classes" in capsys.readouterr().err
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"colour": "red"}))
    assert main(["gen-synth", "--config", str(params), "--out", str(tmp_path / "e")]) == 2
