import json

from fisherlora.cli import main
from fisherlora.harness import csvio

FAST = ["--set", "model.pretrain_steps=50", "--set", "train.steps=10"]


def test_cli_pipeline(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["stats", "--out", out, *FAST]) == 0
    assert main(["init", "--out", out, *FAST]) == 0
    assert main(["train", "--out", out, *FAST]) == 0
    printed = capsys.readouterr().out
    assert "metrics.csv" in printed
    header, rows = csvio.read(tmp_path / "train" / "metrics.csv")
    assert rows[-1][0] == 10


def test_cli_config_file_and_seed(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 3\ninit.rank = 1\nmodel.pretrain_steps = 20\n")
    assert main(["stats", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path)]) == 0
    assert main(["init", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest_init.json").read_text())
    assert m["seed"] == 5 and m["config_echo"]["init"]["rank"] == 1


def test_cli_bad_config(tmp_path, capsys):
    assert main(["stats", "--out", str(tmp_path), "--set", "init.rank=0"]) == 2
    assert "invalid config" in capsys.readouterr().err
    assert main(["stats", "--out", str(tmp_path), "--set", "norank"]) == 2


def test_cli_command_error(tmp_path, capsys):
    assert main(["init", "--out", str(tmp_path)]) == 1
    assert "stats" in capsys.readouterr().err


def test_cli_overlap_task_flag(tmp_path):
    for name in ("a", "b"):
        d = str(tmp_path / name)
        assert main(["stats", "--out", d, *FAST]) == 0
        assert main(["init", "--out", d, *FAST]) == 0
    assert main(["overlap", "--out", str(tmp_path), "--task", f"a={tmp_path / 'a' / 'init'}",
                 "--task", f"b={tmp_path / 'b' / 'init'}"]) == 0
    rows = csvio.read_dicts(tmp_path / "overlap.csv")
    assert rows[0]["b"] == 100.0  # same seed and task: identical selections
