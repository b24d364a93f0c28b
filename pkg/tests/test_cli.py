from pathlib import Path

import pytest

from mga import config
from mga.cli import main

TINY = ["--height", "16", "--width", "16", "--frames", "3", "--train-clips", "2", "--eval-clips", "1",
        "--still-count", "4", "--min-size", "0.15", "--max-size", "0.25"]
FAST = ["--pretrain-epochs", "1", "--joint-epochs", "1"]


def files(root: Path, skip=("config.txt",)):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), *TINY]) == 0
    return root


def test_synth_is_bit_identical(dataset, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "again"), *TINY]) == 0
    assert files(dataset) == files(tmp_path / "again")
    assert sorted(p.name for p in dataset.iterdir()) == ["config.txt", "eval", "still", "train"]


def test_train_eval_repeatable_and_snapshot_reproduces(dataset, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--data", str(dataset), "--out", str(out), *TINY, *FAST]) == 0
        assert main(["eval", "--data", str(dataset), "--checkpoint", str(out / "model.mgac"),
                     "--out", str(out / "eval"), *TINY]) == 0
        outs.append(files(out))
    assert outs[0] == outs[1]
    assert "checkpoints/epoch_001.mgac" in outs[0] and "eval/metrics.csv" in outs[0]
    # The snapshot alone, pointed at a fresh directory, repeats the run.
    snap = tmp_path / "a" / "config.txt"
    assert main(["train", "--config", str(snap), "--out", str(tmp_path / "c")]) == 0
    assert files(tmp_path / "c")["model.mgac"] == outs[0]["model.mgac"]


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("# comment\njoint_epochs = 4\nlr = 0.5\n")
    cfg = config.load(path, {"lr": "0.25"})
    assert cfg.joint_epochs == 4 and cfg.lr == 0.25 and cfg.scheme().lr == 0.25


def test_snapshot_round_trip(tmp_path):
    cfg = config.load(None, {"encoder_attention": "add", "seeds": "3,4", "fg_speed": "2,2", "out": "x"})
    cfg.write_snapshot(tmp_path)
    back = config.load(tmp_path / "config.txt")
    assert back.as_dict() == cfg.as_dict()


def test_self_evaluation_tool_mode(dataset, capsys):
    gt = str(dataset / "eval")
    assert main(["eval", "--pred", gt, "--gt", gt]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert float(out["mae"]) == 0.0 and float(out["max_f"]) == 1.0


def test_export_then_tool_eval_matches_network_eval(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "m"), *TINY, *FAST]) == 0
    ck = str(tmp_path / "m" / "model.mgac")
    assert main(["export-pred", "--data", str(dataset), "--checkpoint", ck, "--out", str(tmp_path / "p"), *TINY]) == 0
    names = sorted(p.name for p in (tmp_path / "p").rglob("pred_*.pgm"))
    assert names and all(n.startswith("pred_0000") for n in names)
    capsys.readouterr()
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(dataset / "eval")]) == 0
    tool = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert main(["eval", "--data", str(dataset), "--checkpoint", ck, *TINY]) == 0
    net = dict(line.split() for line in capsys.readouterr().out.splitlines())
    # Exported maps are quantized to 8 bits.
    assert abs(float(tool["mae"]) - float(net["mae"])) <= 1 / 255


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "2", "--out", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert (tmp_path / "gradcheck.csv").exists()


def test_exit_codes(dataset, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--no-such-flag", "1"])
    assert e.value.code == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("mystery_key = 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--out", str(tmp_path / "o"), "--height", "30"]) == 1
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--variant", "T9"]) == 1
    assert main(["eval", "--pred", str(tmp_path / "missing"), "--gt", str(dataset / "eval")]) == 2
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "none.mgac")]) == 2
    junk = tmp_path / "junk.mgac"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(junk), *TINY]) == 2
    assert main(["eval", "--config", str(tmp_path / "nope.txt")]) == 2
