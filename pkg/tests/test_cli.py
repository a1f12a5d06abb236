import json

import pytest

from selfvos.cli import main
from selfvos.config import RunConfig, save_config
from selfvos.trainer import load_checkpoint


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), "--clips", "6"]) == 0
    return root


def test_pipeline_end_to_end(synth_root, tmp_path, capsys):
    ckpt = tmp_path / "model.dtrk"
    assert main(["train", "--data", str(synth_root), "--out", str(ckpt), "--steps", "4"]) == 0
    assert load_checkpoint(ckpt).step == 4
    pred = tmp_path / "pred"
    assert main(["propagate", "--ckpt", str(ckpt), "--data", str(synth_root), "--split", "val", "--out", str(pred)]) == 0
    written = sorted(p.relative_to(pred).as_posix() for p in pred.rglob("*.png"))
    val = json.loads((synth_root / "splits.json").read_text())["val"]
    expected = sorted(p.relative_to(synth_root).as_posix() for p in (synth_root / "Masks").rglob("*.png")
                      if p.parent.name in val)
    assert written == expected
    report = tmp_path / "report.json"
    assert main(["eval", "--pred", str(pred), "--gt", str(synth_root), "--split", "val", "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert sorted(data["sequences"]) == val
    assert 0.0 <= data["JF_m"] <= 1.0
    assert report.with_suffix(".txt").read_text().startswith("Sequence")


def test_eval_pred_equals_gt(synth_root, capsys):
    assert main(["eval", "--pred", str(synth_root), "--gt", str(synth_root)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].split() == ["mean", "100.0", "100.0", "100.0", "100.0", "100.0"]


def test_config_file_and_flag_override(synth_root, tmp_path):
    cfg = RunConfig.desk()
    cfg.train.max_steps = 2
    cfg.train.lr = 5e-4
    save_config(tmp_path / "run.ini", cfg)
    ckpt = tmp_path / "m.dtrk"
    assert main(["train", "--config", str(tmp_path / "run.ini"), "--data", str(synth_root), "--out", str(ckpt)]) == 0
    ck = load_checkpoint(ckpt)
    assert ck.step == 2 and ck.config["train"]["lr"] == 5e-4
    assert main(["train", "--config", str(tmp_path / "run.ini"), "--data", str(synth_root), "--out", str(ckpt),
                 "--steps", "1"]) == 0
    assert load_checkpoint(ckpt).step == 1


def test_resume_continues(synth_root, tmp_path):
    ckpt = tmp_path / "m.dtrk"
    assert main(["train", "--data", str(synth_root), "--out", str(ckpt), "--steps", "2"]) == 0
    assert main(["train", "--data", str(synth_root), "--out", str(ckpt), "--resume", str(ckpt), "--steps", "3"]) == 0
    assert load_checkpoint(ckpt).step == 3


def test_random_init_baseline(synth_root, tmp_path):
    assert main(["propagate", "--random-init", "--data", str(synth_root), "--split", "val",
                 "--out", str(tmp_path / "p")]) == 0


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    assert "cases within" in capsys.readouterr().out


def test_usage_errors_exit_two(capsys):
    assert main(["bogus"]) == 2
    assert main(["eval", "--pred", "x", "--gt", "y", "--nope"]) == 2
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_contract_errors_exit_one(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "c")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["propagate", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "bad.dtrk").write_bytes(b"garbage")
    assert main(["propagate", "--ckpt", str(tmp_path / "bad.dtrk"), "--data", str(tmp_path), "--out", "o"]) == 1
