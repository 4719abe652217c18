import json
import subprocess
import sys

import pytest

from trace_head import cli
from trace_head.checkpoint import save_checkpoint
from trace_head.diagnostics import TOY_CONFIG
from trace_head.model import TraceModel

TOY_CFG = """\
# toy sizes so the command runs in seconds
batch_size = 8
accum_target = 16
learning_rate = 0.01
max_epochs = 2
encoder.n = 1
encoder.vocab_size = 64
encoder.max_len = 16
encoder.width = 8
encoder.num_layers = 2
encoder.num_heads = 2
encoder.ffn_mult = 2
scorer.h1 = 6
scorer.h2 = 4
fusion.D = 5
"""


@pytest.fixture
def toy(tmp_path):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CFG)
    assert cli.run(["synth", "--out", str(tmp_path / "train.jsonl"), "--count", "24", "--d-img", "4", "--seed", "1"]) == 0
    assert cli.run(["synth", "--out", str(tmp_path / "val.jsonl"), "--count", "12", "--d-img", "4", "--seed", "2"]) == 0
    return tmp_path


def test_no_arguments_prints_help(capsys):
    assert cli.run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command(capsys):
    assert cli.run(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_mcnemar_output(capsys):
    assert cli.run(["mcnemar", "--n10", "197", "--n01", "104"]) == 0
    assert capsys.readouterr().out.splitlines() == ["statistic 28.12", "p_value <0.0001"]
    assert cli.run(["mcnemar", "--n10", "93", "--n01", "90"]) == 0
    assert capsys.readouterr().out.splitlines() == ["statistic 0.02", "p_value 0.8825"]


def test_mcnemar_invalid_counts(capsys):
    assert cli.run(["mcnemar", "--n10", "0", "--n01", "0"]) == 1
    assert "undefined" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert cli.run(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max relative error") and "PASS" in out


def test_train_eval_explain(toy, capsys):
    ckpt = toy / "m.ckpt"
    code = cli.run(["train", "--dataset", str(toy / "train.jsonl"), "--val-dataset", str(toy / "val.jsonl"),
                    "--config", str(toy / "toy.cfg"), "--out", str(ckpt)])
    assert code == 0
    history = capsys.readouterr().out.splitlines()
    assert history[0].startswith("epoch,") and len(history) == 3
    assert ckpt.exists()

    assert cli.run(["eval", "--checkpoint", str(ckpt), "--dataset", str(toy / "val.jsonl")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["tp"] + m["fp"] + m["fn"] + m["tn"] == 12

    assert cli.run(["explain", "--checkpoint", str(ckpt), "--dataset", str(toy / "val.jsonl")]) == 0
    records = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line]
    assert len(records) == 12 and {"captions", "selected_index", "probability"} <= set(records[0])

    out = toy / "report.txt"
    assert cli.run(["explain", "--checkpoint", str(ckpt), "--dataset", str(toy / "val.jsonl"), "--text", "--out", str(out)]) == 0
    assert out.read_text().count("Selected Caption Index:") == 12


def test_flags_override_config(toy):
    args = cli.make_parser().parse_args(["train", "--dataset", "x", "--val-dataset", "y", "--out", "z",
                                         "--config", str(toy / "toy.cfg"), "--learning-rate", "0.5", "--no-rel-loss"])
    cfg, model_cfg = cli.build_configs(args, 4)
    assert cfg.learning_rate == 0.5 and cfg.batch_size == 8 and cfg.use_rel_loss is False
    assert model_cfg.encoder.width == 8 and model_cfg.d_img == 4


def test_unknown_config_key(toy, capsys):
    bad = toy / "bad.cfg"
    bad.write_text("learning_rat = 1\n")
    code = cli.run(["train", "--dataset", str(toy / "train.jsonl"), "--val-dataset", str(toy / "val.jsonl"),
                    "--config", str(bad), "--out", str(toy / "m.ckpt")])
    assert code == 1
    assert "unknown key 'learning_rat'" in capsys.readouterr().err


def test_invalid_config_value(toy, capsys):
    bad = toy / "bad.cfg"
    bad.write_text(TOY_CFG + "accum_target = 12\n")
    code = cli.run(["train", "--dataset", str(toy / "train.jsonl"), "--val-dataset", str(toy / "val.jsonl"),
                    "--config", str(bad), "--out", str(toy / "m.ckpt")])
    assert code == 1
    assert "invalid configuration" in capsys.readouterr().err


def test_bad_dataset_exit_code(tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(TraceModel.init(TOY_CONFIG), ckpt)
    path = tmp_path / "bad.jsonl"
    path.write_text('{"version": 1, "d_img": 4}\n{"id": "a", "label": 3, "image_embedding": [0, 0, 0, 0], "captions": ["x"]}\n')
    assert cli.run(["eval", "--checkpoint", str(ckpt), "--dataset", str(path)]) == 1
    assert "line 2: label must be 0 or 1" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_code(tmp_path, capsys):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    assert cli.run(["eval", "--checkpoint", str(path), "--dataset", str(path)]) == 1
    assert "bad magic" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    assert cli.run(["eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(tmp_path / "none")]) == 1


def test_sweep_command(toy, capsys):
    out = toy / "sweep.csv"
    code = cli.run(["sweep", "--dataset", str(toy / "train.jsonl"), "--val-dataset", str(toy / "val.jsonl"),
                    "--config", str(toy / "toy.cfg"), "--n-list", "0,2", "--max-epochs", "1", "--out", str(out)])
    assert code == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("n,macro_f1") and [r.split(",")[0] for r in rows[1:]] == ["0", "2"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "trace_head", "mcnemar", "--n10", "172", "--n01", "82"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "statistic 31.19"


def test_eval_reproduces_best_epoch_validation(toy, capsys):
    from trace_head.checkpoint import load_checkpoint_with_extra
    ckpt = toy / "m.ckpt"
    assert cli.run(["train", "--dataset", str(toy / "train.jsonl"), "--val-dataset", str(toy / "val.jsonl"),
                    "--config", str(toy / "toy.cfg"), "--max-epochs", "4", "--out", str(ckpt)]) == 0
    rows = [r.split(",") for r in capsys.readouterr().out.splitlines()]
    header, body = rows[0], rows[1:]
    _, extra = load_checkpoint_with_extra(ckpt)
    best = dict(zip(header, body[extra["best_epoch"] - 1]))
    assert cli.run(["eval", "--checkpoint", str(ckpt), "--dataset", str(toy / "val.jsonl")]) == 0
    m = json.loads(capsys.readouterr().out)
    for key in ("accuracy", "precision", "recall", "f1"):
        assert f"{m[key]:.6f}" == best[f"val_{key}"]
