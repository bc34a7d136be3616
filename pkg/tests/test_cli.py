import json
import subprocess
import sys

import pytest

from idiomadv import data as D
from idiomadv.cli import main
from idiomadv.evaluation import evaluate_split
from idiomadv.model import load_checkpoint

SMALL = """\
seed = 1
data.source = synthetic
synth.n_mwes = 8
synth.examples_per_mwe = 4
model.d_model = 8
model.n_layers = 1
model.n_heads = 2
model.d_ff = 8
model.max_len = 40
train.batch_size = 8
train.max_epochs = 2
"""


@pytest.fixture
def conf(tmp_path):
    f = tmp_path / "small.conf"
    f.write_text(SMALL)
    return f


def history(run_dir):
    return [json.loads(line) for line in (run_dir / "history.jsonl").read_text().splitlines()]


def test_synth_writes_valid_byte_identical_corpora(tmp_path):
    for out in ("a", "b"):
        assert main(["synth", "--setting", "zero_shot", "--out", str(tmp_path / out)]) == 0
    for name in ("train.csv", "dev.csv", "test.csv", "manifest"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    splits = D.load_dataset(tmp_path / "a", "zero_shot")
    train = D.get_split(splits, "train")
    assert D.validate_zero_shot_disjointness(train, [s for s in splits if s is not train]).passed
    assert not (tmp_path / "a.partial").exists()


def test_synth_unsatisfiable(tmp_path, capsys):
    assert main(["synth", "--n-mwes", "2", "--out", str(tmp_path / "x")]) == 1
    assert "n_mwes" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_synth_refuses_foreign_directory(tmp_path):
    out = tmp_path / "mine"
    out.mkdir()
    (out / "precious.txt").write_text("keep")
    assert main(["synth", "--out", str(out)]) == 1
    assert (out / "precious.txt").read_text() == "keep"


def test_train_eval_roundtrip(tmp_path, conf, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--setting", "one_shot", "--method", "smart",
                 "--out", str(run)]) == 0
    for name in ("resolved_config.txt", "run.log", "history.jsonl", "checkpoint.bin",
                 "dev_metrics.json"):
        assert (run / name).is_file(), name
    steps = [r for r in history(run) if r["type"] == "step"]
    assert steps and all(s["adv_term"] >= 0 for s in steps)
    assert "train.method = smart" in (run / "resolved_config.txt").read_text()

    corpus = tmp_path / "corpus"
    assert main(["synth", "--config", str(conf), "--setting", "one_shot", "--out", str(corpus)]) == 0
    capsys.readouterr()
    assert main(["eval", str(run / "checkpoint.bin"), str(corpus / "dev.csv")]) == 0
    first = capsys.readouterr().out
    assert main(["eval", str(run / "checkpoint.bin"), str(corpus / "dev.csv")]) == 0
    assert capsys.readouterr().out == first
    assert (run / "eval_dev.json").read_text() == first

    model, _ = load_checkpoint(run / "checkpoint.bin")
    dev = D.load_dataset(corpus / "dev.csv", "one_shot")[0]
    in_process = evaluate_split(model, dev, model.vocab)
    assert abs(json.loads(first)["macro_f1"] - in_process.macro_f1) <= 1e-5
    saved = json.loads((run / "dev_metrics.json").read_text())
    assert saved["macro_f1"] == json.loads(first)["macro_f1"]


def test_reduction_through_overrides(tmp_path, conf):
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "std")]) == 0
    assert main(["train", "--config", str(conf), "--method", "smart", "--alpha", "0", "--sigma",
                 "0", "--k-steps", "0", "--out", str(tmp_path / "red")]) == 0
    a = [r["total_loss"] for r in history(tmp_path / "std") if r["type"] == "step"]
    b = [r["total_loss"] for r in history(tmp_path / "red") if r["type"] == "step"]
    assert a == b


def test_train_is_reproducible_except_log(tmp_path, conf):
    for out in ("a", "b"):
        assert main(["train", "--config", str(conf), "--out", str(tmp_path / out)]) == 0
    for name in ("resolved_config.txt", "history.jsonl", "checkpoint.bin", "dev_metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_train_missing_data_file(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "train.csv"
    code = main(["train", "--data.train_path", str(missing), "--out", str(tmp_path / "r")])
    assert code == 1
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_train_validation_failure_leaves_no_checkpoint(tmp_path, zero_shot_splits):
    corpus = tmp_path / "leaky"
    corpus.mkdir()
    train, dev = D.get_split(zero_shot_splits, "train"), D.get_split(zero_shot_splits, "dev")
    D.write_split(D.DatasetSplit("train", "zero_shot", train.records + dev.records[:2]),
                  corpus / "train.csv")
    D.write_split(dev, corpus / "dev.csv")
    assert main(["train", "--data.dir", str(corpus), "--out", str(tmp_path / "r")]) == 1
    assert not (tmp_path / "r").exists()


def test_numeric_abort_keeps_history(tmp_path, conf, capsys):
    run = tmp_path / "r"
    assert main(["train", "--config", str(conf), "--learning-rate", "1e300", "--out", str(run)]) == 2
    assert "numeric abort" in capsys.readouterr().err
    assert (run / "history.jsonl").is_file() and not (run / "checkpoint.bin").exists()


def test_eval_errors(tmp_path, conf, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--max-epochs", "1", "--out", str(run)]) == 0
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(D.COLUMNS) + "\n")
    assert main(["eval", str(run / "checkpoint.bin"), str(empty)]) == 1
    assert "no records" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "missing.bin"), str(empty)]) == 1
    blob = bytearray((run / "checkpoint.bin").read_bytes())
    blob[-50] ^= 0xFF
    (run / "checkpoint.bin").write_bytes(bytes(blob))
    assert main(["eval", str(run / "checkpoint.bin"), str(empty)]) == 1
    assert "checksum" in capsys.readouterr().err


def test_gradcheck_and_fault_injection(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "max_rel_err=" in out
    assert main(["gradcheck", "--inject-fault", "gelu"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  gelu" in out


def test_compare_single_seed(tmp_path, conf, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(conf), "--seeds", "0", "--max-epochs", "1",
                 "--out", str(out)]) == 0
    text = (out / "comparison.txt").read_text()
    assert "+/- 0.0000" in text and "smart vs standard" in text
    rows = (out / "comparison.csv").read_text().splitlines()
    assert len(rows) == 3 and all(r.split(",")[3] == "0.000000" for r in rows[1:])


def test_compare_unknown_method_fails_before_training(tmp_path, conf, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(conf), "--methods", "standard,bogus",
                 "--out", str(out)]) == 1
    assert "bogus" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_override(tmp_path, capsys):
    assert main(["train", "--no-such-knob", "1", "--out", str(tmp_path / "r")]) == 1
    assert "no_such_knob" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "idiomadv", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "train", "eval", "gradcheck", "compare"):
        assert cmd in proc.stdout
