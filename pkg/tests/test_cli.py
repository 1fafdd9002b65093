import csv
import json

import pytest

from mspn.cli import main
from mspn.synth import SynthSpec, write_corpus

TINY_NET = ["--channels", "2,2,3,3", "--fc", "6,6", "--batch-size", "8", "--max-epochs", "1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, SynthSpec(n_classes=3, train_per_class=10, test_per_class=4, seed=2))
    return root


def test_unknown_flag_is_usage_error(capsys):
    assert main(["--bogus"]) == 1
    assert main(["train", "--out", "x"]) == 1
    assert main(["train", "--data", "d", "--out", "x", "--channels", "1,2"]) == 1


def test_missing_data_is_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_corrupt_checkpoint_is_data_error(tmp_path, corpus, capsys):
    bad = tmp_path / "bad.mspn"
    bad.write_bytes(b"MSPN\x01\x00")
    assert main(["eval", "--model", str(bad), "--data", str(corpus),
                 "--report", str(tmp_path / "r")]) == 2
    assert "offset" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "mspn-graph" in out and "all" in out


def test_synth_command(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "c"), "--train-per-class", "2",
                 "--test-per-class", "1"]) == 0
    assert (tmp_path / "c" / "synth_spec.json").exists()
    assert len(list((tmp_path / "c" / "test").glob("*/*.png"))) == 10


def test_train_then_eval(tmp_path, corpus, capsys):
    model = tmp_path / "m.mspn"
    assert main(["train", "--data", str(corpus), "--out", str(model), *TINY_NET]) == 0
    history = (tmp_path / "m.mspn.history.jsonl").read_text().splitlines()
    assert len(history) == 1 and set(json.loads(history[0])) == {
        "epoch", "train_loss", "val_error", "lr"}
    report = tmp_path / "report"
    assert main(["eval", "--model", str(model), "--data", str(corpus),
                 "--report", str(report)]) == 0
    assert {p.name for p in report.iterdir()} == {"metrics.json", "confusion.csv",
                                                  "per_class.csv"}
    first = (report / "confusion.csv").read_bytes()
    assert main(["eval", "--model", str(model), "--data", str(corpus),
                 "--report", str(report)]) == 0
    assert (report / "confusion.csv").read_bytes() == first


def test_training_is_reproducible(tmp_path, corpus):
    for name in ("a", "b"):
        assert main(["train", "--data", str(corpus), "--out", str(tmp_path / name),
                     "--variant", "Variant-4", *TINY_NET]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_eval_rejects_class_mismatch(tmp_path, corpus):
    model = tmp_path / "m.mspn"
    assert main(["train", "--data", str(corpus), "--out", str(model), *TINY_NET]) == 0
    other = tmp_path / "other"
    write_corpus(other, SynthSpec(n_classes=4, train_per_class=1, test_per_class=1))
    assert main(["eval", "--model", str(model), "--data", str(other),
                 "--report", str(tmp_path / "r")]) == 2


def test_baseline_train_and_eval(tmp_path, corpus):
    model = tmp_path / "b.mspn"
    assert main(["baseline-train", "--data", str(corpus), "--out", str(model), *TINY_NET]) == 0
    assert main(["baseline-eval", "--model", str(model), "--data", str(corpus),
                 "--report", str(tmp_path / "r")]) == 0
    mspn_model = tmp_path / "m.mspn"
    assert main(["train", "--data", str(corpus), "--out", str(mspn_model), *TINY_NET]) == 0
    assert main(["baseline-eval", "--model", str(mspn_model), "--data", str(corpus),
                 "--report", str(tmp_path / "r2")]) == 2


def test_ablate_writes_table(tmp_path, corpus, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(corpus), "--out", str(out), *TINY_NET]) == 0
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "configuration", "average_error_pct", "accuracy_pct"]
    assert [r[0] for r in rows[1:]] == ["Variant-1", "Variant-2", "Variant-3", "Variant-4",
                                        "Variant-5", "MSPN"]
    assert rows[-1][1] == "ssp-1 + ssp-2 + ssp-3"
    assert "Variant-3" in capsys.readouterr().out
