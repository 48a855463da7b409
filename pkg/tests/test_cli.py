import json
import sys

import pytest

from conftest import MICRO_PAIRS
from graph2graph.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from graph2graph.evalkit import read_report
from graph2graph.tensorcore import read_checkpoint


@pytest.fixture
def workspace(tmp_path):
    corpus = tmp_path / "corpus.smi"
    corpus.write_text("".join(f"{x}\n{y}\n" for x, y in MICRO_PAIRS))
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text("".join(f"{x}\t{y}\n" for x, y in MICRO_PAIRS))
    test = tmp_path / "test.smi"
    test.write_text("".join(f"{x}\n" for x, _ in MICRO_PAIRS[:2]))
    return tmp_path


SMALL = ["--set", "hidden_dim=12", "--set", "latent_dim=2", "--set", "batch_size=5", "--set", "max_nodes=12"]


def test_full_pipeline(workspace, capsys):
    w = workspace
    assert main(["vocab", str(w / "corpus.smi"), "-o", str(w / "vocab.txt")]) == EXIT_OK
    assert main(["curate", str(w / "corpus.smi"), "--oracle", "ring_count", "--delta", "0.3", "--rule", "improve:1", "-o", str(w / "cur.tsv")]) == EXIT_OK
    assert (w / "cur.tsv").exists()
    rc = main(["train", "--pairs", str(w / "pairs.tsv"), "--vocab", str(w / "vocab.txt"), "--checkpoint-dir", str(w / "ck"), "--epochs", "2", *SMALL])
    assert rc == EXIT_OK
    assert sorted(p.name for p in (w / "ck").iterdir()) == ["config.txt", "epoch001.vjtnn", "epoch002.vjtnn", "vocab.txt"]
    assert read_checkpoint(w / "ck" / "epoch002.vjtnn")[1] == 2
    rc = main(["translate", str(w / "test.smi"), "--checkpoint", str(w / "ck" / "epoch002.vjtnn"), "--k", "3", "-o", str(w / "rep.tsv")])
    assert rc == EXIT_OK
    entries = read_report(w / "rep.tsv")
    assert len(entries) == 2 and all(len(e.candidates) == 3 for e in entries)
    rc = main(["evaluate", str(w / "rep.tsv"), "--oracle", "ring_count", "--delta", "0.3", "--predicate", "improve:1", "--train-pairs", str(w / "pairs.tsv"), "-o", str(w / "m.json")])
    assert rc == EXIT_OK
    metrics = json.loads((w / "m.json").read_text())
    assert {"success", "diversity", "novelty_paper", "validity"} <= set(metrics)
    assert "success" in capsys.readouterr().out


def test_translate_seed_is_reproducible(workspace, monkeypatch):
    w = workspace
    main(["vocab", str(w / "corpus.smi"), "-o", str(w / "vocab.txt")])
    main(["train", "--pairs", str(w / "pairs.tsv"), "--vocab", str(w / "vocab.txt"), "--checkpoint-dir", str(w / "ck"), "--epochs", "1", *SMALL])
    ck = str(w / "ck" / "epoch001.vjtnn")
    main(["translate", str(w / "test.smi"), "--checkpoint", ck, "--k", "4", "--seed", "3", "-o", str(w / "a.tsv")])
    monkeypatch.setenv("GRAPH2GRAPH_SEED", "3")
    main(["translate", str(w / "test.smi"), "--checkpoint", ck, "--k", "4", "-o", str(w / "b.tsv")])
    assert (w / "a.tsv").read_bytes() == (w / "b.tsv").read_bytes()


def test_usage_errors(workspace, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["vocab"]) == EXIT_USAGE
    assert main(["train", "--pairs", "p", "--vocab", "v", "--checkpoint-dir", "c", "--set", "nokey"]) == EXIT_USAGE
    assert main(["curate", str(workspace / "corpus.smi"), "--oracle", "ring_count", "--rule", "sideways", "-o", "x"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_data_errors(workspace):
    w = workspace
    assert main(["vocab", str(w / "missing.smi"), "-o", str(w / "v.txt")]) == EXIT_DATA
    (w / "bad.smi").write_text("C1CC\n")
    assert main(["vocab", str(w / "bad.smi"), "-o", str(w / "v.txt")]) == EXIT_DATA
    assert main(["curate", str(w / "corpus.smi"), "--oracle", "logp", "-o", str(w / "x")]) == EXIT_DATA
    ext = f"external:{sys.executable} -c 'import sys; sys.exit(1)'"
    assert main(["curate", str(w / "corpus.smi"), "--oracle", ext, "-o", str(w / "x")]) == EXIT_DATA
    # a training molecule with a cluster outside the vocabulary
    (w / "tiny.txt").write_text("CC\n")
    assert main(["train", "--pairs", str(w / "pairs.tsv"), "--vocab", str(w / "tiny.txt"), "--checkpoint-dir", str(w / "ck"), *SMALL]) == EXIT_DATA


def test_numeric_failure_exit_code(workspace):
    w = workspace
    main(["vocab", str(w / "corpus.smi"), "-o", str(w / "vocab.txt")])
    rc = main(["train", "--pairs", str(w / "pairs.tsv"), "--vocab", str(w / "vocab.txt"), "--checkpoint-dir", str(w / "ck"), "--epochs", "3", *SMALL, "--set", "lr=1e30"])
    assert rc == EXIT_NUMERIC
