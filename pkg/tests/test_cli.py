import json
import shutil

import numpy as np
import pytest

from spe.cli import bundled_corpus, main
from spe.corpus import Vocabulary
from spe.lm import load_model
from spe.toydata import write_corpus

TINY = """
seed = 7
[paths]
corpus = "{corpus}"
work = "{work}"
[model]
emb_dim = 6
hidden = 8
dropout = 0.1
[pretrain]
epochs = 1
batch_size = 16
lr = 0.01
[bilm]
emb_dim = 4
hidden = 6
epochs = 1
batch_size = 16
lr = 0.01
[train]
batch_size = 8
epochs = 2
checkpoint_interval = 1
lr = 0.01
[questions]
count = 12
modes = ["batch-neg", "resampled"]
"""


def write_config(tmp_path, work, corpus):
    cfg = tmp_path / f"{work.name}.toml"
    cfg.write_text(TINY.format(corpus=corpus.as_posix(), work=work.as_posix()))
    return cfg


def run_pipeline(cfg):
    steps = [
        ["prep"], ["pretrain"], ["train-bilm"],
        ["train-nce"], ["train-nce", "--weights", "1,0,0"], ["train-nce", "--sampler", "resampling"],
        ["gen-questions"], ["evaluate"],
    ]
    for step in steps:
        code = main([*step, "--config", str(cfg)])
        assert code == 0, step


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "toy.txt"
    write_corpus(corpus, n_tunes=60, seed=3)
    work = root / "work"
    cfg = write_config(root, work, corpus)
    run_pipeline(cfg)
    return root, work, cfg


def test_pipeline_writes_every_stage(pipeline):
    _, work, _ = pipeline
    for rel in ["prep/vocab.txt", "prep/splits.json", "prep/train_pairs.jsonl", "prep/config.json",
                "pretrain/model/manifest.json", "bilm/model/tensors.bin",
                "nce/batch-nce_w0.1-10-0.1/epoch_002/manifest.json", "nce/batch-nce_w1-0-0/train_log.jsonl",
                "nce/resampling_w0.1-10-0.1/resampling_audit.jsonl",
                "questions/valid-batch-neg.jsonl", "questions/holdout-resampled.jsonl.meta.json",
                "reports/report.json", "reports/report.txt", "reports/training_curves.png",
                "reports/accuracy.png", "reports/config.json"]:
        assert (work / rel).exists(), rel
    report = json.loads((work / "reports" / "report.json").read_text())
    assert {r["label"] for r in report["rows"]} == {"batch-nce_w0.1-10-0.1", "batch-nce_w1-0-0",
                                                  "resampling_w0.1-10-0.1"}
    assert len(report["selections"]) == 3 * 2 * 2
    assert all(s["selected_epoch"] in (1, 2) for s in report["selections"])
    table = (work / "reports" / "report.txt").read_text()
    assert table.splitlines()[2].startswith("random")


def test_checkpoints_carry_provenance(pipeline):
    _, work, _ = pipeline
    vocab = Vocabulary.load(work / "prep" / "vocab.txt")
    _, man = load_model(work / "nce" / "batch-nce_w0.1-10-0.1" / "epoch_001")
    assert man["vocab_hash"] == vocab.hash and man["seed"] == 7 and man["init"] == "pretrained"
    assert man["weights"] == [0.1, 10, 0.1]


def test_score_prints_one_row_per_candidate(pipeline, capsys):
    _, work, cfg = pipeline
    ck = work / "nce" / "batch-nce_w0.1-10-0.1" / "epoch_002"
    capsys.readouterr()
    code = main(["score", "--config", str(cfg), "--checkpoint", str(ck), "C D E |", "c d e |", "F G |"])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0].split("\t") == ["item", "choice", "log_cond", "log_uncond", "score", "selected"]
    rows = [line.split("\t") for line in out[1:]]
    assert len(rows) == 2 and sum(int(r[5]) for r in rows) == 1
    for r in rows:
        assert float(r[4]) == pytest.approx(float(r[2]) - float(r[3]), abs=2e-6)


def test_score_reads_tsv_from_stdin(pipeline, capsys, monkeypatch):
    import io

    _, work, cfg = pipeline
    ck = work / "nce" / "batch-nce_w1-0-0" / "epoch_001"
    monkeypatch.setattr("sys.stdin", io.StringIO("C D |\tE F |\tG |\n\nc |\td |\n"))
    capsys.readouterr()
    assert main(["score", "--config", str(cfg), "--checkpoint", str(ck), "--criterion", "1"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["0", "0", "1"]
    assert all(r.split("\t")[2] == r.split("\t")[4] for r in rows)


def test_usage_errors_exit_1(pipeline, tmp_path, capsys):
    _, _, cfg = pipeline
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["prep", "--criterion", "5"]) == 1
    assert main(["train-nce", "--config", str(cfg), "--weights", "1,x,0"]) == 1
    assert main(["score", "--config", str(cfg)]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["prep", "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "empty")]) == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[paths]\ncorpus = "{(tmp_path / "nope.txt").as_posix()}"\nwork = "{tmp_path.as_posix()}"\n')
    assert main(["prep", "--config", str(cfg)]) == 2


def test_vocabulary_mismatch_exits_2_without_writing_reports(pipeline, tmp_path):
    root, work, _ = pipeline
    other = tmp_path / "work"
    shutil.copytree(work, other)
    shutil.rmtree(other / "reports")
    # rebuild the vocabulary from a different corpus so the hashes disagree
    corpus = tmp_path / "other.txt"
    write_corpus(corpus, n_tunes=60, seed=99)
    cfg = write_config(tmp_path, other, corpus)
    assert main(["prep", "--config", str(cfg)]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 2
    assert not (other / "reports").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_3(pipeline, tmp_path):
    _, work, cfg = pipeline
    model, man = load_model(work / "pretrain" / "model")
    for p in model.params.values():
        p.data[...] = np.nan
    bad = tmp_path / "nan_model"
    model.save(bad, vocab_hash=man["vocab_hash"])
    shutil.copytree(work / "prep", tmp_path / "w" / "prep")
    assert main(["train-nce", "--config", str(cfg), "--checkpoint", str(bad), "--out", str(tmp_path / "w")]) == 3


def test_prep_uses_bundled_corpus_by_default(tmp_path):
    assert bundled_corpus().exists()
    assert main(["prep", "--out", str(tmp_path)]) == 0
    splits = json.loads((tmp_path / "prep" / "splits.json").read_text())
    assert sum(c["pairs"] for c in splits["counts"].values()) >= 5000
    vocab = Vocabulary.load(tmp_path / "prep" / "vocab.txt")
    assert len(vocab) <= 200 and vocab.kind == "abc"
