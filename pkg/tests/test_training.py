import json

import numpy as np
import pytest

from spe.cloze import ClozeQuestion, TableScorer, grade, write_score_dump, DumpScorer, question_key
from spe.corpus import DataError, SentencePair
from spe.lm import LanguageModel, LmConfig
from spe.losses import LossWeights
from spe.noise import BatchNceSampler
from spe.training import (
    Checkpoint,
    NumericError,
    TrainConfig,
    best_index,
    list_checkpoints,
    mean_word_loss,
    pretrain,
    select_checkpoint,
    stream,
    train_nce,
)

V = 12


def tiny_model(seed=0, dropout=0.0):
    return LanguageModel(LmConfig(V, emb_dim=4, hidden=6, dropout=dropout), seed=seed)


def toy_pairs(n=48, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = int(rng.integers(5, V))
        a = tuple(int(x) for x in rng.integers(5, V, size=int(rng.integers(1, 5))))
        b = tuple(5 + (start - 5 + i) % (V - 5) for i in range(int(rng.integers(1, 5))))
        out.append(SentencePair(a, b))
    return out


def params_of(model):
    return {k: p.data.copy() for k, p in model.params.items()}


def test_streams_are_named_and_reproducible():
    a = stream(3, "batches").integers(1 << 30, size=4)
    assert np.array_equal(a, stream(3, "batches").integers(1 << 30, size=4))
    assert not np.array_equal(a, stream(3, "noise").integers(1 << 30, size=4))
    assert not np.array_equal(a, stream(4, "batches").integers(1 << 30, size=4))


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_word_only_weights_reduce_to_pretraining_step_for_step(dropout):
    pairs = toy_pairs()
    m1, m2 = tiny_model(1, dropout), tiny_model(1, dropout)
    r1 = pretrain([p.b for p in pairs], m1, epochs=2, batch_size=8, lr=1e-2, seed=5)
    cfg = TrainConfig(batch_size=8, epochs=2, lr=1e-2, seed=5)

    class Refuse:
        def nu(self, b):
            return b - 1

        def negatives(self, *a):
            raise AssertionError("sampler must not be called")

    r2 = train_nce(pairs, m2, Refuse(), cfg, LossWeights(1, 0, 0))
    np.testing.assert_allclose(r1.batch_losses, r2.batch_losses, rtol=0, atol=1e-12)
    for k, v in params_of(m1).items():
        np.testing.assert_allclose(v, m2.params[k].data, rtol=0, atol=1e-12)


def test_training_is_deterministic_and_checkpoints_are_identical(tmp_path):
    pairs = toy_pairs()
    cfg = TrainConfig(batch_size=8, epochs=2, lr=1e-2, seed=2, checkpoint_interval=1)
    for run in ("a", "b"):
        train_nce(pairs, tiny_model(3, 0.2), BatchNceSampler(), cfg, LossWeights(0.1, 10, 0.1), tmp_path / run)
    for name in ("epoch_001/tensors.bin", "epoch_002/tensors.bin", "epoch_002/manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_schedule(tmp_path):
    pairs = toy_pairs(n=16)
    cfg = TrainConfig(batch_size=16, epochs=50, lr=1e-3, checkpoint_interval=5)
    assert cfg.checkpoint_epochs == [5 * i for i in range(1, 11)]
    res = train_nce(pairs, tiny_model(), BatchNceSampler(), cfg, LossWeights(0.1, 10, 0.1), tmp_path)
    assert [c.epoch for c in res.checkpoints] == cfg.checkpoint_epochs
    assert [c.epoch for c in list_checkpoints(tmp_path)] == cfg.checkpoint_epochs
    rows = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(1, 51))
    assert len(res.batch_losses) == 50


def test_nce_training_lowers_the_loss():
    pairs = toy_pairs(n=64)
    cfg = TrainConfig(batch_size=8, epochs=6, lr=1e-2, seed=0)
    res = train_nce(pairs, tiny_model(2), BatchNceSampler(), cfg, LossWeights(0.1, 10, 0.1))
    assert res.epochs[-1].mean_l < res.epochs[0].mean_l


def test_pretraining_lowers_word_loss_and_zero_epochs_is_a_no_op():
    sents = [p.b for p in toy_pairs(n=64)]
    m = tiny_model(4)
    before = params_of(m)
    pretrain(sents, m, epochs=0)
    for k, v in before.items():
        np.testing.assert_array_equal(v, m.params[k].data)
    start = mean_word_loss(m, sents)
    pretrain(sents, m, epochs=3, batch_size=8, lr=1e-2)
    assert mean_word_loss(m, sents) < start


def test_training_rejects_unusable_input():
    with pytest.raises(DataError):
        pretrain([], tiny_model())
    with pytest.raises(DataError):
        train_nce([], tiny_model(), BatchNceSampler(), TrainConfig(), LossWeights())
    with pytest.raises(DataError):
        train_nce(toy_pairs(n=4), tiny_model(), BatchNceSampler(), TrainConfig(batch_size=8), LossWeights())
    with pytest.raises(ValueError):
        TrainConfig(batch_size=8, nu=3)
    with pytest.raises(ValueError):
        TrainConfig(sampler="nope")


def test_non_finite_loss_is_reported():
    m = tiny_model()
    m.params["embedding"].data[...] = np.nan
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        pretrain([p.b for p in toy_pairs(n=16)], m, epochs=1, batch_size=8)


def test_best_index_prefers_earliest_on_ties():
    assert best_index([0.2, 0.5, 0.5, 0.1]) == 1
    assert best_index([0.3]) == 0
    with pytest.raises(ValueError):
        best_index([])


def _questions(n, offset=0):
    return [ClozeQuestion((5 + offset,), tuple((6 + j,) for j in range(3)), i % 3, "batch-neg") for i in range(n)]


def test_selection_uses_validation_and_reports_holdout(tmp_path):
    val, hold = _questions(6), _questions(6, offset=1)
    right_on = {"e1": {0, 1}, "e2": {0, 1, 2, 3}, "e3": {0, 1, 2, 3}}

    def scorer_for(ck):
        def scores(qs):
            out = []
            for i, q in enumerate(qs):
                lc = np.full(q.k, -5.0)
                lc[q.answer if i in right_on[ck.path] else (q.answer + 1) % q.k] = -1.0
                out.append((lc, np.zeros(q.k)))
            return out

        return type("S", (), {"scores": staticmethod(scores)})()

    cks = [Checkpoint(p, e) for e, p in enumerate(["e1", "e2", "e3"], start=1)]
    sel = select_checkpoint(cks, val, hold, 1, scorer_for)
    assert sel.checkpoint.path == "e2"
    assert sel.validation == pytest.approx([2 / 6, 4 / 6, 4 / 6])
    assert sel.holdout_accuracy == pytest.approx(4 / 6)

    # the same selection replays from score dumps
    dumps = {}
    for ck in cks:
        for name, qs in (("v", val), ("h", hold)):
            path = tmp_path / ck.path / f"{name}.jsonl"
            write_score_dump(path, qs, scorer_for(ck).scores(qs))
            dumps.setdefault(ck.path, {})[question_key(qs)] = path
    again = select_checkpoint(cks, val, hold, 1, lambda ck: DumpScorer(dumps[ck.path]))
    assert again.to_json() == sel.to_json()


def test_selection_needs_questions():
    table = TableScorer({})
    with pytest.raises(DataError):
        select_checkpoint([Checkpoint("x", 1)], [], _questions(2), 1, lambda ck: table)
    with pytest.raises(ValueError):
        select_checkpoint([], _questions(2), _questions(2), 1, lambda ck: table)
    assert grade(_questions(3), type("Z", (), {"scores": lambda self, qs: [(np.zeros(3), np.zeros(3))] * len(qs)})(),
                 2).accuracy == pytest.approx(1 / 3)
