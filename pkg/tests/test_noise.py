import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spe.autodiff import Tape
from spe.corpus import BOS_ID, EOS_ID, MASK_ID, PAD_ID, read_abc_corpus
from spe.noise import (
    BatchNceSampler,
    BiLm,
    BiLmConfig,
    MaskedSentence,
    ResamplingSampler,
    batch_negatives,
    make_negatives_by_resampling,
    mask_tokens,
    resample,
    resample_batch,
    train_bilm,
)
from spe.toydata import write_corpus


def test_batch_negatives_exclude_own_and_keep_order():
    bs = [(5,), (6, 7), (8,), (9, 9)]
    negs = batch_negatives(bs)
    assert negs[1] == [(5,), (8,), (9, 9)]
    for i, n in enumerate(negs):
        assert len(n) == 3 and bs[i] not in n
    assert batch_negatives(bs) == negs


def test_batch_negatives_sizes():
    assert batch_negatives([(5,), (6,)]) == [[(6,)], [(5,)]]
    negs = batch_negatives([(i,) for i in range(16)])
    assert all(len(n) == 15 for n in negs)
    assert BatchNceSampler().nu(16) == 15
    with pytest.raises(ValueError):
        batch_negatives([(5,)])


def test_mask_edge_rates():
    rng = np.random.default_rng(0)
    m = mask_tokens(list(range(5, 15)), 0.0, rng)
    assert len(m.positions) == 1
    m = mask_tokens(list(range(5, 15)), 1.0, rng)
    assert m.positions == tuple(range(10)) and set(m.tokens) == {MASK_ID}


def test_mask_rate_statistic():
    rng = np.random.default_rng(1)
    counts = [len(mask_tokens([7] * 100, 0.15, rng).positions) for _ in range(10_000)]
    assert 14.0 <= np.mean(counts) <= 16.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(5, 20), min_size=1, max_size=30), st.floats(0, 1), st.integers(0, 2**31))
def test_masked_sentence_restores_original(sent, rate, seed):
    m = mask_tokens(sent, rate, np.random.default_rng(seed))
    assert m.restore() == tuple(sent)
    assert all(0 <= p < len(sent) for p in m.positions)
    assert all(m.tokens[p] == MASK_ID for p in m.positions)


def toy_bilm(vocab=7, seed=0):
    return BiLm(BiLmConfig(vocab, emb_dim=4, hidden=5, dropout=0.0, init_scale=0.3), seed=seed)


def test_resample_no_mask_is_identity():
    m = MaskedSentence((5, 6, 5), (), ())
    assert resample(m, toy_bilm(), np.random.default_rng(0)) == (5, 6, 5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(5, 8), min_size=1, max_size=12), st.integers(0, 2**31))
def test_resample_changes_only_masked_positions(sent, seed):
    rng = np.random.default_rng(seed)
    bilm = toy_bilm(vocab=9)
    m = mask_tokens(sent, 0.3, rng)
    out = resample(m, bilm, rng)
    assert len(out) == len(sent)
    for i, (x, y) in enumerate(zip(out, sent)):
        if i not in m.positions:
            assert x == y
        else:
            assert x not in (MASK_ID, PAD_ID, BOS_ID, EOS_ID)


def two_word_bilm():
    """Zero recurrent weights; output logits fixed so word 5 : word 6 = 3 : 1."""
    bilm = BiLm(BiLmConfig(7, emb_dim=1, hidden=2, dropout=0.0), seed=0)
    for p in bilm.params.values():
        p.data[...] = 0.0
    bilm.params["embedding"].data[:, 0] = [-100.0, 0, 0, 0, 0, 1.0, 0.0]
    bilm.params["comb.bias"].data[0] = np.log(3.0)
    return bilm


def test_sampling_frequencies_match_model_distribution():
    bilm = two_word_bilm()
    rng = np.random.default_rng(2)
    masked = [MaskedSentence((MASK_ID,), (0,), (5,))] * 10_000
    draws = np.array([s[0] for s in resample_batch(masked, bilm, rng)])
    assert set(np.unique(draws)) <= {5, 6}
    assert abs(np.mean(draws == 5) - 0.75) <= 0.02


def test_resampled_negatives_shape_and_determinism():
    bilm = toy_bilm(vocab=9)
    bs = [(5, 6, 7), (8,), (6, 6, 6, 6)]
    a = make_negatives_by_resampling(bs, bilm, 4, np.random.default_rng(3))
    b = make_negatives_by_resampling(bs, bilm, 4, np.random.default_rng(3))
    assert a == b
    for src, negs in zip(bs, a):
        assert len(negs) == 4 and all(len(n) == len(src) for n in negs)
    sampler = ResamplingSampler(bilm, nu=15)
    assert sampler.nu(16) == 15
    assert all(len(n) == 15 for n in sampler.negatives(bs, np.random.default_rng(0)))


def test_identical_resamples_are_redrawn_then_kept():
    bilm = two_word_bilm()
    bilm.params["comb.bias"].data[0] = 60.0  # word 5 is certain
    records = []
    negs = make_negatives_by_resampling([(5,)], bilm, 2, np.random.default_rng(0), max_redraws=10,
                                        audit=records.append)
    assert negs == [[(5,), (5,)]]
    assert [r["attempts"] for r in records] == [11, 11]


def test_masked_loss_ignores_unmasked_positions():
    bilm = toy_bilm(vocab=9, seed=4)
    m = MaskedSentence((5, MASK_ID, 7), (1,), (6,))
    other = MaskedSentence((8, MASK_ID, 7), (1,), (6,))
    # changing an unmasked target would not matter: the loss only reads originals
    assert bilm.masked_loss([m]).item() == pytest.approx(-bilm.position_log_probs([m.tokens], [0], [1]).data[0, 6])
    assert bilm.masked_loss([other]).item() != bilm.masked_loss([m]).item()


def test_triple_tied_embedding_gets_gradient_from_every_path():
    bilm = toy_bilm(vocab=12, seed=5)
    m = MaskedSentence((5, MASK_ID, 7), (1,), (9,))

    def grad_rows():
        with Tape() as tape:
            loss = bilm.masked_loss([m])
        return np.abs(tape.backward(loss)["embedding"]).sum(axis=1)

    g = grad_rows()
    assert g[5] > 0  # forward input only
    assert g[7] > 0  # backward input only
    assert g[9] > 0  # output only
    assert "embedding" in bilm.params and not any("out" in k for k in bilm.params)


def test_bidirectional_prediction_uses_both_sides():
    bilm = toy_bilm(vocab=9, seed=6)
    base = bilm.position_log_probs([(5, MASK_ID, 7)], [0], [1]).data
    left = bilm.position_log_probs([(6, MASK_ID, 7)], [0], [1]).data
    right = bilm.position_log_probs([(5, MASK_ID, 8)], [0], [1]).data
    assert not np.allclose(base, left) and not np.allclose(base, right)


@pytest.fixture(scope="module")
def toy_sentences(tmp_path_factory):
    path = tmp_path_factory.mktemp("abc") / "toy.txt"
    write_corpus(path, n_tunes=60, seed=1)
    docs = read_abc_corpus(path)
    from spe.corpus import build_vocabulary

    vocab = build_vocabulary([s for d in docs for s in d.sentences], kind="abc")
    return vocab, [tuple(vocab.encode(s)) for d in docs for s in d.sentences]


def test_trained_bilm_beats_uniform_and_rarely_keeps_identical(toy_sentences):
    vocab, sents = toy_sentences
    cfg = BiLmConfig(len(vocab), emb_dim=16, hidden=24, dropout=0.0)
    bilm = train_bilm(sents, cfg, epochs=3, batch_size=20, lr=1e-2, seed=0)
    rng = np.random.default_rng(0)
    masked = [mask_tokens(s, 0.15, rng) for s in sents[:200]]
    ce = bilm.masked_loss(masked).item()
    assert ce < np.log(len(vocab))
    records = []
    sources = [sents[i % len(sents)] for i in range(625)]
    make_negatives_by_resampling(sources, bilm, 16, rng, audit=records.append)
    assert len(records) == 10_000
    kept_identical = sum(r["negative"] == list(sources[r["pair"]]) for r in records)
    assert kept_identical / len(records) < 0.01


def test_bilm_training_is_deterministic(toy_sentences):
    vocab, sents = toy_sentences
    cfg = BiLmConfig(len(vocab), emb_dim=4, hidden=5)
    a = train_bilm(sents[:40], cfg, epochs=1, seed=3)
    b = train_bilm(sents[:40], cfg, epochs=1, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    with pytest.raises(ValueError):
        train_bilm([], cfg, epochs=1)
