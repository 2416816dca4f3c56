import numpy as np
import pytest

from spe import autodiff as ad
from spe.autodiff import Tape
from spe.corpus import BOS_ID
from spe.lm import LanguageModel, LmConfig, load_model, pad_batch, relaxed_softmax


def small(seed=0, **kw):
    kw.setdefault("dropout", 0.0)
    return LanguageModel(LmConfig(9, emb_dim=4, hidden=6, **kw), seed=seed)


def test_zero_weights_give_uniform_distributions():
    m = small()
    m.zero()
    logp, _ = m.forward([BOS_ID, 5, 6])
    np.testing.assert_allclose(np.exp(logp.data), 1 / 9, rtol=0, atol=1e-15)


def test_distributions_normalize():
    m = small(seed=3, init_scale=0.8)
    logp, _ = m.forward([BOS_ID, 5, 6, 7, 8])
    np.testing.assert_allclose(np.exp(logp.data).sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_eval_mode_is_deterministic():
    m = small(seed=1, dropout=0.5)
    a, _ = m.forward([BOS_ID, 5, 6])
    b, _ = m.forward([BOS_ID, 5, 6])
    np.testing.assert_array_equal(a.data, b.data)


def test_dropout_only_in_train_mode():
    m = small(seed=1, dropout=0.5, init_scale=0.8)
    rng = np.random.default_rng(0)
    a, _ = m.forward([BOS_ID, 5, 6], train_mode=True, rng=rng)
    b, _ = m.forward([BOS_ID, 5, 6])
    assert np.abs(a.data - b.data).max() > 1e-6


def test_state_carry_over_equals_concatenated_run():
    m = small(seed=2, init_scale=0.5)
    a, b = [BOS_ID, 5, 6, 7], [8, 5, 6]
    _, state_a = m.forward(a)
    logp_b, final_b = m.forward(b, init=state_a)
    logp_ab, final_ab = m.forward(a + b)
    np.testing.assert_allclose(logp_b.data, logp_ab.data[len(a):], rtol=0, atol=1e-12)
    for x, y in zip(final_b.arrays(), final_ab.arrays()):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_padding_does_not_leak_into_shorter_rows():
    m = small(seed=4, init_scale=0.5)
    seqs = [[5], [6, 7, 8, 5]]
    batched = m.continuation_log_probs(seqs, m.start_state(2)).data
    alone = [m.continuation_log_probs([s], m.start_state(1)).data[0] for s in seqs]
    np.testing.assert_allclose(batched, alone, rtol=0, atol=1e-12)


def test_out_of_range_token_rejected():
    with pytest.raises(IndexError):
        small().forward([BOS_ID, 9])


def test_relaxed_softmax_values():
    np.testing.assert_allclose(relaxed_softmax([1.0, 1.0], relaxed=False), [0.5, 0.5])
    np.testing.assert_allclose(relaxed_softmax([2.0, 0.0], relaxed=False), [0.8808, 0.1192], atol=1e-4)
    # softplus(t) + 0.01 = 2
    t_raw = np.log(np.expm1(1.99))
    np.testing.assert_allclose(relaxed_softmax([2.0, 0.0], t_raw), [0.7311, 0.2689], atol=1e-4)
    t_one = np.log(np.expm1(0.99))
    np.testing.assert_allclose(relaxed_softmax([2.0, 0.0], t_one), [0.8808, 0.1192], atol=1e-4)


def test_entropy_increases_with_temperature():
    logits = np.array([3.0, 1.0, -0.5, 0.2])
    ents = []
    for t_raw in np.linspace(-4, 4, 30):
        p = relaxed_softmax(logits, t_raw)
        ents.append(-(p * np.log(p)).sum())
    assert np.all(np.diff(ents) > 0)


def test_relaxed_head_matches_numpy_softmax():
    m = small(seed=6, init_scale=0.5)
    logp, _ = m.forward([BOS_ID, 5])
    _, state = m.forward([BOS_ID])
    top = state.h[-1].data
    out = top @ m.params["proj.weight"].data + m.params["proj.bias"].data
    logits = out[:, :4] @ m.params["embedding"].data.T
    np.testing.assert_allclose(np.exp(logp.data[0]), relaxed_softmax(logits, out[:, 4])[0], atol=1e-12)


def test_output_layer_is_tied_to_embedding():
    m = small(seed=7)
    assert set(m.params) == {"embedding", "proj.weight", "proj.bias", "lstm0.w_in", "lstm0.w_rec",
                             "lstm0.bias", "lstm1.w_in", "lstm1.w_rec", "lstm1.bias"}
    assert m.params["proj.weight"].shape == (6, 5)
    # token 8 is only ever a prediction target here, so its embedding row gets gradient through the output side
    with Tape() as tape:
        loss = -m.continuation_log_probs([[8]], m.start_state(1)).sum()
    g = tape.backward(loss)["embedding"]
    assert np.abs(g[8]).sum() > 0
    # token 5 is only an input: gradient reaches its row through the input side as well
    with Tape() as tape:
        logp, _ = m.forward([BOS_ID, 5])
        loss = -ad.pick(logp[1:], np.array([6])).sum()
    g = tape.backward(loss)["embedding"]
    assert np.abs(g[5]).sum() > 0 and np.abs(g[6]).sum() > 0


def test_parameter_count_independent_of_length():
    m = small()
    n = sum(p.data.size for p in m.params.values())
    m.forward([BOS_ID] + [5] * 50)
    assert n == sum(p.data.size for p in m.params.values())


def test_initialization_ranges():
    m = LanguageModel(LmConfig(30, emb_dim=8, hidden=10), seed=0)
    for name, p in m.params.items():
        if name.endswith("bias"):
            continue
        assert np.abs(p.data).max() <= 0.05
    b = m.params["lstm0.bias"].data
    np.testing.assert_array_equal(b[10:20], 1.0)
    assert not b[:10].any() and not b[20:].any()


def test_save_load_round_trip(tmp_path):
    m = small(seed=8)
    m.save(tmp_path / "ck", vocab_hash="abc")
    n, manifest = load_model(tmp_path / "ck")
    assert manifest["vocab_hash"] == "abc"
    for k in m.params:
        np.testing.assert_array_equal(m.params[k].data, n.params[k].data)


def test_single_precision_mode_tracks_double():
    m64 = small(seed=9, init_scale=0.3)
    m32 = LanguageModel(LmConfig(9, emb_dim=4, hidden=6, dropout=0.0, init_scale=0.3, dtype="float32"), seed=9)
    a = m64.continuation_log_probs([[5, 6, 7]], m64.start_state(1)).data
    b = m32.continuation_log_probs([[5, 6, 7]], m32.start_state(1)).data
    assert b.dtype == np.float32
    np.testing.assert_allclose(a, b, rtol=1e-5)


def test_pad_batch_layout():
    ids, lengths = pad_batch([[5, 6], [7]])
    assert ids.shape == (2, 2)
    np.testing.assert_array_equal(lengths, [2, 1])
