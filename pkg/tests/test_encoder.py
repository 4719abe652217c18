import math

import numpy as np
import pytest

from trace_head import encoder as enc
from trace_head.diffnum import ParamStore, ShapeError, Tensor, check_gradient, layer_norm

TINY = enc.EncoderConfig(vocab_size=50, max_len=12, width=8, num_layers=2, num_heads=2, ffn_mult=2)


def tiny(seed=0, config=TINY):
    return enc.init_encoder(config, seed)


# -- tokenizer -------------------------------------------------------------------

def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert enc.fnv1a_64(b"") == 0xCBF29CE484222325
    assert enc.fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert enc.fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_tokenize_empty_is_begin_marker():
    assert enc.tokenize("") == [1]


def test_tokenize_case_folding_and_determinism():
    assert enc.tokenize("Hello") == enc.tokenize("hello") == enc.tokenize("hello")


def test_tokenize_splits_punctuation_and_ids_in_range():
    ids = enc.tokenize("Wait, what?!", vocab_size=10)
    assert len(ids) == 1 + 5
    assert all(2 <= i < 10 for i in ids[1:])


def test_tokenize_truncates():
    assert len(enc.tokenize("a " * 200, max_len=77)) == 77


def test_tokenize_hash_formula():
    V = 4096
    assert enc.tokenize("cat", vocab_size=V)[1] == enc.fnv1a_64(b"cat") % (V - 2) + 2


# -- attention -------------------------------------------------------------------

def _attn(d, rng):
    out = {}
    for p in "qkvo":
        out[f"W{p}"] = Tensor(rng.normal(size=(d, d)))
        out[f"b{p}"] = Tensor(rng.normal(size=d))
    return out


def test_single_token_attention_is_value_then_output_projection():
    rng = np.random.default_rng(0)
    a = _attn(4, rng)
    x = rng.normal(size=(1, 4))
    out = enc.multi_head_attention(x, a, 2).data
    v = x @ a["Wv"].data + a["bv"].data
    np.testing.assert_allclose(out, v @ a["Wo"].data + a["bo"].data, rtol=1e-13)


def test_one_head_reduces_to_single_head_kernel():
    rng = np.random.default_rng(1)
    a = _attn(3, rng)
    x = rng.normal(size=(4, 3))
    q = x @ a["Wq"].data + a["bq"].data
    k = x @ a["Wk"].data + a["bk"].data
    v = x @ a["Wv"].data + a["bv"].data
    logits = q @ k.T / math.sqrt(3)
    w = np.exp(logits - logits.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    expected = (w @ v) @ a["Wo"].data + a["bo"].data
    np.testing.assert_allclose(enc.multi_head_attention(x, a, 1).data, expected, rtol=1e-12)


def test_two_by_two_hand_attention():
    eye, zero = Tensor(np.eye(2)), Tensor(np.zeros(2))
    a = {"Wq": eye, "Wk": eye, "Wv": eye, "Wo": eye, "bq": zero, "bk": zero, "bv": zero, "bo": zero}
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    # logits are I / sqrt(2); each row puts e^{1/sqrt2} on itself and 1 on the other
    e = math.exp(1 / math.sqrt(2))
    hi, lo = e / (e + 1), 1 / (e + 1)
    np.testing.assert_allclose(enc.multi_head_attention(x, a, 1).data, [[hi, lo], [lo, hi]], rtol=1e-14)


def test_attention_masked_keys_are_ignored():
    rng = np.random.default_rng(2)
    a = _attn(4, rng)
    x = rng.normal(size=(3, 4))
    full = enc.multi_head_attention(x[:2], a, 2).data
    masked = enc.multi_head_attention(x, a, 2, key_mask=np.array([True, True, False])).data
    np.testing.assert_allclose(masked[:2], full, atol=1e-12)


def test_attention_head_divisibility_error():
    with pytest.raises(ShapeError):
        enc.multi_head_attention(np.ones((2, 3)), _attn(3, np.random.default_rng(0)), 2)


# -- encode ----------------------------------------------------------------------

def test_zero_layer_path():
    cfg = enc.EncoderConfig(vocab_size=50, max_len=12, width=8, num_layers=0, num_heads=2, ffn_mult=2)
    p = tiny(3, cfg)
    ids = np.array(enc.tokenize("one two three", 12, 50))
    x = p["tok_emb"].data[ids] + p["pos_emb"].data[: len(ids)]
    ln = layer_norm(Tensor(x), p["ln_f.gamma"], p["ln_f.beta"], 1e-5).data
    np.testing.assert_allclose(enc.encode(p, ids).data, ln.mean(axis=0), rtol=1e-13)
    # for a single token normalising before or after pooling coincide
    one = np.array([1])
    x1 = p["tok_emb"].data[1] + p["pos_emb"].data[0]
    ln1 = layer_norm(Tensor(x1), p["ln_f.gamma"], p["ln_f.beta"], 1e-5).data
    np.testing.assert_allclose(enc.encode(p, one).data, ln1, rtol=1e-13)


@pytest.mark.parametrize("text", ["", "x", "a much longer caption with several words in it"])
def test_output_length_is_width(text):
    assert enc.encode_text(tiny(), text).shape == (TINY.width,)


def test_word_order_changes_output_over_20_seeds():
    for seed in range(20):
        p = tiny(seed)
        assert not np.array_equal(enc.encode_text(p, "a b").data, enc.encode_text(p, "b a").data)


def test_padding_invariance():
    p = tiny(4)
    ids = enc.tokenize("pad me please", 12, 50)
    ref = enc.encode(p, np.array(ids)).data
    for extra in (1, 3, 12 - len(ids)):
        padded = np.array(ids + [enc.PAD_ID] * extra)
        np.testing.assert_allclose(enc.encode(p, padded).data, ref, atol=1e-12)


def test_batch_rows_match_single_encodes():
    p = tiny(5)
    seqs = [enc.tokenize(t, 12, 50) for t in ("short", "a bit longer one", "mid size")]
    ids, mask = enc.pad_batch(seqs)
    batch = enc.encode(p, ids, mask).data
    for i, s in enumerate(seqs):
        np.testing.assert_allclose(batch[i], enc.encode(p, np.array(s)).data, atol=1e-12)


def test_empty_sequence_rejected():
    with pytest.raises(ShapeError):
        enc.encode(tiny(), np.array([], dtype=np.int64))


def test_too_long_sequence_rejected():
    with pytest.raises(ShapeError):
        enc.encode(tiny(), np.ones(13, dtype=np.int64))


def test_cached_prefix_matches_full_pass():
    p = tiny(6)
    enc.apply_mask(p, enc.freeze_mask(TINY, 1))
    ids, mask = enc.pad_batch([enc.tokenize("cache this", 12, 50), enc.tokenize("and that too", 12, 50)])
    start = enc.first_live_block(p)
    assert start == 1
    hidden = enc.encode_prefix(p, ids, mask, start)
    np.testing.assert_array_equal(enc.encode(p, ids, mask, hidden, start).data, enc.encode(p, ids, mask).data)


def test_encode_gradient_check():
    p = tiny(7)
    rng = np.random.default_rng(7)
    for n in p.names():
        if n.endswith("gamma") or n.endswith("beta") or ".b" in n:
            p.store[n].data += rng.uniform(-0.3, 0.3, p.store[n].shape)
    ids = np.array([1, 17, 33])
    w = rng.normal(size=TINY.width)
    report = check_gradient(lambda: (enc.encode(p, ids) * w).sum(), p.store)
    assert report.max_rel_error < 1e-4, report.summary()


# -- freeze mask / counting ------------------------------------------------------

def _oracle_block_count(d, H, f):
    attn = 4 * d * d + 4 * d
    norms = 2 * (2 * d)
    ffn = d * f * d + f * d + f * d * d + d
    return attn + norms + ffn


def _walk_count(config, prefix_filter):
    total = 0
    for name, shape in enc.param_shapes(config).items():
        if prefix_filter(name):
            total += math.prod(shape)
    return total


def test_default_per_block_count():
    cfg = enc.EncoderConfig()
    assert _oracle_block_count(64, 4, 4) == 49984
    assert _walk_count(cfg, lambda n: n.startswith("blocks.0.")) == 49984


def test_default_n4_trainable_blocks_is_four_blocks():
    cfg = enc.EncoderConfig()
    mask = enc.freeze_mask(cfg, 4)
    block = _walk_count(cfg, lambda n: n.startswith("blocks.0."))
    in_blocks = sum(math.prod(s) for k, s in enc.param_shapes(cfg).items() if mask.flags[k] and k.startswith("blocks."))
    assert in_blocks == 4 * block
    assert mask.trainable == 4 * block + 2 * cfg.width


def test_n0_only_final_norm_trainable():
    p = tiny()
    mask = enc.freeze_mask(TINY, 0)
    assert [k for k, f in mask.flags.items() if f] == ["ln_f.gamma", "ln_f.beta"]
    total, trainable = enc.count_params(p, mask)
    assert trainable == 2 * TINY.width
    assert total == _walk_count(TINY, lambda n: True)


def test_nL_every_block_trainable_embeddings_frozen():
    mask = enc.freeze_mask(TINY, TINY.num_layers)
    assert all(f for k, f in mask.flags.items() if k.startswith("blocks."))
    assert not mask.flags["tok_emb"] and not mask.flags["pos_emb"]


def test_mask_partitions_blocks_by_position():
    mask = enc.freeze_mask(enc.EncoderConfig(), 2)
    for k, f in mask.flags.items():
        if k.startswith("blocks."):
            assert f == (int(k.split(".")[1]) >= 4)


@pytest.mark.parametrize("n", [-1, 3])
def test_out_of_range_n(n):
    with pytest.raises(ValueError):
        enc.freeze_mask(TINY, n)


def test_trainable_strictly_increasing():
    cfg = enc.EncoderConfig()
    counts = [enc.freeze_mask(cfg, n).trainable for n in range(cfg.num_layers + 1)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_count_params_mismatch():
    other = enc.freeze_mask(enc.EncoderConfig(vocab_size=50, max_len=12, width=8, num_layers=3, num_heads=2, ffn_mult=2), 1)
    with pytest.raises(KeyError):
        enc.count_params(tiny(), other)


def test_apply_mask_sets_store_flags():
    store = ParamStore()
    p = enc.init_encoder(TINY, 0, store)
    enc.apply_mask(p, enc.freeze_mask(TINY, 1))
    assert not store["encoder.blocks.0.attn.Wq"].requires_grad
    assert store["encoder.blocks.1.attn.Wq"].requires_grad
    assert store["encoder.ln_f.gamma"].requires_grad
