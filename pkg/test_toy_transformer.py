#!/usr/bin/env python3
"""
Tests for the toy transformer, its seeded initialisation and the model file format
"""
import struct
import sys
sys.path.insert(0, 'app')

import numpy as np
import pytest

from draft_engine import ForwardRunner
from errors import ConfigError, ModelIOError, PositionOverflowError
from kv_cache import TAIL, KvCache
from model_io import MAGIC, deserialize_model, load_model, save_model, serialize_model
from toy_transformer import (BOS, VOCAB_SIZE, ModelConfig, ToyTransformer, decode_tokens, encode_bytes,
                             init_model, make_truncated_draft)


def tiny_config(n_layers=4, seed=0, **kw):
    cfg = dict(d_model=16, n_heads=2, d_head=8, d_mlp=32, max_positions=128)
    cfg.update(kw)
    return ModelConfig(n_layers=n_layers, seed=seed, **cfg)


def chain(cache, count):
    start = cache.committed_len
    return cache.stage_append([TAIL] + [start + i for i in range(count - 1)], fuzzy=False)


def prefill(model, tokens, cache=None, runner=None):
    cache = cache or KvCache(model.n_layers, model.config.d_model, model.config.max_positions)
    runner = runner or ForwardRunner(model)
    rows = chain(cache, len(tokens))
    h = runner.forward_sequential(model.embed(tokens), cache, rows, cache.build_tree_mask().rows(rows))
    cache.commit_path(rows)
    return model.lm_logits(h), cache


def test_byte_tokens():
    tokens = encode_bytes(b"hi")
    assert tokens == [BOS, ord("h"), ord("i")]
    assert decode_tokens(tokens) == b"hi"


def test_init_is_deterministic():
    assert serialize_model(init_model(tiny_config(seed=7))) == serialize_model(init_model(tiny_config(seed=7)))


def test_init_is_seed_sensitive():
    a = init_model(tiny_config(seed=7))
    b = init_model(tiny_config(seed=8))
    assert not np.array_equal(a.embedding, b.embedding)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4, d_head=8).validate()
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=1).validate()


def test_forward_of_bos_is_finite():
    model = ToyTransformer(init_model(ModelConfig(n_layers=4, d_model=32, seed=3)))
    logits, _ = prefill(model, [BOS])
    assert logits.shape == (1, VOCAB_SIZE)
    assert np.all(np.isfinite(logits))


def test_single_token_attention_is_self_only():
    model = ToyTransformer(init_model(tiny_config()))
    cache = KvCache(model.n_layers, 16, 128)
    rows = chain(cache, 1)
    x = model.attn_input(0, model.embed([65]))
    parts = model.attention_parts(0, x, cache.view(0), rows, cache.build_tree_mask().rows(rows))
    w = model.weights.layers[0]
    expected = (parts.v.astype(np.float64) @ w.wo.astype(np.float64)).astype(np.float32)
    np.testing.assert_allclose(parts.out, expected, atol=1e-7)


def test_incremental_attention_matches_batch():
    model = ToyTransformer(init_model(tiny_config(seed=1)))
    tokens = [BOS, 72]
    batch_logits, _ = prefill(model, tokens)

    cache = KvCache(model.n_layers, 16, 128)
    first, cache = prefill(model, tokens[:1], cache)
    second, cache = prefill(model, tokens[1:], cache)
    np.testing.assert_allclose(first[0], batch_logits[0], atol=1e-5)
    np.testing.assert_allclose(second[0], batch_logits[1], atol=1e-5)


def test_cached_decoding_matches_full_recompute():
    model = ToyTransformer(init_model(tiny_config(seed=2)))
    tokens = encode_bytes(b"the tide came in")
    full, _ = prefill(model, tokens)
    cache = KvCache(model.n_layers, 16, 128)
    runner = ForwardRunner(model)
    for i, token in enumerate(tokens):
        logits, cache = prefill(model, [token], cache, runner)
        np.testing.assert_allclose(logits[0], full[i], atol=1e-5)


def test_masked_future_rows_do_not_contribute():
    model = ToyTransformer(init_model(tiny_config(seed=4)))
    a, _ = prefill(model, [BOS, 10, 20])
    b, _ = prefill(model, [BOS, 10, 99])
    np.testing.assert_array_equal(a[:2], b[:2])


def test_mlp_zero_and_row_permutation():
    model = ToyTransformer(init_model(tiny_config()))
    assert np.array_equal(model.mlp_forward(0, np.zeros((2, 16), dtype=np.float32)),
                          np.zeros((2, 16), dtype=np.float32))
    x = np.random.default_rng(0).standard_normal((5, 16)).astype(np.float32)
    perm = [3, 0, 4, 1, 2]
    np.testing.assert_array_equal(model.mlp_forward(1, x)[perm], model.mlp_forward(1, x[perm]))


def test_lm_logits_deterministic():
    model = ToyTransformer(init_model(tiny_config()))
    h = np.random.default_rng(1).standard_normal((3, 16)).astype(np.float32)
    assert np.array_equal(model.lm_logits(h), model.lm_logits(h))


def test_position_overflow():
    model = ToyTransformer(init_model(tiny_config(max_positions=4)))
    _, cache = prefill(model, [BOS, 1, 2, 3])
    with pytest.raises(PositionOverflowError):
        chain(cache, 1)


def test_truncated_draft_shares_weights():
    base = init_model(tiny_config(n_layers=6))
    draft = make_truncated_draft(base, 4)
    assert draft.config.n_layers == 4
    assert draft.embedding is base.embedding
    assert draft.layers[3] is base.layers[3]
    with pytest.raises(ConfigError):
        make_truncated_draft(base, 6)
    with pytest.raises(ConfigError):
        make_truncated_draft(base, 1)


def test_truncated_draft_agrees_with_base_sometimes():
    base_w = init_model(ModelConfig(n_layers=12, d_model=32, seed=1234, init_std=0.1))
    base = ToyTransformer(base_w)
    draft = ToyTransformer(make_truncated_draft(base_w, 8))
    tokens = encode_bytes(b"The harbour master kept a ledger of every ship")
    b, _ = prefill(base, tokens)
    d, _ = prefill(draft, tokens)
    agreement = np.mean(np.argmax(b, axis=1) == np.argmax(d, axis=1))
    assert 0 < agreement < 1
    # the base must not simply echo its input byte
    assert np.any(np.argmax(b, axis=1) != np.asarray(tokens))


def test_model_file_round_trip(tmp_path):
    weights = init_model(tiny_config(seed=11))
    path = tmp_path / "m.espec"
    save_model(weights, str(path))
    loaded = load_model(str(path))
    assert loaded.config == weights.config
    for (name, a), (_, b) in zip(weights.named_tensors(), loaded.named_tensors()):
        assert np.array_equal(a, b), name


def test_model_file_errors(tmp_path):
    data = serialize_model(init_model(tiny_config()))
    with pytest.raises(ModelIOError):
        deserialize_model(b"NOTMAGIC" + data[len(MAGIC):])
    with pytest.raises(ModelIOError):
        deserialize_model(data[:-4])
    with pytest.raises(ModelIOError):
        deserialize_model(data + b"\x00")
    with pytest.raises(ModelIOError):
        deserialize_model(MAGIC + struct.pack("<Q", 5) + b"{oops")
    with pytest.raises(ModelIOError):
        load_model(str(tmp_path / "missing.espec"))


def test_model_file_rejects_non_finite():
    weights = init_model(tiny_config())
    weights.final_norm = weights.final_norm.copy()
    weights.final_norm[0] = np.nan
    with pytest.raises(ModelIOError):
        deserialize_model(serialize_model(weights))
