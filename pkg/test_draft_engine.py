#!/usr/bin/env python3
"""
Tests for sequential and layer-parallel drafting, tree drafting and similarity probing
"""
import sys
sys.path.insert(0, 'app')

import numpy as np
import pytest

from bench_corpus import build_probe_corpus
from draft_engine import (DraftEngine, ForwardRunner, SimilarityStats, default_workers, probe_similarity,
                          select_children)
from errors import ConfigError
from kv_cache import TAIL, KvCache
from layer_planner import plan_groups
from tensor_math import cosine_sim
from toy_transformer import ModelConfig, ToyTransformer, encode_bytes, init_model


@pytest.fixture(scope="module")
def model8():
    return ToyTransformer(init_model(ModelConfig(n_layers=8, d_model=32, seed=1234, max_positions=256, init_std=0.1)))


def committed_cache(model, tokens):
    cache = KvCache(model.n_layers, model.config.d_model, model.config.max_positions)
    rows = cache.stage_append([TAIL] + list(range(len(tokens) - 1)), fuzzy=False)
    ForwardRunner(model).forward_sequential(model.embed(tokens), cache, rows, cache.build_tree_mask().rows(rows))
    cache.commit_path(rows)
    return cache


def stage_chain(cache, count, fuzzy):
    c = cache.committed_len
    rows = cache.stage_append([TAIL] + [c + i for i in range(count - 1)], fuzzy=fuzzy)
    return rows, cache.build_tree_mask().rows(rows)


def test_singleton_plan_fuzzy_equals_sequential_bitwise(model8):
    engine = DraftEngine(model8, plan_groups(8, 1), workers=1)
    rng = np.random.default_rng(0)
    prefix = encode_bytes(b"ledger")
    for _ in range(100):
        tokens = [int(t) for t in rng.integers(0, 256, size=int(rng.integers(1, 4)))]
        a_cache = committed_cache(model8, prefix)
        b_cache = a_cache.clone()
        rows, mask = stage_chain(a_cache, len(tokens), fuzzy=True)
        stage_chain(b_cache, len(tokens), fuzzy=False)
        fuzzy = engine.forward_fuzzy(model8.embed(tokens), a_cache, rows, mask)
        precise = engine.forward_sequential(model8.embed(tokens), b_cache, rows, mask)
        assert np.array_equal(fuzzy, precise)
        assert np.array_equal(a_cache.keys, b_cache.keys)


def test_grouped_fuzzy_differs_but_stays_aligned(model8):
    engine = DraftEngine(model8, plan_groups(8, 2), workers=2)
    tokens = encode_bytes(b"The harbour master kept a ledger")
    cache_a = committed_cache(model8, tokens[:8])
    cache_b = cache_a.clone()
    rows, mask = stage_chain(cache_a, len(tokens) - 8, fuzzy=True)
    stage_chain(cache_b, len(tokens) - 8, fuzzy=False)
    fuzzy = engine.forward_fuzzy(model8.embed(tokens[8:]), cache_a, rows, mask)
    precise = engine.forward_sequential(model8.embed(tokens[8:]), cache_b, rows, mask)
    engine.close()
    assert not np.array_equal(fuzzy, precise)
    assert all(cosine_sim(f, p) > 0 for f, p in zip(fuzzy, precise))


def check_block_chain(model, trace, h_start, h_end, parallel_mlp_inputs=False):
    assert [io.layer for io in trace] == list(range(model.n_layers))
    assert np.array_equal(trace[0].h_in, h_start)
    for io in trace:
        assert np.array_equal(io.h_mid, io.h_in + io.attn_out)
        if not parallel_mlp_inputs:
            assert np.array_equal(io.mlp_in, io.h_mid)
        assert np.array_equal(io.h_out, io.h_mid + model.mlp_forward(io.layer, model.mlp_input(io.layer, io.mlp_in)))
    for prev, nxt in zip(trace, trace[1:]):
        assert np.array_equal(nxt.h_in, prev.h_out)
    assert np.array_equal(trace[-1].h_out, h_end)


def test_sequential_trace_chains_every_block(model8):
    cache = committed_cache(model8, encode_bytes(b"ledger"))
    rows, mask = stage_chain(cache, 3, fuzzy=False)
    h = model8.embed(encode_bytes(b"gul"))
    trace = []
    out = ForwardRunner(model8).forward_sequential(h, cache, rows, mask, trace=trace)
    check_block_chain(model8, trace, h, out)


@pytest.mark.parametrize("strategy", ["attention", "full_layer"])
def test_fuzzy_trace_chains_mlps_after_group_attention(model8, strategy):
    plan = plan_groups(8, 3)
    cache = committed_cache(model8, encode_bytes(b"ledger"))
    rows, mask = stage_chain(cache, 3, fuzzy=True)
    before = cache.clone()
    h = model8.embed(encode_bytes(b"gul"))
    trace = []
    with DraftEngine(model8, plan, strategy=strategy, workers=3) as engine:
        out = engine.forward_fuzzy(h, cache, rows, mask, trace=trace)
    check_block_chain(model8, trace, h, out, parallel_mlp_inputs=(strategy == "full_layer"))
    by_layer = {io.layer: io for io in trace}
    for group in plan.groups:
        group_input = by_layer[group[0]].h_in
        for layer in group:
            expected = model8.attention_parts(layer, model8.attn_input(layer, group_input),
                                              before.view(layer), rows, mask)
            assert np.array_equal(by_layer[layer].attn_out, expected.out)
            if strategy == "full_layer":
                assert np.array_equal(by_layer[layer].mlp_in, group_input + expected.out)


@pytest.mark.parametrize("strategy", ["attention", "full_layer"])
def test_fuzzy_independent_of_worker_scheduling(model8, strategy):
    tokens = encode_bytes(b"tide table")
    outs = []
    for workers, seed in ((1, None), (4, 7), (3, 11)):
        with DraftEngine(model8, plan_groups(8, 4), strategy=strategy, workers=workers,
                         schedule_seed=seed) as engine:
            cache = committed_cache(model8, tokens[:4])
            rows, mask = stage_chain(cache, len(tokens) - 4, fuzzy=True)
            outs.append((engine.forward_fuzzy(model8.embed(tokens[4:]), cache, rows, mask), cache.keys.copy()))
    for h, keys in outs[1:]:
        assert np.array_equal(h, outs[0][0])
        assert np.array_equal(keys, outs[0][1])


def test_full_layer_strategy_differs_from_attention(model8):
    tokens = encode_bytes(b"gulls")
    outs = {}
    for strategy in ("attention", "full_layer"):
        with DraftEngine(model8, plan_groups(8, 3), strategy=strategy, workers=1) as engine:
            cache = committed_cache(model8, tokens[:2])
            rows, mask = stage_chain(cache, len(tokens) - 2, fuzzy=True)
            outs[strategy] = engine.forward_fuzzy(model8.embed(tokens[2:]), cache, rows, mask)
    assert not np.array_equal(outs["attention"], outs["full_layer"])


def test_engine_rejects_mismatched_plan_and_strategy(model8):
    with pytest.raises(ConfigError):
        DraftEngine(model8, plan_groups(6, 2))
    with pytest.raises(ConfigError):
        DraftEngine(model8, strategy="pipeline")


def test_default_workers_env(monkeypatch):
    plan = plan_groups(8, 4)
    monkeypatch.delenv("ESPEC_WORKERS", raising=False)
    assert default_workers(plan) == 3
    monkeypatch.setenv("ESPEC_WORKERS", "2")
    assert default_workers(plan) == 2
    monkeypatch.setenv("ESPEC_WORKERS", "zero")
    with pytest.raises(ConfigError):
        default_workers(plan)


def test_select_children_greedy_matches_sort_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal(258).astype(np.float32)
    chosen = select_children(logits, None, 4, 0.0, rng)
    oracle = sorted(range(258), key=lambda t: (-float(logits[t]), t))[:4]
    assert chosen == oracle


def test_select_children_ties_take_lowest_id():
    logits = np.array([1.0, 3.0, 3.0, 2.0], dtype=np.float32)
    assert select_children(logits, None, 2, 0.0, np.random.default_rng(0)) == [1, 2]
    with pytest.raises(ConfigError):
        select_children(logits, None, 5, 0.0, np.random.default_rng(0))


def test_select_children_without_replacement():
    probs = np.array([0.7, 0.2, 0.1])
    chosen = select_children(np.zeros(3), probs, 3, 1.0, np.random.default_rng(5))
    assert sorted(chosen) == [0, 1, 2]


def test_greedy_chain_tree(model8):
    engine = DraftEngine(model8, plan_groups(8, 2), workers=1)
    cache = committed_cache(model8, encode_bytes(b"harbour"))
    root = np.random.default_rng(0).standard_normal(258).astype(np.float32)
    tree = engine.draft_tree(cache, root, [1, 1, 1, 1, 1], 0.0, np.random.default_rng(0))
    assert len(tree.nodes) == 5
    assert [n.depth for n in tree.nodes] == [1, 2, 3, 4, 5]
    assert tree.nodes[0].token == int(np.argmax(root))
    assert engine.fuzzy_forwards == 4
    assert cache.staged_len == 4


def test_tree_counts_and_staging(model8):
    engine = DraftEngine(model8, plan_groups(8, 2), workers=1)
    cache = committed_cache(model8, encode_bytes(b"harbour"))
    root = np.random.default_rng(1).standard_normal(258).astype(np.float32)
    calls = []
    tree = engine.draft_tree(cache, root, [2, 2], 0.8, np.random.default_rng(1),
                             on_forward=lambda kind, s, wall: calls.append((kind, s)))
    assert len(tree.nodes) == 6 == tree.full_size()
    assert len(tree.level(1)) == 2 and len(tree.level(2)) == 4
    # only the non-leaf level is fed through the drafter
    assert cache.staged_len == 2
    assert calls == [("fuzzy", 2)]
    for node in tree.nodes:
        if node.depth == 2:
            assert node.draft_row is None
            parent = tree.nodes[node.parent]
            assert cache.parents[parent.draft_row] == TAIL


def test_sequential_tree_flags_rows_precise(model8):
    engine = DraftEngine(model8, plan_groups(8, 1), workers=1)
    cache = committed_cache(model8, encode_bytes(b"sails"))
    root = np.zeros(258, dtype=np.float32)
    engine.draft_tree(cache, root, [1, 1, 1], 0.0, np.random.default_rng(0), fuzzy=False)
    assert cache.fuzzy_rows() == 0
    assert engine.sequential_forwards == 2


def test_similarity_stats_means():
    stats = SimilarityStats()
    assert stats.means()["h"] == 1.0
    stats.add_rows("h", np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    stats.add("h", 1.0)
    assert stats.means()["h"] == 0.5
    other = SimilarityStats()
    other.add("h", 1.0)
    stats.merge(other)
    assert stats.samples == 3


def test_probe_similarity_trend(model8):
    corpus = build_probe_corpus(4096, 128, seed=0)
    frame = probe_similarity(model8, [1, 2, 3, 4], corpus, workers=1)
    assert list(frame.columns) == ["lp_size", "h", "q", "k", "v", "attnoutput"]
    n1 = frame[frame.lp_size == 1].iloc[0]
    for q in ("h", "q", "k", "v", "attnoutput"):
        assert n1[q] == 1.0
        column = frame[q].tolist()
        assert all(-1.0 <= v <= 1.0 for v in column)
        for prev, cur in zip(column, column[1:]):
            assert cur <= prev + 0.02


def test_probe_rejects_empty_corpus(model8):
    with pytest.raises(ConfigError):
        probe_similarity(model8, [2], [[1]])
