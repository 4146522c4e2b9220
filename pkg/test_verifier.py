#!/usr/bin/env python3
"""
Tests for acceptance, residual bonus sampling and tree verification
"""
import sys
sys.path.insert(0, 'app')

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from draft_engine import DraftTree, TreeNode
from errors import ConsistencyError, StructuralError
from lossless_check import analytic_suite
from verifier import (acceptance_test, bonus_distribution, enumerate_draw_sequences, induced_step_distribution,
                      residual, sample_from, to_probs, tree_level_output_distribution, verify_tree)


def logits_for(probs):
    return np.log(np.clip(np.asarray(probs, dtype=np.float64), 1e-30, None)).astype(np.float32)


def one_level_tree(q, children, p):
    tree = DraftTree(widths=[len(children)], root_logits=logits_for(q), root_probs=np.asarray(q, dtype=np.float64))
    for token in children:
        tree.root_children.append(len(tree.nodes))
        tree.nodes.append(TreeNode(token=token, parent=-1, depth=1, base_logits=logits_for(p)))
    tree.root_base_logits = logits_for(p)
    return tree


def test_acceptance_examples():
    assert all(acceptance_test(0.3, 0.3, u) for u in (0.0, 0.5, 0.999))
    assert acceptance_test(0.2, 0.4, 0.49)
    assert not acceptance_test(0.2, 0.4, 0.5)
    assert acceptance_test(0.9, 0.1, 0.9999)
    with pytest.raises(ConsistencyError):
        acceptance_test(0.1, 0.0, 0.5)


def test_bonus_distribution_examples():
    np.testing.assert_allclose(bonus_distribution([0.5, 0.5], None, 3, 3), [0.5, 0.5])
    np.testing.assert_allclose(bonus_distribution([0.7, 0.3], [0.3, 0.7], 1, 3), [1.0, 0.0])
    np.testing.assert_allclose(bonus_distribution([0.4, 0.6], [0.4, 0.6], 0, 3), [0.4, 0.6])


def test_residual_without_mass_is_none():
    assert residual([0.5, 0.5], [0.5, 0.5]) is None


def test_induced_step_examples():
    np.testing.assert_allclose(induced_step_distribution([0.5, 0.5], [0.9, 0.1]), [0.5, 0.5], atol=1e-12)
    p = np.array([0.1, 0.2, 0.7])
    np.testing.assert_allclose(induced_step_distribution(p, p), p, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=16), st.integers(0, 2 ** 32 - 1))
def test_induced_step_is_lossless(raw, seed):
    p = np.asarray(raw) / np.sum(raw)
    q = np.random.default_rng(seed).dirichlet(np.ones(len(p)))
    np.testing.assert_allclose(induced_step_distribution(p, q), p, atol=1e-6)


def test_analytic_suite_passes():
    result = analytic_suite(vocab=8, trials=1000, seed=0)
    assert result["passed"]
    assert result["pairs"] == 3000


def test_draw_sequences_sum_to_one():
    seqs = enumerate_draw_sequences([0.5, 0.3, 0.2], 2)
    assert len(seqs) == 6
    assert abs(sum(prob for _, prob in seqs) - 1.0) < 1e-12


@pytest.mark.parametrize("width", [1, 2, 3])
def test_tree_level_distribution_is_lossless(width):
    rng = np.random.default_rng(width)
    for _ in range(20):
        p = rng.dirichlet(np.ones(4))
        q = rng.dirichlet(np.ones(4) * 0.3)
        np.testing.assert_allclose(tree_level_output_distribution(p, q, width), p, atol=1e-9)


def test_chain_at_zero_temperature_accepts_matching_argmax():
    p = np.array([0.1, 0.7, 0.2])
    tree = one_level_tree([0.2, 0.5, 0.3], [1], p)
    outcome = verify_tree(tree, 0.0, np.random.default_rng(0))
    assert outcome.accepted_tokens == [1]
    assert outcome.bonus_token == 1


def test_zero_temperature_rejection_emits_base_argmax():
    p = np.array([0.1, 0.2, 0.7])
    tree = one_level_tree([0.2, 0.5, 0.3], [1], p)
    outcome = verify_tree(tree, 0.0, np.random.default_rng(0))
    assert outcome.m == 0
    assert outcome.bonus_token == 2


def test_verify_requires_base_logits_and_children():
    tree = one_level_tree([0.5, 0.5], [0], [0.5, 0.5])
    tree.root_base_logits = None
    with pytest.raises(StructuralError):
        verify_tree(tree, 1.0, np.random.default_rng(0))
    empty = DraftTree(widths=[1], root_logits=np.zeros(2, dtype=np.float32), root_probs=None)
    with pytest.raises(StructuralError):
        verify_tree(empty, 0.0, np.random.default_rng(0))


def test_verify_tree_empirical_level_distribution():
    p = np.array([0.45, 0.35, 0.15, 0.05])
    q = np.array([0.1, 0.2, 0.3, 0.4])
    rng = np.random.default_rng(42)
    counts = np.zeros(4)
    runs = 20000
    for _ in range(runs):
        first = sample_from(q, rng)
        q2 = q.copy()
        q2[first] = 0
        q2 /= q2.sum()
        second = sample_from(q2, rng)
        tree = one_level_tree(q, [first, second], p)
        # a leaf acceptance samples a bonus from p below it; only the first emitted token matters here
        outcome = verify_tree(tree, 1.0, rng)
        token = outcome.accepted_tokens[0] if outcome.m else outcome.bonus_token
        counts[token] += 1
    np.testing.assert_allclose(counts / runs, p, atol=0.015)


def chain_tree(tokens, drafts, targets):
    """Width-1 tree; drafts[i] drew tokens[i], targets[i] is the base distribution before it"""
    tree = DraftTree(widths=[1] * len(tokens), root_logits=logits_for(drafts[0]), root_probs=drafts[0])
    tree.root_base_logits = logits_for(targets[0])
    for i, token in enumerate(tokens):
        node = TreeNode(token=token, parent=i - 1, depth=i + 1, base_logits=logits_for(targets[i + 1]),
                        draft_probs=drafts[i + 1] if i + 1 < len(tokens) else None)
        if i == 0:
            tree.root_children.append(0)
        else:
            tree.nodes[i - 1].children.append(i)
        tree.nodes.append(node)
    return tree


def chain_verification(tokens, drafts, targets, rng):
    """Token-by-token accept/reject with a residual bonus on the first rejection"""
    accepted, uniforms = [], []
    for i, token in enumerate(tokens):
        p = to_probs(logits_for(targets[i]), 1.0)
        q = drafts[i]
        u = float(rng.random())
        uniforms.append(u)
        if u < min(1.0, p[token] / q[token]):
            accepted.append(token)
            continue
        res = residual(p, q)
        return accepted, sample_from(p if res is None else res, rng), uniforms
    return accepted, sample_from(to_probs(logits_for(targets[-1]), 1.0), rng), uniforms


def test_width_one_tree_matches_chain_verification():
    depth, vocab = 5, 6
    accepted_counts = set()
    for seed in range(200):
        setup = np.random.default_rng(seed)
        drafts = [setup.dirichlet(np.ones(vocab)) for _ in range(depth)]
        targets = [setup.dirichlet(np.ones(vocab)) for _ in range(depth + 1)]
        tokens = [int(setup.choice(vocab, p=q)) for q in drafts]
        outcome = verify_tree(chain_tree(tokens, drafts, targets), 1.0, np.random.default_rng(1000 + seed))
        accepted, bonus, uniforms = chain_verification(tokens, drafts, targets, np.random.default_rng(1000 + seed))
        assert outcome.accepted_tokens == accepted
        assert outcome.bonus_token == bonus
        assert outcome.uniforms == uniforms
        assert outcome.accepted_path == list(range(len(accepted)))
        accepted_counts.add(outcome.m)
    assert {0, depth} <= accepted_counts
