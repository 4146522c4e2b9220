#!/usr/bin/env python3
"""Shared pytest setup: app/ on sys.path, seeded toy model fixtures."""
import os
import sys

import pytest

APP_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "app")
if APP_DIR not in sys.path:
    sys.path.insert(0, APP_DIR)

from toy_transformer import ModelConfig, ToyTransformer, init_model, make_truncated_draft  # noqa: E402

collect_ignore_glob = ["examples/*"]

SLOW = os.getenv("ESPEC_SLOW_TESTS") == "1"


def small_config(n_layers: int = 4, seed: int = 0, **kw) -> ModelConfig:
    cfg = dict(d_model=16, n_heads=2, d_head=8, d_mlp=32, max_positions=256, init_std=0.1)
    cfg.update(kw)
    return ModelConfig(n_layers=n_layers, seed=seed, **cfg)


@pytest.fixture
def base_weights():
    return init_model(small_config(n_layers=8, seed=1234))


@pytest.fixture
def base_model(base_weights):
    return ToyTransformer(base_weights)


@pytest.fixture
def draft_model(base_weights):
    return ToyTransformer(make_truncated_draft(base_weights, 6))
