#!/usr/bin/env python3
"""
Drafter execution: layer-sequential forward, layer-parallel fuzzy forward,
tree drafting and cosine-similarity probing of fuzzy against precise states.

Within a parallel group every attention layer reads the group's entry hidden
state h1. Under the "attention" strategy the residual/MLP chain stays
sequential; under "full_layer" each layer's MLP also reads h1 and the group
output is h1 plus the summed block outputs.
"""
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import ConfigError, ShapeError
from kv_cache import TAIL, KvCache
from layer_planner import LayerPlan, plan_groups
from tensor_math import cosine_sim
from toy_transformer import AttentionParts, LayerIO, ToyTransformer
from verifier import clamp_and_renormalize, sample_from, to_probs

logger = logging.getLogger(__name__)

STRATEGIES = ("attention", "full_layer")
PROBE_QUANTITIES = ("h", "q", "k", "v", "attnoutput")

ForwardHook = Callable[[str, int, float], None]


@dataclass
class SimilarityStats:
    """Running means of cosine similarity between precise and fuzzy quantities"""
    sums: Dict[str, float] = field(default_factory=lambda: {q: 0.0 for q in PROBE_QUANTITIES})
    counts: Dict[str, int] = field(default_factory=lambda: {q: 0 for q in PROBE_QUANTITIES})

    def add(self, quantity: str, value: float):
        self.sums[quantity] += value
        self.counts[quantity] += 1

    def add_rows(self, quantity: str, precise: np.ndarray, fuzzy: np.ndarray):
        for a, b in zip(precise, fuzzy):
            self.add(quantity, cosine_sim(a, b))

    def merge(self, other: "SimilarityStats"):
        for q in PROBE_QUANTITIES:
            self.sums[q] += other.sums[q]
            self.counts[q] += other.counts[q]

    @property
    def samples(self) -> int:
        return self.counts["h"]

    def means(self) -> Dict[str, float]:
        # no parallelised layer means no approximation
        return {q: (self.sums[q] / self.counts[q] if self.counts[q] else 1.0)
                for q in PROBE_QUANTITIES}


@dataclass
class TreeNode:
    token: int
    parent: int  # node index, or -1 for a child of the root
    depth: int
    draft_row: Optional[int] = None
    base_row: Optional[int] = None
    draft_logits: Optional[np.ndarray] = None
    draft_probs: Optional[np.ndarray] = None
    base_logits: Optional[np.ndarray] = None
    children: List[int] = field(default_factory=list)


@dataclass
class DraftTree:
    """Token tree; nodes are stored level by level, children in draw order"""
    widths: List[int]
    root_logits: np.ndarray
    root_probs: Optional[np.ndarray]
    root_children: List[int] = field(default_factory=list)
    nodes: List[TreeNode] = field(default_factory=list)
    root_base_logits: Optional[np.ndarray] = None

    @property
    def depth(self) -> int:
        return len(self.widths)

    def level(self, depth: int) -> List[int]:
        return [i for i, node in enumerate(self.nodes) if node.depth == depth]

    def full_size(self) -> int:
        total, width = 0, 1
        for w in self.widths:
            width *= w
            total += width
        return total


def select_children(logits: np.ndarray, probs: Optional[np.ndarray], k: int,
                    temperature: float, rng: np.random.Generator) -> List[int]:
    """
    Temperature 0: the k highest draft scores, lowest token id first on ties.
    Otherwise k sequential draws without replacement from the draft distribution.
    """
    vocab = len(logits)
    if k > vocab:
        raise ConfigError(f"tree width {k} exceeds vocabulary size {vocab}")
    if temperature == 0:
        order = np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")
        return [int(t) for t in order[:k]]
    chosen = []
    q = probs
    for _ in range(k):
        if q is None:
            break
        token = sample_from(q, rng)
        chosen.append(token)
        q = clamp_and_renormalize(q, token)
    return chosen


def default_workers(plan: Optional[LayerPlan]) -> int:
    env = os.getenv("ESPEC_WORKERS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"ESPEC_WORKERS must be an integer, got '{env}'")
        if value < 1:
            raise ConfigError("ESPEC_WORKERS must be >= 1")
        return value
    return plan.max_group if plan is not None else 1


class ForwardRunner:
    """Layer-sequential forward over a model's cache; also used for the base model"""

    def __init__(self, model: ToyTransformer):
        self.model = model
        self.sequential_forwards = 0
        self.fuzzy_forwards = 0

    def _block(self, layer: int, h: np.ndarray, cache: KvCache, rows: Sequence[int],
               mask: np.ndarray, calibrate: bool, trace: Optional[List[LayerIO]],
               capture: Optional[Dict[int, dict]]) -> np.ndarray:
        model = self.model
        x = model.attn_input(layer, h)
        parts = model.attention_parts(layer, x, cache.view(layer, calibrate), rows, mask)
        h_mid = h + parts.out
        h_out = h_mid + model.mlp_forward(layer, model.mlp_input(layer, h_mid))
        if trace is not None:
            trace.append(LayerIO(layer, h, parts.out, h_mid, h_out, mlp_in=h_mid))
        if capture is not None:
            capture[layer] = {"h": h, "q": parts.q, "k": parts.k, "v": parts.v, "attnoutput": parts.out}
        return h_out

    def forward_sequential(self, h: np.ndarray, cache: KvCache, rows: Sequence[int],
                           mask: np.ndarray, calibrate: bool = False,
                           trace: Optional[List[LayerIO]] = None,
                           capture: Optional[Dict[int, dict]] = None,
                           count: bool = True) -> np.ndarray:
        if h.shape != (len(rows), self.model.config.d_model):
            raise ShapeError(f"hidden input {h.shape} does not match {len(rows)} rows")
        for layer in range(self.model.n_layers):
            h = self._block(layer, h, cache, rows, mask, calibrate, trace, capture)
        if count:
            self.sequential_forwards += 1
        return h


class DraftEngine(ForwardRunner):
    """Runs the drafter under a LayerPlan with a worker pool for grouped attention"""

    def __init__(self, model: ToyTransformer, plan: Optional[LayerPlan] = None,
                 strategy: str = "attention", workers: Optional[int] = None,
                 schedule_seed: Optional[int] = None):
        super().__init__(model)
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown parallel strategy '{strategy}', expected one of {STRATEGIES}")
        self.plan = plan if plan is not None else plan_groups(model.n_layers, 1)
        if self.plan.n_layers != model.n_layers:
            raise ConfigError(
                f"plan covers {self.plan.n_layers} layers but the drafter has {model.n_layers}")
        self.strategy = strategy
        self.workers = workers if workers is not None else default_workers(self.plan)
        if self.workers < 1:
            raise ConfigError("worker count must be >= 1")
        self.schedule_seed = schedule_seed
        self._pool: Optional[ThreadPoolExecutor] = None
        self._pool_lock = threading.Lock()
        logger.info(f"DRAFT ENGINE: plan {self.plan} ({self.strategy}), {self.workers} workers")

    # ------------------------------------------------------------------
    # worker pool
    # ------------------------------------------------------------------
    def _get_pool(self) -> ThreadPoolExecutor:
        with self._pool_lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.workers,
                                                thread_name_prefix="espec-attn")
            return self._pool

    def close(self):
        with self._pool_lock:
            if self._pool is not None:
                self._pool.shutdown(wait=True)
                self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _run_group(self, tasks: List[Callable[[], object]]) -> List[object]:
        """Run tasks on the pool; results come back in task order"""
        order = list(range(len(tasks)))
        if self.schedule_seed is not None:
            order = [int(i) for i in np.random.default_rng(self.schedule_seed).permutation(len(tasks))]
        if self.workers == 1:
            results = {i: tasks[i]() for i in order}
        else:
            pool = self._get_pool()
            futures = {i: pool.submit(tasks[i]) for i in order}
            results = {i: f.result() for i, f in futures.items()}
        return [results[i] for i in range(len(tasks))]

    # ------------------------------------------------------------------
    # fuzzy forward
    # ------------------------------------------------------------------
    def _group_attention(self, group: Sequence[int], h1: np.ndarray, cache: KvCache,
                         rows: Sequence[int], mask: np.ndarray) -> List[AttentionParts]:
        model = self.model

        def make_task(layer: int):
            def task():
                x = model.attn_input(layer, h1)
                return model.attention_parts(layer, x, cache.view(layer), rows, mask)
            return task

        return self._run_group([make_task(layer) for layer in group])

    def forward_fuzzy(self, h: np.ndarray, cache: KvCache, rows: Sequence[int],
                      mask: np.ndarray, stats: Optional[SimilarityStats] = None,
                      trace: Optional[List[LayerIO]] = None) -> np.ndarray:
        model = self.model
        if h.shape != (len(rows), model.config.d_model):
            raise ShapeError(f"hidden input {h.shape} does not match {len(rows)} rows")
        precise = None
        if stats is not None:
            precise = {}
            self.forward_sequential(h, cache.clone(), rows, mask, capture=precise, count=False)
        for group in self.plan.groups:
            if len(group) == 1:
                h = self._block(group[0], h, cache, rows, mask, False, trace, None)
                continue
            h1 = h
            parts = self._group_attention(group, h1, cache, rows, mask)
            if self.strategy == "attention":
                for layer, part in zip(group, parts):
                    h_mid = h + part.out
                    h_out = h_mid + model.mlp_forward(layer, model.mlp_input(layer, h_mid))
                    if trace is not None:
                        trace.append(LayerIO(layer, h, part.out, h_mid, h_out, mlp_in=h_mid))
                    h = h_out
            else:
                mlp_outs = self._run_group([
                    (lambda layer=layer, part=part:
                     model.mlp_forward(layer, model.mlp_input(layer, h1 + part.out)))
                    for layer, part in zip(group, parts)
                ])
                for layer, part, mlp_out in zip(group, parts, mlp_outs):
                    h_mid = h + part.out
                    h_out = h_mid + mlp_out
                    if trace is not None:
                        trace.append(LayerIO(layer, h, part.out, h_mid, h_out, mlp_in=h1 + part.out))
                    h = h_out
            if precise is not None:
                for layer, part in zip(group, parts):
                    ref = precise[layer]
                    stats.add_rows("h", ref["h"], h1)
                    stats.add_rows("q", ref["q"], part.q)
                    stats.add_rows("k", ref["k"], part.k)
                    stats.add_rows("v", ref["v"], part.v)
                    stats.add_rows("attnoutput", ref["attnoutput"], part.out)
        self.fuzzy_forwards += 1
        return h

    # ------------------------------------------------------------------
    # tree drafting
    # ------------------------------------------------------------------
    def draft_tree(self, cache: KvCache, root_logits: np.ndarray, widths: Sequence[int],
                   temperature: float, rng: np.random.Generator, fuzzy: bool = True,
                   stats: Optional[SimilarityStats] = None,
                   on_forward: Optional[ForwardHook] = None) -> DraftTree:
        """
        Grow a tree of depth len(widths) below the committed tail. Root children
        come from root_logits (the pass over the pending tokens); each further
        level is one token-parallel forward over the current frontier. The
        deepest level is never fed forward, so the drafter stages every node
        above it.
        """
        vocab = self.model.config.vocab_size
        for w in widths:
            if w < 1 or w > vocab:
                raise ConfigError(f"tree width {w} must lie in 1..{vocab}")
        root_probs = to_probs(root_logits, temperature) if temperature > 0 else None
        tree = DraftTree(widths=list(widths), root_logits=root_logits, root_probs=root_probs)
        for token in select_children(root_logits, root_probs, widths[0], temperature, rng):
            tree.root_children.append(len(tree.nodes))
            tree.nodes.append(TreeNode(token=token, parent=-1, depth=1))

        for depth in range(1, len(widths)):
            frontier = tree.level(depth)
            if not frontier:
                break
            parents = [TAIL if tree.nodes[i].parent == -1 else tree.nodes[tree.nodes[i].parent].draft_row
                       for i in frontier]
            start = time.perf_counter()
            rows = cache.stage_append(parents, fuzzy=fuzzy)
            for i, row in zip(frontier, rows):
                tree.nodes[i].draft_row = row
            mask = cache.build_tree_mask().rows(rows)
            h = self.model.embed([tree.nodes[i].token for i in frontier])
            if fuzzy:
                h = self.forward_fuzzy(h, cache, rows, mask, stats=stats)
            else:
                h = self.forward_sequential(h, cache, rows, mask)
            logits = self.model.lm_logits(h)
            for i, row_logits in zip(frontier, logits):
                node = tree.nodes[i]
                node.draft_logits = row_logits
                node.draft_probs = to_probs(row_logits, temperature) if temperature > 0 else None
                for token in select_children(row_logits, node.draft_probs, widths[depth], temperature, rng):
                    node.children.append(len(tree.nodes))
                    tree.nodes.append(TreeNode(token=token, parent=i, depth=depth + 1))
            if on_forward is not None:
                on_forward("fuzzy" if fuzzy else "sequential", len(frontier), time.perf_counter() - start)
        return tree


def probe_similarity(model: ToyTransformer, lp_sizes: Sequence[int], corpus: Sequence[Sequence[int]],
                     window: int = 16, strategy: str = "attention",
                     workers: Optional[int] = None) -> pd.DataFrame:
    """
    For every layer-parallel size: precise prefill of each sequence's prefix,
    then one fuzzy pass over its last `window` tokens compared with a precise
    pass over the same rows. Returns columns lp_size,h,q,k,v,attnoutput.
    """
    sequences = [list(s) for s in corpus if len(s) >= 2]
    if not sequences:
        raise ConfigError("similarity probe needs a non-empty corpus")
    rows_out = []
    for lp in lp_sizes:
        plan = plan_groups(model.n_layers, lp)
        stats = SimilarityStats()
        with DraftEngine(model, plan, strategy=strategy, workers=workers) as engine:
            for seq in sequences:
                w = min(window, len(seq) - 1)
                prefix, tail = seq[:-w], seq[-w:]
                cache = KvCache(model.n_layers, model.config.d_model, model.config.max_positions)
                prefix_rows = cache.stage_append([TAIL] + list(range(len(prefix) - 1)), fuzzy=False)
                engine.forward_sequential(model.embed(prefix), cache, prefix_rows,
                                          cache.build_tree_mask().rows(prefix_rows))
                cache.commit_path(prefix_rows)
                c = cache.committed_len
                tail_rows = cache.stage_append([TAIL] + [c + i for i in range(len(tail) - 1)], fuzzy=True)
                engine.forward_fuzzy(model.embed(tail), cache, tail_rows,
                                     cache.build_tree_mask().rows(tail_rows), stats=stats)
        means = stats.means()
        logger.info(f"DRAFT ENGINE: probe N={lp} over {stats.samples} samples: "
                    + ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        rows_out.append({"lp_size": lp, **means})
    return pd.DataFrame(rows_out, columns=["lp_size", *PROBE_QUANTITIES])
