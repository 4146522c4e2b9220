#!/usr/bin/env python3
"""
Generation loop for vanilla decoding, speculative decoding (chain and tree)
and EasySpec.

Each model cache holds some prefix of the emitted sequence; the tokens it does
not yet hold are its pending tokens. The first pass of every iteration runs
over the pending tokens, so the prompt is processed by the first iteration and
no forward falls outside the draft / verify / calibrate stages.

EasySpec iteration:
  1. calibrate: one sequential drafter pass over the pending tokens (accepted
     tokens of the previous iteration plus its bonus token) writing precise
     K/V; its last row yields the first tree level
  2. draft: n-1 fuzzy tree levels
  3. verify: one base pass over the base's pending tokens and the whole tree
  4. commit: the base keeps the accepted path, the drafter drops every staged row
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from cost_sim import CostModel, CostParams, SimClock
from draft_engine import DraftEngine, DraftTree, ForwardRunner, SimilarityStats
from errors import ConfigError
from kv_cache import TAIL, KvCache
from layer_planner import LayerPlan, format_plan, parse_plan_override, plan_groups
from metrics_report import IterationTrace, RunReport, aggregate
from run_config import RunConfig
from tensor_math import seeded_rng
from toy_transformer import ToyTransformer, encode_bytes
from verifier import VerificationOutcome, sample_from, to_probs, verify_tree

logger = logging.getLogger(__name__)


@dataclass
class GenerationState:
    tokens: List[int]
    prompt_len: int
    base_cache: KvCache
    draft_cache: Optional[KvCache]
    rng: np.random.Generator
    clock: SimClock
    traces: List[IterationTrace] = field(default_factory=list)
    stats: Optional[SimilarityStats] = None

    @property
    def emitted(self) -> int:
        return len(self.tokens) - self.prompt_len

    def new_tokens(self) -> List[int]:
        return self.tokens[self.prompt_len:]


def new_cache(model: ToyTransformer) -> KvCache:
    cfg = model.config
    return KvCache(cfg.n_layers, cfg.d_model, cfg.max_positions)


def chain_parents(cache: KvCache, count: int) -> List[int]:
    """Parents for a chain staged directly below the committed tail"""
    start = cache.total_len
    return [TAIL if cache.staged_len == 0 else start - 1] + [start + i for i in range(count - 1)]


class EasySpecOrchestrator:
    """One generation at a time; holds the base runner, the drafter engine and the cost model"""

    def __init__(self, base: ToyTransformer, draft: Optional[ToyTransformer], run_config: RunConfig,
                 cost_params: Optional[CostParams] = None, workers: Optional[int] = None):
        run_config.validate()
        self.config = run_config
        self.base = base
        self.draft = draft
        self.cost = CostModel(cost_params or CostParams())
        self.base_runner = ForwardRunner(base)
        self.widths = run_config.effective_widths()
        self.plan: Optional[LayerPlan] = None
        self.engine: Optional[DraftEngine] = None
        if run_config.algorithm != "vanilla":
            if draft is None:
                raise ConfigError(f"algorithm '{run_config.algorithm}' needs a draft model")
            if draft.config.vocab_size != base.config.vocab_size:
                raise ConfigError("draft and base vocabularies differ")
            if run_config.algorithm == "easyspec":
                if run_config.plan:
                    self.plan = parse_plan_override(run_config.plan, draft.n_layers)
                else:
                    self.plan = plan_groups(draft.n_layers, run_config.lp_size)
            else:
                self.plan = plan_groups(draft.n_layers, 1)
            self.engine = DraftEngine(draft, self.plan, strategy=run_config.strategy, workers=workers)
        logger.info(f"ORCHESTRATOR: {run_config.algorithm} n={run_config.n} widths={self.widths} "
                    f"plan={format_plan(self.plan) if self.plan else '-'}")

    def close(self):
        if self.engine is not None:
            self.engine.close()

    # ------------------------------------------------------------------
    # state
    # ------------------------------------------------------------------
    def new_state(self, prompt_tokens: Sequence[int], seed: Optional[int] = None) -> GenerationState:
        if not prompt_tokens:
            raise ConfigError("prompt must contain at least one token")
        seed = self.config.seed if seed is None else seed
        return GenerationState(
            tokens=list(prompt_tokens),
            prompt_len=len(prompt_tokens),
            base_cache=new_cache(self.base),
            draft_cache=new_cache(self.draft) if self.engine is not None else None,
            rng=seeded_rng(seed),
            clock=SimClock(self.cost.params.devices),
            stats=SimilarityStats() if self.config.probe else None,
        )

    def _check_capacity(self, prompt_len: int, max_new: int):
        need = prompt_len + max_new + self.config.n + 1
        models = [self.base] + ([self.draft] if self.engine is not None else [])
        limit = min(m.config.max_positions for m in models)
        if need > limit:
            raise ConfigError(f"prompt of {prompt_len} tokens plus {max_new} new tokens "
                              f"exceeds max_positions {limit}")

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------
    def _draft_pending(self, state: GenerationState, mode: str) -> np.ndarray:
        """Run the drafter over its pending tokens and commit them; returns the last row's logits"""
        cache = state.draft_cache
        cache.discard_staged()
        pending = state.tokens[cache.committed_len:]
        rows = cache.stage_append(chain_parents(cache, len(pending)), fuzzy=(mode == "fuzzy"))
        mask = cache.build_tree_mask().rows(rows)
        h = self.draft.embed(pending)
        if mode == "fuzzy":
            h = self.engine.forward_fuzzy(h, cache, rows, mask, stats=state.stats)
        else:
            h = self.engine.forward_sequential(h, cache, rows, mask, calibrate=(mode == "calibrate"))
        cache.commit_path(rows)
        return self.draft.lm_logits(h[-1:])[0]

    def _record_draft(self, state: GenerationState, trace: IterationTrace, stage: str,
                      kind: str, s_tokens: int, wall: float):
        if kind == "fuzzy":
            units = self.cost.simulate_draft_group(self.plan, s_tokens, self.config.strategy)
            busy = self.cost.fuzzy_draft_busy(self.plan, s_tokens, self.config.strategy)
        else:
            units = self.cost.sequential_draft_time(self.draft.n_layers, s_tokens)
            busy = self.cost.sequential_draft_busy(self.draft.n_layers, s_tokens)
        state.clock.record(stage, units, busy)
        trace.add(stage, wall, units)

    def _verify(self, state: GenerationState, tree: DraftTree, trace: IterationTrace) -> Tuple[VerificationOutcome, List[int]]:
        """One base pass over pending tokens plus every tree node, then tree verification"""
        start = time.perf_counter()
        cache = state.base_cache
        cache.discard_staged()
        pending = state.tokens[cache.committed_len:]
        pending_rows = cache.stage_append(chain_parents(cache, len(pending)), fuzzy=False)
        parents = []
        for node in tree.nodes:
            parents.append(pending_rows[-1] if node.parent == -1 else tree.nodes[node.parent].base_row)
            node.base_row = cache.total_len + len(parents) - 1
        node_rows = cache.stage_append(parents, fuzzy=False) if parents else []
        rows = pending_rows + node_rows
        mask = cache.build_tree_mask().rows(rows)
        h = self.base_runner.forward_sequential(self.base.embed(pending + [n.token for n in tree.nodes]),
                                                cache, rows, mask)
        logits = self.base.lm_logits(h)
        tree.root_base_logits = logits[len(pending) - 1]
        for i, node in enumerate(tree.nodes):
            node.base_logits = logits[len(pending) + i]
        outcome = verify_tree(tree, self.config.temperature, state.rng)
        wall = time.perf_counter() - start
        s_tokens = len(rows)
        units = self.cost.base_forward_time(s_tokens)
        state.clock.record("verify", units, self.cost.base_forward_busy(s_tokens))
        trace.add("verify", wall, units)
        trace.base_forwards += 1
        return outcome, pending_rows

    def _emit(self, state: GenerationState, trace: IterationTrace, new: List[int], max_new: int):
        room = max_new - state.emitted
        new = new[:room]
        state.tokens.extend(new)
        trace.tokens_emitted = len(new)
        # a capped iteration may have committed rows for tokens that were cut
        for cache in (state.base_cache, state.draft_cache):
            if cache is not None and cache.committed_len > len(state.tokens):
                cache.truncate_committed(len(state.tokens))

    # ------------------------------------------------------------------
    # iterations
    # ------------------------------------------------------------------
    def run_iteration_vanilla(self, state: GenerationState, max_new: int) -> IterationTrace:
        trace = IterationTrace()
        start = time.perf_counter()
        cache = state.base_cache
        pending = state.tokens[cache.committed_len:]
        rows = cache.stage_append(chain_parents(cache, len(pending)), fuzzy=False)
        h = self.base_runner.forward_sequential(self.base.embed(pending), cache, rows,
                                                cache.build_tree_mask().rows(rows))
        cache.commit_path(rows)
        logits = self.base.lm_logits(h[-1:])[0]
        if self.config.temperature == 0:
            token = int(np.argmax(logits))
        else:
            token = sample_from(to_probs(logits, self.config.temperature), state.rng)
        units = self.cost.base_forward_time(len(pending))
        state.clock.record("verify", units, self.cost.base_forward_busy(len(pending)))
        trace.add("verify", time.perf_counter() - start, units)
        trace.base_forwards = 1
        trace.bonus_token = token
        self._emit(state, trace, [token], max_new)
        return trace

    def _speculate(self, state: GenerationState, max_new: int, first_mode: str, tree_fuzzy: bool) -> IterationTrace:
        trace = IterationTrace(n_drafted=self.config.n)
        engine = self.engine
        seq0, fuzzy0 = engine.sequential_forwards, engine.fuzzy_forwards

        pending_len = len(state.tokens) - state.draft_cache.committed_len
        start = time.perf_counter()
        root_logits = self._draft_pending(state, first_mode)
        stage = "calibrate" if first_mode == "calibrate" else "draft"
        kind = "fuzzy" if first_mode == "fuzzy" else "sequential"
        self._record_draft(state, trace, stage, kind, pending_len, time.perf_counter() - start)

        def on_forward(kind: str, s_tokens: int, wall: float):
            self._record_draft(state, trace, "draft", kind, s_tokens, wall)

        tree = engine.draft_tree(state.draft_cache, root_logits, self.widths, self.config.temperature,
                                 state.rng, fuzzy=tree_fuzzy, stats=state.stats, on_forward=on_forward)
        outcome, pending_rows = self._verify(state, tree, trace)

        state.base_cache.commit_path(pending_rows + [tree.nodes[i].base_row for i in outcome.accepted_path])
        if first_mode == "calibrate":
            state.draft_cache.discard_staged(keep_none=True)
        else:
            kept = []
            for i in outcome.accepted_path:
                if tree.nodes[i].draft_row is None:
                    break
                kept.append(tree.nodes[i].draft_row)
            state.draft_cache.commit_path(kept)

        trace.m = outcome.m
        trace.accepted_tokens = list(outcome.accepted_tokens)
        trace.bonus_token = outcome.bonus_token
        trace.sequential_forwards = engine.sequential_forwards - seq0
        trace.fuzzy_forwards = engine.fuzzy_forwards - fuzzy0
        self._emit(state, trace, outcome.accepted_tokens + [outcome.bonus_token], max_new)
        logger.debug(f"ORCHESTRATOR: accepted {outcome.m}/{self.config.n}, "
                     f"sim units {trace.sim_total:.1f}")
        return trace

    def run_iteration_easyspec(self, state: GenerationState, max_new: int) -> IterationTrace:
        first = "calibrate" if self.config.calibration else "fuzzy"
        return self._speculate(state, max_new, first, tree_fuzzy=True)

    def run_iteration_sd(self, state: GenerationState, max_new: int) -> IterationTrace:
        # chain and tree share one path; widths decide the shape
        return self._speculate(state, max_new, "sequential", tree_fuzzy=False)

    def step(self, state: GenerationState, max_new: int) -> IterationTrace:
        algorithm = self.config.algorithm
        if algorithm == "vanilla":
            trace = self.run_iteration_vanilla(state, max_new)
        elif algorithm == "easyspec":
            trace = self.run_iteration_easyspec(state, max_new)
        else:
            trace = self.run_iteration_sd(state, max_new)
        state.traces.append(trace)
        return trace

    # ------------------------------------------------------------------
    # generation
    # ------------------------------------------------------------------
    def vanilla_units(self, prompt_len: int, emitted: int) -> float:
        """Simulated time of a vanilla run emitting the same number of tokens"""
        total = 0.0
        for i in range(emitted):
            total += self.cost.base_forward_time(prompt_len if i == 0 else 1)
        return total

    def generate_tokens(self, prompt_tokens: Sequence[int], seed: Optional[int] = None,
                        max_new_tokens: Optional[int] = None) -> GenerationState:
        max_new = self.config.max_new_tokens if max_new_tokens is None else max_new_tokens
        if max_new < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        self._check_capacity(len(prompt_tokens), max_new)
        state = self.new_state(prompt_tokens, seed)
        while state.emitted < max_new:
            self.step(state, max_new)
        return state

    def build_report(self, state: GenerationState) -> RunReport:
        cfg = self.config
        return aggregate(
            state.traces, self.vanilla_units(state.prompt_len, state.emitted),
            algorithm=cfg.algorithm, n=cfg.n if cfg.algorithm != "vanilla" else 0,
            widths=self.widths if cfg.algorithm != "vanilla" else [],
            lp_size=self.plan.lp_size if cfg.algorithm == "easyspec" else 1,
            plan=format_plan(self.plan) if self.plan else "",
            calibration=cfg.calibration and cfg.algorithm == "easyspec",
            temperature=cfg.temperature, seed=cfg.seed,
            similarity=state.stats.means() if state.stats is not None else None,
        )

    def generate(self, prompt: bytes) -> Tuple[List[int], RunReport, GenerationState]:
        state = self.generate_tokens(encode_bytes(prompt))
        report = self.build_report(state)
        logger.info(f"ORCHESTRATOR: {self.config.algorithm} emitted {state.emitted} tokens, "
                    f"alpha={report.alpha:.3f}, sim speedup={report.sim['total_speedup_vs_vanilla']:.3f}")
        return state.new_tokens(), report, state
