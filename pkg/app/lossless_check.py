#!/usr/bin/env python3
"""
Losslessness suites.

analytic: the one-step marginal of draft-then-verify equals the base
distribution for random and adversarial pairs, and the multi-candidate tree
level reproduces the base distribution by exhaustive enumeration.

statistical: empirical per-position token marginals of speculative runs are
compared with the exact vanilla marginals; the pass bound is the mean plus
three standard deviations of the total-variation distance of an equally sized
multinomial sample drawn from the exact distribution.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from draft_engine import ForwardRunner
from easyspec_orchestrator import EasySpecOrchestrator, new_cache
from errors import ConfigError
from kv_cache import TAIL
from run_config import RunConfig
from tensor_math import seeded_rng
from toy_transformer import ToyTransformer
from verifier import induced_step_distribution, to_probs, tree_level_output_distribution

logger = logging.getLogger(__name__)


def random_distribution(rng: np.random.Generator, vocab: int) -> np.ndarray:
    p = rng.random(vocab) ** 3
    return p / p.sum()


def adversarial_drafts(rng: np.random.Generator, p: np.ndarray) -> List[np.ndarray]:
    vocab = len(p)
    one_hot = np.zeros(vocab)
    one_hot[int(rng.integers(vocab))] = 1.0
    starve = rng.random(vocab) + 0.1
    starve[int(np.argmax(p))] = 1e-12
    return [one_hot, starve / starve.sum()]


def analytic_suite(vocab: int = 8, trials: int = 1000, seed: int = 0,
                   tree_vocab: int = 4, tree_trials: int = 50, tol: float = 1e-6) -> Dict:
    if vocab < 2 or trials < 1:
        raise ConfigError("analytic suite needs vocab >= 2 and trials >= 1")
    rng = seeded_rng(seed)
    max_err = 0.0
    checked = 0
    for _ in range(trials):
        p = random_distribution(rng, vocab)
        for q in [random_distribution(rng, vocab)] + adversarial_drafts(rng, p):
            out = induced_step_distribution(p, q)
            max_err = max(max_err, float(np.max(np.abs(out - p))))
            checked += 1
    tree_err = 0.0
    tree_vocab = min(tree_vocab, vocab)
    for _ in range(tree_trials):
        p = random_distribution(rng, tree_vocab)
        q = random_distribution(rng, tree_vocab)
        for width in (1, 2, 3):
            out = tree_level_output_distribution(p, q, width)
            tree_err = max(tree_err, float(np.max(np.abs(out - p))))
    passed = max_err <= tol and tree_err <= tol
    logger.info(f"LOSSLESS CHECK: analytic pairs={checked} max_err={max_err:.2e} "
                f"tree_max_err={tree_err:.2e} -> {'PASS' if passed else 'FAIL'}")
    return {"pairs": checked, "max_error": max_err, "tree_max_error": tree_err, "passed": passed}


def exact_vanilla_marginals(base: ToyTransformer, prompt_tokens: Sequence[int],
                            temperature: float, tokens: int = 2) -> List[np.ndarray]:
    """Exact distribution of each of the first `tokens` emitted tokens under vanilla sampling"""
    if tokens not in (1, 2):
        raise ConfigError("exact marginals are available for the first one or two tokens")
    runner = ForwardRunner(base)
    cache = new_cache(base)
    rows = cache.stage_append([TAIL] + list(range(len(prompt_tokens) - 1)), fuzzy=False)
    h = runner.forward_sequential(base.embed(prompt_tokens), cache, rows, cache.build_tree_mask().rows(rows))
    cache.commit_path(rows)
    first = to_probs(base.lm_logits(h[-1:])[0], temperature)
    out = [first]
    if tokens == 2:
        second = np.zeros_like(first)
        for token in np.flatnonzero(first > 0):
            branch = cache.clone()
            row = branch.stage_append([TAIL], fuzzy=False)
            hb = runner.forward_sequential(base.embed([int(token)]), branch, row,
                                           branch.build_tree_mask().rows(row))
            second += first[token] * to_probs(base.lm_logits(hb)[0], temperature)
        out.append(second)
    return out


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())


def sampling_bound(p: np.ndarray, samples: int, replicates: int, rng: np.random.Generator) -> float:
    draws = rng.multinomial(samples, p, size=replicates) / samples
    tvs = 0.5 * np.abs(draws - p[None, :]).sum(axis=1)
    return float(tvs.mean() + 3.0 * tvs.std())


@dataclass
class StatisticalResult:
    algorithm: str
    runs: int
    tv: List[float] = field(default_factory=list)
    bound: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t <= b for t, b in zip(self.tv, self.bound))


def empirical_marginals(orchestrator: EasySpecOrchestrator, prompt_tokens: Sequence[int],
                        runs: int, tokens: int, seed: int) -> List[np.ndarray]:
    vocab = orchestrator.base.config.vocab_size
    counts = np.zeros((tokens, vocab), dtype=np.int64)
    for r in range(runs):
        state = orchestrator.generate_tokens(prompt_tokens, seed=seed + r, max_new_tokens=tokens)
        for pos, token in enumerate(state.new_tokens()[:tokens]):
            counts[pos, token] += 1
    return [c / runs for c in counts]


def statistical_suite(base: ToyTransformer, draft: ToyTransformer, prompt_tokens: Sequence[int],
                      runs: int = 2000, tokens: int = 2, run_config: Optional[RunConfig] = None,
                      include_vanilla: bool = True, replicates: int = 200, seed: int = 0,
                      workers: Optional[int] = None) -> List[StatisticalResult]:
    if runs < 1:
        raise ConfigError("statistical suite needs at least one run")
    cfg = run_config or RunConfig(algorithm="easyspec", n=3, widths=[2, 2, 2], lp_size=2,
                                  temperature=0.8, calibration=True)
    if cfg.temperature <= 0:
        raise ConfigError("the statistical suite needs a positive temperature")
    exact = exact_vanilla_marginals(base, prompt_tokens, cfg.temperature, tokens)
    bound_rng = seeded_rng(seed + 7919)
    bounds = [sampling_bound(p, runs, replicates, bound_rng) for p in exact]

    configs = [cfg]
    if include_vanilla:
        configs.append(RunConfig(algorithm="vanilla", temperature=cfg.temperature,
                                 max_new_tokens=tokens, seed=cfg.seed))
    results = []
    for offset, run_cfg in enumerate(configs):
        orchestrator = EasySpecOrchestrator(base, draft, run_cfg, workers=workers)
        try:
            empirical = empirical_marginals(orchestrator, prompt_tokens, runs, tokens,
                                            seed + offset * runs * 2)
        finally:
            orchestrator.close()
        result = StatisticalResult(run_cfg.algorithm, runs,
                                   tv=[total_variation(e, x) for e, x in zip(empirical, exact)],
                                   bound=bounds)
        logger.info(f"LOSSLESS CHECK: {run_cfg.algorithm} runs={runs} "
                    + ", ".join(f"pos{i}: tv={t:.4f} bound={b:.4f}"
                                for i, (t, b) in enumerate(zip(result.tv, result.bound)))
                    + f" -> {'PASS' if result.passed else 'FAIL'}")
        results.append(result)
    return results
