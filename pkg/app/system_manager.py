#!/usr/bin/env python3
"""
Engine manager: builds the base/draft pair from settings and exposes
generate, bench and probe with a psutil resource monitor alongside.
"""
import logging
import os
import time
from dataclasses import replace
from typing import Dict, Any, Optional, List, Tuple

import pandas as pd
import psutil

from bench_corpus import build_prompts, build_probe_corpus
from draft_engine import probe_similarity
from easyspec_orchestrator import EasySpecOrchestrator
from errors import ConfigError
from layer_planner import format_plan
from metrics_report import RunReport, aggregate, reports_frame
from model_io import load_model, save_model
from run_config import EspecSettings, ModelSpec, RunConfig
from toy_transformer import ToyTransformer, WeightStore, encode_bytes, init_model, make_truncated_draft

logger = logging.getLogger(__name__)


class ResourceMonitor:
    """Host resource snapshot via psutil"""

    def __init__(self):
        self.start_time = time.time()
        logger.info("RESOURCE MONITOR: initialized")

    def hardware_workers(self) -> int:
        return psutil.cpu_count(logical=True) or 1

    def snapshot(self) -> Dict[str, Any]:
        memory = psutil.virtual_memory()
        return {
            "hardware_workers": self.hardware_workers(),
            "memory_percent": memory.percent,
            "cpu_percent": psutil.cpu_percent(interval=0.1),
            "uptime_s": time.time() - self.start_time,
        }

    def check_resources(self, high_threshold: float = 90) -> Tuple[bool, str]:
        memory = psutil.virtual_memory()
        if memory.percent > high_threshold:
            logger.warning(f"RESOURCE MONITOR: High memory usage {memory.percent}%, runs may be slow")
            return False, f"memory at {memory.percent}%"
        return True, "Resources nominal."


class EngineManager:
    """Builds the model pair from settings and runs generation, benchmarks and probes"""

    def __init__(self, settings: EspecSettings):
        settings.validate()
        self.settings = settings
        self.monitor = ResourceMonitor()
        self.base_weights, self.draft_weights = self._build_models()
        self.base = ToyTransformer(self.base_weights)
        self.draft = ToyTransformer(self.draft_weights)
        self._orchestrators: List[EasySpecOrchestrator] = []
        logger.info(f"ENGINE MANAGER: base {self.base.n_layers} layers, draft {self.draft.n_layers} layers")

    # ------------------------------------------------------------------
    # models
    # ------------------------------------------------------------------
    def _load_or_init(self, spec: ModelSpec, role: str) -> WeightStore:
        if spec.path:
            return load_model(spec.path)
        if spec.init_seed is not None:
            return init_model(spec.model_config(spec.init_seed))
        raise ConfigError(f"{role} model needs a path or an init seed (--init-seed)")

    def _build_models(self) -> Tuple[WeightStore, WeightStore]:
        base_spec = self.settings.models["base"]
        draft_spec = self.settings.models["draft"]
        base = self._load_or_init(base_spec, "base")
        if draft_spec.keep_layers is not None:
            draft = make_truncated_draft(base, draft_spec.keep_layers)
        else:
            draft = self._load_or_init(draft_spec, "draft")
        if draft.config.vocab_size != base.config.vocab_size:
            raise ConfigError("draft and base vocabularies differ")
        return base, draft

    def save_models(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"base": os.path.join(out_dir, "base.espec"), "draft": os.path.join(out_dir, "draft.espec")}
        save_model(self.base_weights, paths["base"])
        save_model(self.draft_weights, paths["draft"])
        return paths

    # ------------------------------------------------------------------
    # runs
    # ------------------------------------------------------------------
    def orchestrator(self, run_config: Optional[RunConfig] = None) -> EasySpecOrchestrator:
        orch = EasySpecOrchestrator(self.base, self.draft, run_config or self.settings.run,
                                    cost_params=self.settings.cost, workers=self.settings.workers)
        self._orchestrators.append(orch)
        return orch

    def generate(self, prompt: bytes, run_config: Optional[RunConfig] = None):
        orch = self.orchestrator(run_config)
        try:
            return orch.generate(prompt)
        finally:
            orch.close()

    def bench(self, algorithms: Optional[List[str]] = None,
              prompts: Optional[List[bytes]] = None,
              lp_sizes: Optional[List[int]] = None) -> Tuple[List[RunReport], pd.DataFrame]:
        """
        Every algorithm over the same prompts; one aggregated report per algorithm.
        easyspec runs once per entry of lp_sizes (default: the configured size).
        """
        s = self.settings
        algorithms = algorithms or s.bench.algorithms
        prompts = prompts or build_prompts(s.bench.prompts, s.bench.prompt_bytes, s.run.seed)
        ok, message = self.monitor.check_resources()
        if not ok:
            logger.warning(f"ENGINE MANAGER: {message}")
        reports = []
        for algorithm in algorithms:
            widths = [1] * s.run.n if algorithm == "sd" else s.run.widths
            cfg = replace(s.run, algorithm=algorithm, widths=widths)
            if algorithm == "easyspec" and lp_sizes:
                configs = [replace(cfg, lp_size=lp, plan=None) for lp in lp_sizes]
            else:
                configs = [cfg]
            for run_cfg in configs:
                reports.append(self._bench_run(run_cfg, prompts))
                logger.info(f"ENGINE MANAGER: bench {algorithm} lp={reports[-1].lp_size} "
                            f"alpha={reports[-1].alpha:.3f} "
                            f"speedup={reports[-1].sim['total_speedup_vs_vanilla']:.3f}")
        return reports, reports_frame(reports)

    def _bench_run(self, cfg: RunConfig, prompts: List[bytes]) -> RunReport:
        algorithm = cfg.algorithm
        orch = self.orchestrator(cfg)
        try:
            traces, vanilla = [], 0.0
            for i, prompt in enumerate(prompts):
                state = orch.generate_tokens(encode_bytes(prompt), seed=cfg.seed + i)
                traces.extend(state.traces)
                vanilla += orch.vanilla_units(state.prompt_len, state.emitted)
            return aggregate(
                traces, vanilla, algorithm=algorithm,
                n=cfg.n if algorithm != "vanilla" else 0,
                widths=orch.widths if algorithm != "vanilla" else [],
                lp_size=orch.plan.lp_size if algorithm == "easyspec" else 1,
                plan=format_plan(orch.plan) if orch.plan else "",
                calibration=cfg.calibration and algorithm == "easyspec",
                temperature=cfg.temperature, seed=cfg.seed)
        finally:
            orch.close()

    def probe(self, lp_sizes: List[int], total_bytes: int = 4096) -> pd.DataFrame:
        corpus = build_probe_corpus(total_bytes, seed=self.settings.run.seed)
        return probe_similarity(self.draft, lp_sizes, corpus, strategy=self.settings.run.strategy,
                                workers=self.settings.workers)

    def get_system_status(self) -> Dict[str, Any]:
        return {
            "base": self.base.config.to_dict(),
            "draft": self.draft.config.to_dict(),
            "resources": self.monitor.snapshot(),
        }

    def cleanup(self):
        for orch in self._orchestrators:
            orch.close()
        self._orchestrators.clear()
        logger.info("ENGINE MANAGER: cleaned up worker pools")
