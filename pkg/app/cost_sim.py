#!/usr/bin/env python3
"""
Simulated multi-device timing model.

One kernel over workload w, s tokens and tensor-parallel size tp costs
    cFixed + cMem*w/tp + cComp*w*s/tp + (tAddi if tp > 1)
in abstract units. The defaults are illustrative, not measured: they sit in the
memory-bound regime (token parallelism is almost free) and make the drafter's
best TP size 1 and the base model's best TP size the device count.
"""
import logging
from dataclasses import dataclass, asdict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from errors import CapacityError, ConfigError, UndefinedThroughputError
from layer_planner import LayerPlan, plan_groups

logger = logging.getLogger(__name__)

STAGES = ("draft", "verify", "calibrate")

# Illustrative acceptance-rate curve over layer-parallel size
DEFAULT_ALPHA_CURVE = {1: 0.90, 2: 0.895, 3: 0.885, 4: 0.87, 5: 0.75}


@dataclass
class CostParams:
    c_fixed: float = 4.0
    c_mem: float = 1.0
    c_comp: float = 0.01
    t_addi: float = 2.8
    attn_workload: float = 2.0
    mlp_workload: float = 3.0
    base_layer_workload: float = 160.0
    tp_size_base: int = 8
    tp_size_draft: int = 1
    devices: int = 8
    # simulated layer counts of the deployment-scale pair
    base_layers: int = 80
    draft_layers: int = 32

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"cost parameter {name} must be >= 0, got {value}")
        if self.devices < 1 or self.tp_size_base < 1 or self.tp_size_draft < 1:
            raise ConfigError("devices and TP sizes must be >= 1")
        if self.tp_size_base > self.devices or self.tp_size_draft > self.devices:
            raise ConfigError(f"TP size exceeds the {self.devices} simulated devices")
        if self.base_layers < 1 or self.draft_layers < 2:
            raise ConfigError("base_layers must be >= 1 and draft_layers >= 2")


def total_time_model(n_tokens: float, t_draft: float, t_base: float, n: int, alpha: float) -> float:
    """Drafting every token plus one base pass per n*alpha emitted tokens"""
    if n < 1:
        raise ConfigError(f"speculation length must be >= 1, got {n}")
    if alpha <= 0:
        raise UndefinedThroughputError("throughput is undefined at acceptance rate 0")
    if alpha > 1:
        raise ConfigError(f"acceptance rate must be <= 1, got {alpha}")
    return n_tokens * t_draft + (n_tokens / (n * alpha)) * t_base


class CostModel:
    """Per-forward simulated durations and device busy time"""

    def __init__(self, params: Optional[CostParams] = None):
        self.params = params or CostParams()
        self.params.validate()

    def t_exe(self, w: float, s_tokens: float, tp_size: int) -> float:
        p = self.params
        if w < 0 or s_tokens < 1 or tp_size < 1:
            raise ConfigError(f"t_exe needs w >= 0, s >= 1, tp >= 1 (got {w}, {s_tokens}, {tp_size})")
        out = p.c_fixed + p.c_mem * (w / tp_size) + p.c_comp * (w / tp_size) * s_tokens
        if tp_size > 1:
            out += p.t_addi
        return out

    # ------------------------------------------------------------------
    # drafter
    # ------------------------------------------------------------------
    def sequential_layer_time(self, s_tokens: float = 1) -> float:
        p = self.params
        return (self.t_exe(p.attn_workload, s_tokens, p.tp_size_draft)
                + self.t_exe(p.mlp_workload, s_tokens, p.tp_size_draft))

    def sequential_draft_time(self, n_layers: int, s_tokens: float = 1) -> float:
        return n_layers * self.sequential_layer_time(s_tokens)

    def group_attention_time(self, group_size: int, s_tokens: float = 1) -> float:
        """Concurrent attention of one group; a singleton runs like a sequential layer"""
        p = self.params
        if group_size > p.devices:
            raise CapacityError(f"group of {group_size} layers needs more than {p.devices} devices")
        if group_size == 1:
            return self.t_exe(p.attn_workload, s_tokens, p.tp_size_draft)
        return self.t_exe(p.attn_workload, s_tokens, 1) + p.t_addi

    def group_mlp_time(self, group_size: int, s_tokens: float = 1, strategy: str = "attention") -> float:
        p = self.params
        if group_size == 1:
            return self.t_exe(p.mlp_workload, s_tokens, p.tp_size_draft)
        if strategy == "full_layer":
            return self.t_exe(p.mlp_workload, s_tokens, 1) + p.t_addi
        return group_size * self.t_exe(p.mlp_workload, s_tokens, 1)

    def simulate_draft_group(self, plan: LayerPlan, s_tokens: float = 1,
                             strategy: str = "attention") -> float:
        """One fuzzy drafter forward under `plan`"""
        total = 0.0
        for group in plan.groups:
            g = len(group)
            total += self.group_attention_time(g, s_tokens) + self.group_mlp_time(g, s_tokens, strategy)
        return total

    def fuzzy_draft_busy(self, plan: LayerPlan, s_tokens: float = 1,
                         strategy: str = "attention") -> Dict[int, float]:
        """Per-device busy units of one fuzzy forward; device 0 carries the chain"""
        p = self.params
        total = self.simulate_draft_group(plan, s_tokens, strategy)
        busy = {0: total}
        for group in plan.groups:
            g = len(group)
            if g == 1:
                for d in range(1, p.tp_size_draft):
                    busy[d] = busy.get(d, 0.0) + self.group_attention_time(1, s_tokens) \
                        + self.group_mlp_time(1, s_tokens)
                continue
            extra = self.t_exe(p.attn_workload, s_tokens, 1)
            if strategy == "full_layer":
                extra += self.t_exe(p.mlp_workload, s_tokens, 1)
            for d in range(1, g):
                busy[d] = busy.get(d, 0.0) + extra
        return busy

    def sequential_draft_busy(self, n_layers: int, s_tokens: float = 1) -> Dict[int, float]:
        units = self.sequential_draft_time(n_layers, s_tokens)
        return {d: units for d in range(self.params.tp_size_draft)}

    # ------------------------------------------------------------------
    # base model
    # ------------------------------------------------------------------
    def base_forward_time(self, s_tokens: float = 1, n_layers: Optional[int] = None,
                          tp_size: Optional[int] = None) -> float:
        p = self.params
        layers = p.base_layers if n_layers is None else n_layers
        tp = p.tp_size_base if tp_size is None else tp_size
        return layers * self.t_exe(p.base_layer_workload, s_tokens, tp)

    def base_forward_busy(self, s_tokens: float = 1) -> Dict[int, float]:
        units = self.base_forward_time(s_tokens)
        return {d: units for d in range(self.params.tp_size_base)}

    # ------------------------------------------------------------------
    # tensor-parallel sweep
    # ------------------------------------------------------------------
    def tp_sweep(self, role: str, n_layers: Optional[int] = None,
                 tp_sizes: Optional[Sequence[int]] = None) -> pd.DataFrame:
        """Single-token forward time per TP size for the draft or base role"""
        p = self.params
        sizes = list(tp_sizes) if tp_sizes else list(range(1, p.devices + 1))
        rows = []
        for tp in sizes:
            if tp > p.devices:
                raise CapacityError(f"TP size {tp} exceeds {p.devices} devices")
            if role == "draft":
                layers = p.draft_layers if n_layers is None else n_layers
                units = layers * (self.t_exe(p.attn_workload, 1, tp) + self.t_exe(p.mlp_workload, 1, tp))
            elif role == "base":
                units = self.base_forward_time(1, n_layers, tp)
            else:
                raise ConfigError(f"unknown role '{role}', expected 'draft' or 'base'")
            rows.append({"role": role, "tp_size": tp, "forward_units": units})
        return pd.DataFrame(rows, columns=["role", "tp_size", "forward_units"])

    def optimal_tp(self, role: str, n_layers: Optional[int] = None,
                   tp_sizes: Optional[Sequence[int]] = None) -> int:
        frame = self.tp_sweep(role, n_layers, tp_sizes)
        return int(frame.loc[frame["forward_units"].idxmin(), "tp_size"])


class SimClock:
    """Accumulates simulated units per stage and busy units per (device, stage)"""

    def __init__(self, devices: int):
        self.devices = devices
        self.stage_units: Dict[str, float] = {s: 0.0 for s in STAGES}
        self.busy: Dict[Tuple[int, str], float] = {}

    def record(self, stage: str, units: float, busy: Mapping[int, float]):
        if stage not in self.stage_units:
            raise ConfigError(f"unknown stage '{stage}'")
        self.stage_units[stage] += units
        for device, value in busy.items():
            key = (device, stage)
            self.busy[key] = self.busy.get(key, 0.0) + value

    @property
    def total(self) -> float:
        return sum(self.stage_units.values())

    def busy_devices(self, stage: str) -> List[int]:
        return sorted(d for (d, s), v in self.busy.items() if s == stage and v > 0)

    def occupancy_frame(self) -> pd.DataFrame:
        total = self.total
        rows = [{"device": d, "stage": s, "busy_units": v, "total_units": total}
                for (d, s), v in sorted(self.busy.items())]
        return pd.DataFrame(rows, columns=["device", "stage", "busy_units", "total_units"])


# ----------------------------------------------------------------------
# analytic sweeps (no tensor math)
# ----------------------------------------------------------------------
def level_sizes(widths: Sequence[int]) -> List[int]:
    out, width = [], 1
    for w in widths:
        width *= w
        out.append(width)
    return out


def expand_width(width: int, n: int) -> List[int]:
    """A scalar tree width w means w branches at the first level and single chains below"""
    return [width] + [1] * (n - 1)


def simulate_iteration(model: CostModel, algorithm: str, n: int, widths: Sequence[int],
                       alpha: float, plan: Optional[LayerPlan] = None, calibration: bool = True,
                       strategy: str = "attention") -> Dict[str, float]:
    """Expected stage units and emitted tokens of one iteration at acceptance rate alpha"""
    p = model.params
    sizes = level_sizes(widths)
    stages = {s: 0.0 for s in STAGES}
    if algorithm == "vanilla":
        stages["verify"] = model.base_forward_time(1)
        return {**stages, "tokens": 1.0}
    pending = alpha * n + 1
    if algorithm == "easyspec":
        plan = plan or plan_groups(p.draft_layers, 1)
        if calibration:
            stages["calibrate"] = model.sequential_draft_time(p.draft_layers, pending)
        else:
            stages["draft"] += model.simulate_draft_group(plan, pending, strategy)
        stages["draft"] += sum(model.simulate_draft_group(plan, s, strategy) for s in sizes[:-1])
    elif algorithm in ("sd", "sd_tree"):
        stages["draft"] = model.sequential_draft_time(p.draft_layers, pending) + \
            sum(model.sequential_draft_time(p.draft_layers, s) for s in sizes[:-1])
    else:
        raise ConfigError(f"unknown algorithm '{algorithm}'")
    stages["verify"] = model.base_forward_time(1 + sum(sizes))
    return {**stages, "tokens": pending}


def simulate_grid(model: CostModel, lp_sizes: Iterable[int], widths: Iterable[int], n: int = 5,
                  alpha_curve: Optional[Mapping[int, float]] = None, calibration: bool = True,
                  strategy: str = "attention") -> pd.DataFrame:
    """Throughput per (tree width, layer-parallel size), with speedup over vanilla"""
    p = model.params
    curve = dict(alpha_curve or DEFAULT_ALPHA_CURVE)
    vanilla = simulate_iteration(model, "vanilla", n, [1], 1.0)
    vanilla_throughput = vanilla["tokens"] / vanilla["verify"]
    rows = []
    for width in widths:
        tree = expand_width(width, n)
        for lp in lp_sizes:
            if lp not in curve:
                raise ConfigError(f"no acceptance rate given for layer-parallel size {lp}")
            alpha = curve[lp]
            plan = plan_groups(p.draft_layers, lp)
            it = simulate_iteration(model, "easyspec", n, tree, alpha, plan, calibration, strategy)
            total = it["draft"] + it["verify"] + it["calibrate"]
            throughput = it["tokens"] / total
            t_all = total_time_model(100, (it["draft"] + it["calibrate"]) / n, it["verify"], n, alpha)
            rows.append({
                "width": width, "lp_size": lp, "alpha": alpha,
                "draft_units": it["draft"], "verify_units": it["verify"],
                "calibrate_units": it["calibrate"], "total_units": total,
                "tokens_per_iteration": it["tokens"], "throughput": throughput,
                "speedup_vs_vanilla": throughput / vanilla_throughput,
                "t_all_per100": t_all,
            })
    frame = pd.DataFrame(rows)
    logger.info(f"COST SIM: Simulated {len(frame)} grid points")
    return frame


def parse_alpha_curve(text: str) -> Dict[int, float]:
    """"1:0.90,2:0.895" -> {1: 0.90, 2: 0.895}"""
    curve = {}
    try:
        for part in text.split(","):
            key, value = part.split(":")
            curve[int(key)] = float(value)
    except ValueError as e:
        raise ConfigError(f"cannot parse acceptance-rate curve '{text}': {e}") from e
    for lp, alpha in curve.items():
        if not (0 < alpha <= 1):
            raise ConfigError(f"acceptance rate for N={lp} must lie in (0, 1], got {alpha}")
    return curve
