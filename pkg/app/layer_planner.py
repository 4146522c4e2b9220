#!/usr/bin/env python3
"""
Layer-parallel plans for the drafter.

The first and last layers always run alone. The middle layers are split into
groups [1..N-1], [N..2N-1], ... and a group that would reach the last layer is
cut short before it.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerPlan:
    groups: Tuple[Tuple[int, ...], ...]
    lp_size: int

    @property
    def n_layers(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def max_group(self) -> int:
        return max(len(g) for g in self.groups)

    def __str__(self) -> str:
        return format_plan(self)


def validate_groups(groups: Sequence[Sequence[int]], n_layers: int) -> None:
    flat = [layer for group in groups for layer in group]
    if not groups or any(len(g) == 0 for g in groups):
        raise ConfigError("plan contains an empty group")
    for group in groups:
        if list(group) != list(range(group[0], group[0] + len(group))):
            raise ConfigError(f"group {list(group)} is not a contiguous ascending range")
    if len(flat) != len(set(flat)):
        raise ConfigError("plan groups overlap")
    if flat != sorted(flat):
        raise ConfigError("plan groups are not in ascending order")
    if flat != list(range(n_layers)):
        raise ConfigError(f"plan does not cover layers 0..{n_layers - 1} without gaps")
    if len(groups[0]) != 1 or len(groups[-1]) != 1:
        raise ConfigError("first and last layer must be singleton groups")


def plan_groups(n_layers: int, lp_size: int) -> LayerPlan:
    if n_layers < 2:
        raise ConfigError(f"a plan needs at least 2 layers, got {n_layers}")
    if not (1 <= lp_size <= max(1, n_layers - 2)):
        raise ConfigError(f"layer-parallel size must be in 1..{max(1, n_layers - 2)}, got {lp_size}")
    last = n_layers - 1
    groups: List[Tuple[int, ...]] = [(0,)]
    if lp_size == 1:
        groups.extend((i,) for i in range(1, last))
    else:
        start = 1
        end = lp_size  # exclusive; first group is 1..N-1
        while start < last:
            stop = min(end, last)
            groups.append(tuple(range(start, stop)))
            start, end = stop, stop + lp_size
    groups.append((last,))
    plan = LayerPlan(groups=tuple(groups), lp_size=lp_size)
    logger.debug(f"LAYER PLANNER: {n_layers} layers, N={lp_size} -> {format_plan(plan)}")
    return plan


def format_plan(plan: LayerPlan) -> str:
    return "|".join(str(g[0]) if len(g) == 1 else f"{g[0]}-{g[-1]}" for g in plan.groups)


def parse_plan_override(text: str, n_layers: int) -> LayerPlan:
    """Parse "0|1-3|4-7|...|31" into a validated plan"""
    groups = []
    try:
        for part in text.strip().split("|"):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                if hi < lo:
                    raise ConfigError(f"descending range '{part}'")
                groups.append(tuple(range(lo, hi + 1)))
            else:
                groups.append((int(part),))
    except ValueError as e:
        raise ConfigError(f"cannot parse plan '{text}': {e}") from e
    validate_groups(groups, n_layers)
    plan = LayerPlan(groups=tuple(groups), lp_size=max(len(g) for g in groups))
    logger.info(f"LAYER PLANNER: Using override plan {format_plan(plan)}")
    return plan
