#!/usr/bin/env python3
"""
Per-iteration traces and run reports: acceptance rate, per-100-token stage
times (wall and simulated), speedup over vanilla, and their JSON/CSV forms.
"""
import io
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from errors import ReportError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["algorithm", "n", "lp_size", "alpha", "d_per100", "v_per100", "c_per100", "speedup"]


@dataclass
class IterationTrace:
    m: int = 0
    n_drafted: int = 0
    tokens_emitted: int = 0
    draft_wall: float = 0.0
    verify_wall: float = 0.0
    calibrate_wall: float = 0.0
    draft_sim: float = 0.0
    verify_sim: float = 0.0
    calibrate_sim: float = 0.0
    fuzzy_forwards: int = 0
    sequential_forwards: int = 0
    base_forwards: int = 0
    forwards: Dict[str, int] = field(default_factory=lambda: {"draft": 0, "verify": 0, "calibrate": 0})
    accepted_tokens: List[int] = field(default_factory=list)
    bonus_token: Optional[int] = None

    def add(self, stage: str, wall: float, sim: float):
        setattr(self, f"{stage}_wall", getattr(self, f"{stage}_wall") + wall)
        setattr(self, f"{stage}_sim", getattr(self, f"{stage}_sim") + sim)
        self.forwards[stage] += 1

    @property
    def sim_total(self) -> float:
        return self.draft_sim + self.verify_sim + self.calibrate_sim

    @property
    def wall_total(self) -> float:
        return self.draft_wall + self.verify_wall + self.calibrate_wall


@dataclass
class StageTimes:
    draft_per_100: float = 0.0
    verify_per_100: float = 0.0
    calibrate_per_100: float = 0.0
    d_total_per_100: float = 0.0


@dataclass
class RunReport:
    algorithm: str
    n: int
    widths: List[int]
    lp_size: int
    plan: str
    calibration: bool
    temperature: float
    seed: int
    alpha: float
    tokens_emitted: int
    tokens_per_s_wall: float
    wall: StageTimes
    sim: Dict[str, float]
    similarity: Optional[Dict[str, float]] = None
    iterations: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        data = dict(data)
        data["wall"] = StageTimes(**data["wall"])
        return cls(**data)


def aggregate(traces: Sequence[IterationTrace], vanilla_baseline: float, algorithm: str = "easyspec",
              n: int = 0, widths: Sequence[int] = (), lp_size: int = 1, plan: str = "",
              calibration: bool = False, temperature: float = 0.0, seed: int = 0,
              similarity: Optional[Dict[str, float]] = None) -> RunReport:
    """Fold iteration traces into a RunReport; speedup = vanilla_baseline / total simulated units"""
    if not traces:
        raise ReportError("cannot aggregate an empty trace list")
    emitted = sum(t.tokens_emitted for t in traces)
    if emitted <= 0:
        raise ReportError("run emitted zero tokens")
    drafted = sum(t.n_drafted for t in traces)
    alpha = sum(t.m for t in traces) / drafted if drafted else 0.0

    def per100(values: List[float]) -> float:
        return 100.0 * sum(values) / emitted

    wall = StageTimes(
        draft_per_100=per100([t.draft_wall for t in traces]),
        verify_per_100=per100([t.verify_wall for t in traces]),
        calibrate_per_100=per100([t.calibrate_wall for t in traces]),
    )
    wall.d_total_per_100 = wall.draft_per_100 + wall.calibrate_per_100

    total_sim = 0.0
    for t in traces:
        total_sim += t.sim_total
    if total_sim <= 0:
        raise ReportError("run has no simulated time")
    sim = {
        "draft_per_100": per100([t.draft_sim for t in traces]),
        "verify_per_100": per100([t.verify_sim for t in traces]),
        "calibrate_per_100": per100([t.calibrate_sim for t in traces]),
    }
    sim["d_total_per_100"] = sim["draft_per_100"] + sim["calibrate_per_100"]
    sim["total_units"] = total_sim
    sim["vanilla_units"] = vanilla_baseline
    sim["total_speedup_vs_vanilla"] = vanilla_baseline / total_sim

    wall_total = sum(t.wall_total for t in traces)
    report = RunReport(
        algorithm=algorithm, n=n, widths=list(widths), lp_size=lp_size, plan=plan,
        calibration=calibration, temperature=temperature, seed=seed, alpha=alpha,
        tokens_emitted=emitted,
        tokens_per_s_wall=emitted / wall_total if wall_total > 0 else 0.0,
        wall=wall, sim=sim, similarity=similarity,
        iterations=[asdict(t) for t in traces],
    )
    logger.debug(f"METRICS REPORT: {algorithm} alpha={alpha:.4f} "
                 f"speedup={sim['total_speedup_vs_vanilla']:.3f}")
    return report


def csv_row(report: RunReport) -> Dict[str, Any]:
    return {
        "algorithm": report.algorithm,
        "n": report.n,
        "lp_size": report.lp_size,
        "alpha": report.alpha,
        "d_per100": report.sim["draft_per_100"],
        "v_per100": report.sim["verify_per_100"],
        "c_per100": report.sim["calibrate_per_100"],
        "speedup": report.sim["total_speedup_vs_vanilla"],
    }


def reports_frame(reports: Sequence[RunReport]) -> pd.DataFrame:
    return pd.DataFrame([csv_row(r) for r in reports], columns=CSV_COLUMNS)


def emit(report: RunReport, fmt: str = "json") -> bytes:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2).encode("utf-8")
    if fmt == "csv":
        return reports_frame([report]).to_csv(index=False).encode("utf-8")
    raise ReportError(f"unsupported report format '{fmt}'")


def parse_report(data: bytes) -> RunReport:
    try:
        return RunReport.from_dict(json.loads(data.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise ReportError(f"cannot parse report: {e}") from e


def parse_csv(data: bytes) -> pd.DataFrame:
    frame = pd.read_csv(io.BytesIO(data))
    if list(frame.columns) != CSV_COLUMNS:
        raise ReportError(f"unexpected CSV header {list(frame.columns)}")
    return frame


def write_report(report: RunReport, path: str, fmt: str = "json"):
    with open(path, "wb") as f:
        f.write(emit(report, fmt))
    logger.info(f"METRICS REPORT: Wrote {fmt} report to {path}")
