"""Evaluation quantities: displacement errors, diversity, style scores,
better-or-equal rates, and velocity histograms.

Everything here is a deterministic pure function of its inputs. The style
scorer is the desk-scale stand-in for a human judging how aggressive or
defensive a trajectory looks in context; it only ever backs *relative*
comparisons between models on the same scenario.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .world import (
    DT, HORIZON, Scenario, WorldState, controller_path, find_lead,
)

H_VALUES = (1, 0, -1)
EVALUATOR_TIE_BAND = 0.2   # |mean h over evaluators| below this is a tie
SIMULATED_TIE_BAND = 0.05

VELOCITY_BIN_WIDTH = 2.0
VELOCITY_RANGE = (0.0, 50.0)

# style score blend weights (fixed; exposed here rather than per-call)
AGGR_PROGRESS_WEIGHT = 0.7
AGGR_OVERTAKE_WEIGHT = 0.3
DEF_GAP_WEIGHT = 0.5
DEF_SPEED_WEIGHT = 0.5
DEF_GAP_NORM = 20.0       # meters at which the clearance term saturates
NORMAL_ADE_NORM = 4.0     # meters of ADE that zero out the normal score


# ---------------------------------------------------------------------------
# Displacement metrics
# ---------------------------------------------------------------------------


def ade(traj_a: np.ndarray, traj_b: np.ndarray) -> float:
    a, b = np.asarray(traj_a), np.asarray(traj_b)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def fde(traj_a: np.ndarray, traj_b: np.ndarray) -> float:
    a, b = np.asarray(traj_a), np.asarray(traj_b)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a[-1] - b[-1]))


def displacement_metrics(candidates: list[np.ndarray], gt: np.ndarray):
    """(minADE, meanADE, minFDE, meanFDE) over K candidates."""
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    ades = [ade(c, gt) for c in candidates]
    fdes = [fde(c, gt) for c in candidates]
    return (float(min(ades)), float(np.mean(ades)),
            float(min(fdes)), float(np.mean(fdes)))


def diversity(candidates: list[np.ndarray]) -> float | None:
    """Mean pairwise ADE among candidates; undefined below two."""
    k = len(candidates)
    if k < 2:
        return None
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            total += ade(candidates[i], candidates[j])
    return float(2.0 * total / (k * (k - 1)))


# ---------------------------------------------------------------------------
# Style oracle
# ---------------------------------------------------------------------------


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _speeds(traj: np.ndarray) -> np.ndarray:
    pts = np.vstack([np.zeros(2), np.asarray(traj)])
    return np.linalg.norm(np.diff(pts, axis=0), axis=1) / DT


def _min_agent_gap(world: WorldState, traj: np.ndarray) -> float:
    """Closest approach to any agent over the horizon (agents move at
    constant velocity). Returns +inf on an empty road."""
    if not world.agents:
        return float("inf")
    pts = np.asarray(traj)
    times = (np.arange(HORIZON) + 1) * DT
    best = float("inf")
    for a in world.agents:
        ax = a.x + a.vx * times
        ay = a.y + a.vy * times
        gaps = np.hypot(pts[:, 0] - ax, pts[:, 1] - ay)
        best = min(best, float(gaps.min()))
    return best


def style_score(style: str, scenario: Scenario, traj: np.ndarray) -> float:
    """How well `traj` matches `style` in this world; bounded in [0, 1].

    aggressive blends normalized terminal progress with an overtake
    indicator; defensive blends agent clearance with margin below cruise
    speed; normal scores closeness to the jitter-free normal controller.
    """
    world = scenario.world
    traj = np.asarray(traj, dtype=np.float64)
    v_c = world.ego_speed
    horizon_s = HORIZON * DT
    if style == "aggressive":
        progress = _clamp01(traj[-1, 0] / (1.3 * v_c * horizon_s))
        lead = find_lead(world)
        overtake = 0.0
        if lead is not None and lead.vx < 0.7 * v_c \
                and float(np.max(np.abs(traj[:, 1]))) > 0.35 * world.lane_width:
            overtake = 1.0
        return _clamp01(AGGR_PROGRESS_WEIGHT * progress
                        + AGGR_OVERTAKE_WEIGHT * overtake)
    if style == "defensive":
        gap = _min_agent_gap(world, traj)
        gap_term = 1.0 if gap == float("inf") else _clamp01(gap / DEF_GAP_NORM)
        margin = _clamp01((v_c - float(np.mean(_speeds(traj)))) / (0.5 * v_c))
        return _clamp01(DEF_GAP_WEIGHT * gap_term + DEF_SPEED_WEIGHT * margin)
    if style == "normal":
        ref = controller_path(world, "normal")
        return _clamp01(1.0 - ade(traj, ref) / NORMAL_ADE_NORM)
    raise ValueError(f"unknown style {style!r}")


def simulated_h(style: str, scenario: Scenario, traj_a: np.ndarray,
                traj_b: np.ndarray, tie_band: float = SIMULATED_TIE_BAND) -> int:
    """Oracle comparison: 1 prefers A, -1 prefers B, 0 within the tie band."""
    gap = style_score(style, scenario, traj_a) - style_score(style, scenario, traj_b)
    if gap > tie_band:
        return 1
    if gap < -tie_band:
        return -1
    return 0


# ---------------------------------------------------------------------------
# Better-or-equal rate
# ---------------------------------------------------------------------------


@dataclass
class ComparisonRecord:
    scenario_id: str
    a_src: str
    b_src: str
    h: int
    evaluator: str = "oracle"

    def __post_init__(self):
        if self.h not in H_VALUES:
            raise ValueError(f"h must be one of {H_VALUES}, got {self.h}")

    def to_dict(self):
        return {"scenario_id": self.scenario_id, "a_src": self.a_src,
                "b_src": self.b_src, "h": self.h, "evaluator": self.evaluator}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scenario_id"], d["a_src"], d["b_src"], int(d["h"]),
                   d.get("evaluator", "oracle"))


def boe_compute(records: list[ComparisonRecord],
                tie_band: float = EVALUATOR_TIE_BAND):
    """(BOE_A, BOE_B): the fractions of scenarios where A (resp. B) is
    judged better than or equal to the other.

    Multiple evaluators on one scenario are averaged first; a mean inside
    the tie band counts as a tie, which contributes to both rates.
    """
    if not records:
        raise ValueError("boe_compute needs at least one record")
    by_scenario: dict[str, list[int]] = {}
    for r in records:
        by_scenario.setdefault(r.scenario_id, []).append(r.h)
    a_good = b_good = 0
    for hs in by_scenario.values():
        mean_h = float(np.mean(hs))
        if abs(mean_h) < tie_band:
            agg = 0
        else:
            agg = 1 if mean_h > 0 else -1
        if agg >= 0:
            a_good += 1
        if agg <= 0:
            b_good += 1
    n = len(by_scenario)
    return a_good / n, b_good / n


def save_comparison_records(path, records: list[ComparisonRecord]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_comparison_records(path) -> list[ComparisonRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(ComparisonRecord.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Velocity profile
# ---------------------------------------------------------------------------


def velocity_profile(trajectories: list[np.ndarray]):
    """Histogram (bin_edges, densities) of per-step speeds, 2 m/s bins over
    0..50, normalized so densities integrate to one."""
    if not trajectories:
        raise ValueError("velocity_profile needs at least one trajectory")
    speeds = np.concatenate([_speeds(t) for t in trajectories])
    lo, hi = VELOCITY_RANGE
    edges = np.arange(lo, hi + VELOCITY_BIN_WIDTH, VELOCITY_BIN_WIDTH)
    counts, _ = np.histogram(np.clip(speeds, lo, hi - 1e-9), bins=edges)
    densities = counts / (counts.sum() * VELOCITY_BIN_WIDTH)
    return edges, densities


def mean_speed(trajectories: list[np.ndarray]) -> float:
    return float(np.mean([np.mean(_speeds(t)) for t in trajectories]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    min_ade: float
    mean_ade: float
    min_fde: float
    mean_fde: float
    diversity: float | None
    sample_count: int
    style_scores: dict = field(default_factory=dict)
    mean_speed: float = 0.0
    velocity_bin_edges: list = field(default_factory=list)
    velocity_densities: list = field(default_factory=list)

    def __post_init__(self):
        if self.min_ade > self.mean_ade + 1e-12 or self.min_fde > self.mean_fde + 1e-12:
            raise ValueError("min metrics cannot exceed mean metrics")

    def to_dict(self):
        return {
            "min_ade": self.min_ade, "mean_ade": self.mean_ade,
            "min_fde": self.min_fde, "mean_fde": self.mean_fde,
            "diversity": self.diversity, "sample_count": self.sample_count,
            "style_scores": self.style_scores, "mean_speed": self.mean_speed,
            "velocity_bin_edges": self.velocity_bin_edges,
            "velocity_densities": self.velocity_densities,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
