"""Preference-scenario mining: the simulated takeover pipeline.

Three stages reduce a labeled scenario pool to the preference set the
finetuning consumes:

1. scenario mining  — keep scenarios where the ground truth beats a policy
   sample on the target-style score by more than a threshold (the stand-in
   for a human takeover);
2. key-frame check  — drop clips without a visible maneuver (no speed or
   heading jump anywhere in the ground truth);
3. model rejection  — drop scenarios the policy already handles, i.e. its
   aggregated plan lands within a small ADE of the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionPolicy, sample_candidates
from .emselect import aggregate
from .metrics import ade, style_score
from .world import Scenario, find_key_frame

MINING_THRESHOLD = 0.2   # style-score gap that simulates a takeover
ADE_REJECT = 0.5         # meters; closer plans count as "already covered"
SPEED_JUMP = 1.0         # m/s per step
HEADING_JUMP_DEG = 5.0


@dataclass
class MiningReport:
    kept: list[Scenario]
    key_frames: dict = field(default_factory=dict)   # scenario id -> step
    n_input: int = 0
    n_after_mining: int = 0
    n_after_keyframe: int = 0
    n_after_rejection: int = 0

    def stats(self):
        return {"input": self.n_input, "after_mining": self.n_after_mining,
                "after_keyframe": self.n_after_keyframe,
                "kept": self.n_after_rejection}


def mine_preference_set(scenarios: list[Scenario], policy: DiffusionPolicy,
                        target_style: str, seed: int = 0,
                        samples_per_scenario: int = 8,
                        mining_threshold: float = MINING_THRESHOLD,
                        ade_reject: float = ADE_REJECT,
                        speed_jump: float = SPEED_JUMP,
                        heading_jump_deg: float = HEADING_JUMP_DEG) -> MiningReport:
    """Run the three-stage pipeline; an empty result is reported, not fatal.

    One candidate pool per scenario feeds both gates: its first member is
    the single "takeover" sample for stage 1, and its aggregated plan is
    the model-rejection probe for stage 3.
    """
    report = MiningReport(kept=[], n_input=len(scenarios))
    rng = np.random.default_rng(seed)
    for scen in scenarios:
        candidates = sample_candidates(policy, scen.obs, samples_per_scenario, rng)
        gap = (style_score(target_style, scen, scen.gt)
               - style_score(target_style, scen, candidates[0]))
        if gap <= mining_threshold:
            continue
        report.n_after_mining += 1
        key = find_key_frame(scen.gt, scen.world.ego_speed,
                             speed_jump, heading_jump_deg)
        if key is None:
            continue
        report.n_after_keyframe += 1
        plan = aggregate(candidates)
        if ade(plan, scen.gt) <= ade_reject:
            continue
        report.n_after_rejection += 1
        report.kept.append(scen)
        report.key_frames[scen.id] = key
    return report
