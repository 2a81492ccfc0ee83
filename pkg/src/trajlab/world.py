"""Synthetic driving scenarios and style-conditioned ground truth.

A scenario is one frame of a tiny ego-centric world: a straight lane,
up to three constant-velocity agents, and optionally an intersection
ahead. Three kinematic controllers (normal / aggressive / defensive)
turn a world into a ground-truth trajectory, and the mixture over the
three styles is what the planner is pretrained on.

All generation is a pure function of (seed, weights, count).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

HORIZON = 8          # waypoints
DT = 0.5             # seconds per step
MAX_STEP_DISP = 25.0  # meters; 50 m/s ceiling
JITTER_SIGMA = 0.1   # waypoint position noise, meters (clipped at 2.5 sigma)

STYLES = ("normal", "aggressive", "defensive")

FEATURE_WIDTH = 18
# fixed scaling constants that bring features to roughly unit range
EGO_SPEED_SCALE = 1.0 / 25.0
LANE_WIDTH_SCALE = 1.0 / 5.0
INTERSECTION_SENTINEL = 200.0
DX_SCALE = 1.0 / 50.0
DY_SCALE = 1.0 / 10.0
DVX_SCALE = 1.0 / 25.0
DVY_SCALE = 1.0 / 10.0

SCHEMA_VERSION = 1


@dataclass
class Agent:
    x: float
    y: float
    vx: float
    vy: float
    kind: str  # "vehicle" | "vru"

    def to_dict(self):
        return {"x": self.x, "y": self.y, "vx": self.vx, "vy": self.vy, "kind": self.kind}

    @classmethod
    def from_dict(cls, d):
        return cls(d["x"], d["y"], d["vx"], d["vy"], d["kind"])


@dataclass
class WorldState:
    lane_width: float
    ego_speed: float
    agents: list[Agent] = field(default_factory=list)
    intersection_distance: float | None = None

    def to_dict(self):
        return {
            "lane_width": self.lane_width,
            "ego_speed": self.ego_speed,
            "agents": [a.to_dict() for a in self.agents],
            "intersection_distance": self.intersection_distance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            lane_width=d["lane_width"],
            ego_speed=d["ego_speed"],
            agents=[Agent.from_dict(a) for a in d["agents"]],
            intersection_distance=d["intersection_distance"],
        )


def check_trajectory(traj: np.ndarray) -> np.ndarray:
    """Validate the trajectory contract: HORIZON planar waypoints (the
    implicit start point is the origin), finite, per-step displacement
    within the 50 m/s ceiling."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape != (HORIZON, 2):
        raise ValueError(f"trajectory must have shape ({HORIZON}, 2), got {traj.shape}")
    if not np.all(np.isfinite(traj)):
        raise ValueError("trajectory contains non-finite waypoints")
    pts = np.vstack([np.zeros(2), traj])
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(steps > MAX_STEP_DISP):
        raise ValueError(
            f"per-step displacement {steps.max():.2f} m exceeds {MAX_STEP_DISP} m"
        )
    return traj


@dataclass
class Scenario:
    id: str
    world: WorldState
    gt: np.ndarray        # (HORIZON, 2) waypoints, ego frame
    style: str
    obs: np.ndarray       # (FEATURE_WIDTH,) feature vector

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        self.gt = check_trajectory(self.gt)
        self.obs = np.asarray(self.obs, dtype=np.float64)

    def to_dict(self):
        return {
            "id": self.id,
            "style": self.style,
            "world": self.world.to_dict(),
            "obs": self.obs.tolist(),
            "gt": self.gt.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=d["id"],
            world=WorldState.from_dict(d["world"]),
            gt=np.asarray(d["gt"], dtype=np.float64),
            style=d["style"],
            obs=np.asarray(d["obs"], dtype=np.float64),
        )


@dataclass(frozen=True)
class MixtureWeights:
    w_normal: float
    w_aggressive: float
    w_defensive: float

    def __post_init__(self):
        vals = (self.w_normal, self.w_aggressive, self.w_defensive)
        if any(w < 0 for w in vals):
            raise ValueError(f"mixture weights must be nonnegative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(vals)}")

    def as_tuple(self):
        return (self.w_normal, self.w_aggressive, self.w_defensive)


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def featurize(world: WorldState) -> np.ndarray:
    """Fixed-layout observation vector.

    Layout: [ego speed, lane width, intersection distance (sentinel 200
    when absent)] then three agent slots of (dx, dy, dvx, dvy, is_vru),
    agents sorted by range so the encoding is order-invariant, empty
    slots zero-padded. Everything scaled to roughly unit range.
    """
    obs = np.zeros(FEATURE_WIDTH)
    obs[0] = world.ego_speed * EGO_SPEED_SCALE
    obs[1] = world.lane_width * LANE_WIDTH_SCALE
    dist = world.intersection_distance
    if dist is None:
        dist = INTERSECTION_SENTINEL
    obs[2] = min(dist, INTERSECTION_SENTINEL) / INTERSECTION_SENTINEL
    ordered = sorted(world.agents, key=lambda a: math.hypot(a.x, a.y))
    for slot, agent in enumerate(ordered[:3]):
        base = 3 + 5 * slot
        obs[base + 0] = agent.x * DX_SCALE
        obs[base + 1] = agent.y * DY_SCALE
        obs[base + 2] = (agent.vx - world.ego_speed) * DVX_SCALE
        obs[base + 3] = agent.vy * DVY_SCALE
        obs[base + 4] = 1.0 if agent.kind == "vru" else 0.0
    return obs


# ---------------------------------------------------------------------------
# Style controllers
# ---------------------------------------------------------------------------

_CTRL = {
    # target speed factor, time gap (s), accel limit, brake limit, lateral rate
    # defensive accelerates gently but brakes readily; aggressive does both hard
    "normal": (1.0, 1.5, 2.5, 2.8, 1.5),
    "aggressive": (1.3, 1.0, 3.5, 3.5, 1.8),
    "defensive": (0.8, 2.5, 2.2, 3.5, 1.2),
}

SLOW_LEAD_FACTOR = 0.7     # aggressive bypasses leads slower than this * cruise
INTERSECTION_SLOW_RANGE = 50.0
VRU_SLOW_RANGE = 35.0
VRU_SPEED_CAP = 0.6        # defensive caps speed at this * cruise near a vru


def find_lead(world: WorldState):
    """Nearest vehicle ahead in the ego lane, or None."""
    half = world.lane_width / 2.0
    leads = [a for a in world.agents
             if a.kind == "vehicle" and a.x > 0 and abs(a.y) <= half]
    return min(leads, key=lambda a: a.x) if leads else None


def controller_path(world: WorldState, style: str) -> np.ndarray:
    """Jitter-free kinematic rollout of one style controller.

    normal tracks the lane center at cruise speed with a 1.5 s time gap;
    aggressive targets 1.3x cruise and laterally bypasses any lead slower
    than 0.7x cruise; defensive targets 0.8x cruise with a 2.5 s gap and
    slows for intersections and vulnerable road users.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    speed_factor, time_gap, a_accel, a_brake, lat_rate = _CTRL[style]
    v_c = world.ego_speed
    lead = find_lead(world)
    bypass = (style == "aggressive" and lead is not None
              and lead.vx < SLOW_LEAD_FACTOR * v_c)
    y_target = world.lane_width if bypass else 0.0

    x, y, v = 0.0, 0.0, world.ego_speed
    pts = np.zeros((HORIZON, 2))
    for step in range(HORIZON):
        t = step * DT
        target_v = speed_factor * v_c
        if style == "defensive":
            if world.intersection_distance is not None:
                ahead = world.intersection_distance - x
                if ahead < INTERSECTION_SLOW_RANGE:
                    frac = max(0.35, min(1.0, ahead / INTERSECTION_SLOW_RANGE))
                    target_v = min(target_v, speed_factor * v_c * frac)
            for a in world.agents:
                if a.kind == "vru" and -2.0 < (a.x + a.vx * t) - x < VRU_SLOW_RANGE:
                    target_v = min(target_v, VRU_SPEED_CAP * v_c)
        if lead is not None and not bypass:
            gap = (lead.x + lead.vx * t) - x
            desired = time_gap * v
            if gap < desired:
                target_v = min(target_v, max(0.0, lead.vx + (gap - desired) * 0.8))
        v = max(0.0, v + np.clip(target_v - v, -a_brake * DT, a_accel * DT))
        y += np.clip(y_target - y, -lat_rate * DT, lat_rate * DT)
        x += v * DT
        pts[step] = (x, y)
    return pts


def style_rollout(world: WorldState, style: str,
                  rng: np.random.Generator | None = None,
                  jitter: float = JITTER_SIGMA) -> np.ndarray:
    """Controller output plus clipped Gaussian waypoint jitter."""
    path = controller_path(world, style)
    if jitter > 0:
        if rng is None:
            raise ValueError("jitter > 0 requires an rng")
        noise = rng.normal(0.0, jitter, size=path.shape)
        np.clip(noise, -2.5 * jitter, 2.5 * jitter, out=noise)
        path = path + noise
    return check_trajectory(path)


# ---------------------------------------------------------------------------
# Scenario generation
# ---------------------------------------------------------------------------


def _sample_world(rng: np.random.Generator) -> WorldState:
    lane_width = rng.uniform(3.2, 4.2)
    ego_speed = rng.uniform(8.0, 16.0)
    intersection = float(rng.uniform(15.0, 80.0)) if rng.random() < 0.35 else None
    n_agents = rng.choice(4, p=[0.15, 0.40, 0.30, 0.15])
    agents = []
    for i in range(n_agents):
        if i == 0:
            # in-lane actor ahead; often a slow lead to create dilemmas
            is_vru = rng.random() < 0.2
            x = rng.uniform(8.0, 35.0)
            y = float(np.clip(rng.normal(0.0, 0.3), -lane_width / 2 + 0.2,
                              lane_width / 2 - 0.2))
            if is_vru:
                agents.append(Agent(x, y, rng.uniform(1.0, 4.0), 0.0, "vru"))
            else:
                agents.append(Agent(x, y, rng.uniform(0.35, 1.1) * ego_speed, 0.0,
                                    "vehicle"))
        else:
            side = rng.choice([-1.0, 1.0])
            x = rng.uniform(5.0, 45.0)
            y = side * lane_width + rng.normal(0.0, 0.3)
            if rng.random() < 0.15:
                agents.append(Agent(x, y, rng.uniform(1.0, 4.0),
                                    rng.uniform(-0.5, 0.5), "vru"))
            else:
                vx = rng.uniform(0.5, 1.2) * ego_speed * (1.0 if side > 0 else
                                                          rng.choice([-1.0, 1.0]))
                agents.append(Agent(x, y, vx, 0.0, "vehicle"))
    return WorldState(lane_width, ego_speed, agents, intersection)


def generate_scenarios(seed: int, count: int, weights: MixtureWeights,
                       id_prefix: str = "s") -> list[Scenario]:
    """Sample `count` scenarios; styles follow `weights`, one independent
    substream per scenario so the dataset is a pure function of the seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    w = np.asarray(weights.as_tuple())
    scenarios = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        style = STYLES[rng.choice(3, p=w)]
        world = _sample_world(rng)
        gt = style_rollout(world, style, rng=rng)
        scenarios.append(Scenario(
            id=f"{id_prefix}{seed}-{i:05d}",
            world=world,
            gt=gt,
            style=style,
            obs=featurize(world),
        ))
    return scenarios


# ---------------------------------------------------------------------------
# Key frames
# ---------------------------------------------------------------------------


def find_key_frame(traj: np.ndarray, initial_speed: float,
                   speed_jump: float = 1.0,
                   heading_jump_deg: float = 5.0) -> int | None:
    """First step where the maneuver becomes visible: speed change above
    `speed_jump` m/s per step, or heading change above `heading_jump_deg`.
    Returns the step index, or None for a constant-velocity clip."""
    pts = np.vstack([np.zeros(2), np.asarray(traj)])
    deltas = np.diff(pts, axis=0)
    speeds = np.concatenate([[initial_speed], np.linalg.norm(deltas, axis=1) / DT])
    headings = np.concatenate([[0.0], np.arctan2(deltas[:, 1], deltas[:, 0])])
    jump_rad = math.radians(heading_jump_deg)
    for step in range(1, len(speeds)):
        if abs(speeds[step] - speeds[step - 1]) > speed_jump:
            return step - 1
        dh = (headings[step] - headings[step - 1] + math.pi) % (2 * math.pi) - math.pi
        if abs(dh) > jump_rad:
            return step - 1
    return None


# ---------------------------------------------------------------------------
# Dataset I/O (JSON Lines with a header line)
# ---------------------------------------------------------------------------


def save_scenarios(path, scenarios: list[Scenario], seed: int) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {"schema_version": SCHEMA_VERSION, "seed": seed,
                  "count": len(scenarios)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in scenarios:
            f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_scenarios(path) -> tuple[list[Scenario], dict]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty scenario file")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: schema version {header.get('schema_version')} unsupported"
        )
    scenarios = [Scenario.from_dict(json.loads(line)) for line in lines[1:]]
    return scenarios, header
