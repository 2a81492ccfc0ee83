"""Hard-assignment EM that reduces K sampled plans to one representative.

Candidates are flattened action vectors. A centroid is picked by coverage
(the candidate within distance d of the most probability mass), then a
single diagonal Gaussian cluster is refit for a fixed number of
iterations; its mean, unflattened and accumulated, is the final plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import to_actions, to_states

SIGMA_FLOOR = 1e-4       # per-dimension variance floor (and per-sample Sigma_k)
DEFAULT_RADIUS = 2.0     # coverage radius d, meters
DEFAULT_ITERS = 25


@dataclass
class CandidateSet:
    """K flattened candidate vectors with sampling weights (uniform by
    default: i.i.d. draws)."""

    mus: np.ndarray              # (K, D)
    weights: np.ndarray = None   # (K,), nonnegative, sums to 1

    def __post_init__(self):
        self.mus = np.atleast_2d(np.asarray(self.mus, dtype=np.float64))
        if self.weights is None:
            self.weights = np.full(len(self.mus), 1.0 / len(self.mus))
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if np.any(self.weights < 0):
                raise ValueError("candidate weights must be nonnegative")
            if abs(self.weights.sum() - 1.0) > 1e-9:
                raise ValueError("candidate weights must sum to 1")

    @property
    def K(self) -> int:
        return len(self.mus)


@dataclass
class ClusterState:
    mass: float                  # q-bar
    mean: np.ndarray             # mu-bar
    var: np.ndarray              # Sigma-bar diagonal, floored
    underflow: bool = False
    history: list = field(default_factory=list)


def init_centroid(cands: CandidateSet, d: float = DEFAULT_RADIUS) -> int:
    """Index of the candidate covering the most weight within radius d;
    ties break toward the lowest index."""
    if cands.K < 1:
        raise ValueError("need at least one candidate")
    best_idx, best_cover = 0, -1.0
    for c in range(cands.K):
        dist = np.linalg.norm(cands.mus - cands.mus[c], axis=1)
        cover = float(cands.weights[dist <= d].sum())
        if cover > best_cover + 1e-12:
            best_idx, best_cover = c, cover
    return best_idx


def init_state(cands: CandidateSet, centroid_index: int) -> ClusterState:
    d = cands.mus.shape[1]
    return ClusterState(mass=1.0, mean=cands.mus[centroid_index].copy(),
                        var=np.full(d, SIGMA_FLOOR))


def _log_density(mus: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    diff = mus - mean
    return (-0.5 * np.sum(diff * diff / var, axis=1)
            - 0.5 * np.sum(np.log(2.0 * math.pi * var)))


def em_iterate(state: ClusterState, cands: CandidateSet,
               iters: int = DEFAULT_ITERS) -> ClusterState:
    """Refit the single diagonal-Gaussian cluster.

    Per iteration the candidates are reweighted by their density under the
    current cluster, then mass, mean and (floored) variance are refit.
    Responsibilities are normalized in log space, so the documented
    underflow reset only fires when every density degenerates outright.
    """
    mean, var = state.mean.copy(), state.var.copy()
    mass = state.mass
    underflow = state.underflow
    for _ in range(iters):
        logp = _log_density(cands.mus, mean, var)
        logw = np.log(cands.weights, where=cands.weights > 0,
                      out=np.full_like(cands.weights, -np.inf)) + logp
        peak = logw.max()
        if not np.isfinite(peak):
            # total underflow: fall back to uniform responsibilities
            resp = np.full(cands.K, 1.0 / cands.K)
            mass = 0.0
            underflow = True
        else:
            shifted = np.exp(logw - peak)
            mass = float(shifted.sum() * math.exp(min(peak, 700.0)))
            resp = shifted / shifted.sum()
        mean = resp @ cands.mus
        diff = cands.mus - mean
        var = resp @ (diff * diff) + SIGMA_FLOOR
        var = np.maximum(var, SIGMA_FLOOR)
    out = ClusterState(mass=mass, mean=mean, var=var, underflow=underflow)
    out.history = list(state.history)
    return out


def aggregate_vectors(mus: np.ndarray, weights=None, d: float = DEFAULT_RADIUS,
                      iters: int = DEFAULT_ITERS) -> np.ndarray:
    """Full pipeline on raw flattened vectors; returns the cluster mean."""
    cands = CandidateSet(np.asarray(mus, dtype=np.float64), weights)
    state = init_state(cands, init_centroid(cands, d))
    return em_iterate(state, cands, iters).mean


def aggregate(candidates: list[np.ndarray], d: float = DEFAULT_RADIUS,
              iters: int = DEFAULT_ITERS) -> np.ndarray:
    """Reduce K candidate trajectories (waypoints, meters) to one plan."""
    if len(candidates) < 1:
        raise ValueError("need at least one candidate trajectory")
    flat = np.stack([to_actions(c).reshape(-1) for c in candidates])
    mean = aggregate_vectors(flat, d=d, iters=iters)
    return to_states(mean.reshape(-1, 2))
