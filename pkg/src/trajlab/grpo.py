"""Group-relative policy optimization over the denoising chain.

One finetuning step on a scenario: sample a K-chain group sharing the
initial noise, score each terminal plan with the reward model, normalize
the rewards within the group, and take one optimizer step on

    L = L_RL + alpha * L_BC

where L_RL is discounted REINFORCE over the chain's per-step Gaussian
log-densities (recomputed under the current parameters) and L_BC is the
negative log-likelihood of frozen-reference rollouts. A short supervised
refresh on the preference set follows the RL epochs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, adam_step, backward, mul, tsum
from .diffusion import (
    DenoisingRollout, DiffusionPolicy, RolloutGroup, pretrain_step,
    sample_group, step_logprob_graph, to_actions,
)
from .rewards import RewardModel
from .world import Scenario

log = logging.getLogger(__name__)

ADV_STD_FLOOR = 1e-8
BC_CACHE_SIZE = 4   # reference rollouts per scenario, resampled each epoch


@dataclass
class FinetuneConfig:
    group_size: int = 8
    gamma: float = 0.99
    bc_weight: float = 1e-1
    lr: float = 5e-5
    epochs: int = 20
    refresh_epochs: int = 100
    refresh_lr: float = 1e-4
    refresh_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group size must be >= 2, got {self.group_size}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.bc_weight < 0.0:
            raise ValueError(f"bc weight must be >= 0, got {self.bc_weight}")


def group_advantages(rewards: np.ndarray) -> np.ndarray:
    """(r - mean) / population std; all zeros when the group is degenerate
    (std below 1e-8), which keeps the estimator unbiased at zero."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError(f"need at least 2 rewards, got {rewards.size}")
    std = rewards.std()
    if std < ADV_STD_FLOOR:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def rl_loss_t(policy: DiffusionPolicy, group: RolloutGroup,
              advantages: np.ndarray, gamma: float) -> Tensor:
    """Discounted REINFORCE loss over the group as a graph Tensor.

    Per-step log-probs are re-evaluated under the current parameters on the
    stored (state, action) pairs; the chain step at MDP time t carries
    discount gamma^(T-1-t). Scalar value:
        -(1/(K*T)) sum_k sum_t logpi * gamma^(T-1-t) * adv_k
    """
    K = group.K
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.shape != (K,):
        raise ValueError(
            f"advantages shape {advantages.shape} does not match group size {K}"
        )
    T = group.rollouts[0].T
    x_stack = np.stack([r.xs for r in group.rollouts])   # (K, T+1, D)
    loss = Tensor(0.0)
    for t_mdp in range(T):
        t_diff = T - t_mdp
        logp = step_logprob_graph(policy, x_stack[:, t_mdp], t_diff,
                                  group.obs, x_stack[:, t_mdp + 1])
        w = -(gamma ** (T - 1 - t_mdp)) * advantages / (K * T)
        loss = loss + tsum(mul(logp, Tensor(w)))
    return loss


def rl_loss(policy: DiffusionPolicy, group: RolloutGroup,
            advantages: np.ndarray, gamma: float):
    """Convenience wrapper returning (scalar value, gradients dict)."""
    loss = rl_loss_t(policy, group, advantages, gamma)
    grads = backward(Tape(loss, policy.params), 1.0)
    return float(loss.data), grads


def bc_loss_t(policy: DiffusionPolicy,
              reference_rollouts: list[DenoisingRollout]) -> Tensor:
    """Mean negative log-likelihood of reference chain actions under the
    current policy."""
    if not reference_rollouts:
        raise ValueError("bc_loss needs at least one reference rollout")
    T = reference_rollouts[0].T
    R = len(reference_rollouts)
    x_stack = np.stack([r.xs for r in reference_rollouts])
    obs = reference_rollouts[0].obs
    loss = Tensor(0.0)
    for t_mdp in range(T):
        logp = step_logprob_graph(policy, x_stack[:, t_mdp], T - t_mdp,
                                  obs, x_stack[:, t_mdp + 1])
        loss = loss + tsum(mul(logp, Tensor(-1.0 / (R * T))))
    return loss


def bc_loss(policy: DiffusionPolicy,
            reference_rollouts: list[DenoisingRollout]):
    loss = bc_loss_t(policy, reference_rollouts)
    grads = backward(Tape(loss, policy.params), 1.0)
    return float(loss.data), grads


@dataclass
class EpochMetrics:
    epoch: int
    mean_reward: float
    mean_abs_advantage: float
    rl_loss: float
    bc_loss: float
    skipped: int = 0

    def to_dict(self):
        return {"epoch": self.epoch, "mean_reward": self.mean_reward,
                "mean_abs_advantage": self.mean_abs_advantage,
                "rl_loss": self.rl_loss, "bc_loss": self.bc_loss,
                "skipped": self.skipped}


def dpgrpo_epoch(policy: DiffusionPolicy, reference: DiffusionPolicy,
                 reward_model: RewardModel, dp: list[Scenario],
                 cfg: FinetuneConfig, rng: np.random.Generator,
                 epoch: int = 0) -> EpochMetrics:
    """One pass over the preference scenarios: per scenario sample a group
    under the current policy, score the terminal plans, normalize within
    the group, and take one optimizer step on the combined loss. Scenarios
    whose rewards come back non-finite are skipped and counted."""
    order = rng.permutation(len(dp))
    rewards_seen, abs_adv, rl_vals, bc_vals = [], [], [], []
    skipped = 0
    for i in order:
        scen = dp[i]
        group = sample_group(policy, scen.obs, cfg.group_size, rng,
                             shared_init=True)
        rewards = np.array([reward_model.score(scen.obs, r.trajectory(policy))
                            for r in group.rollouts])
        if not np.all(np.isfinite(rewards)):
            skipped += 1
            log.warning("scenario %s: non-finite reward, skipped", scen.id)
            continue
        group.rewards = rewards
        adv = group_advantages(rewards)
        loss = rl_loss_t(policy, group, adv, cfg.gamma)
        rl_vals.append(float(loss.data))
        if cfg.bc_weight > 0.0:
            ref_group = sample_group(reference, scen.obs, BC_CACHE_SIZE, rng,
                                     shared_init=False)
            bc = bc_loss_t(policy, ref_group.rollouts)
            bc_vals.append(float(bc.data))
            loss = loss + mul(bc, Tensor(cfg.bc_weight))
        grads = backward(Tape(loss, policy.params), 1.0)
        adam_step(policy.params, grads, cfg.lr)
        rewards_seen.append(rewards.mean())
        abs_adv.append(np.abs(adv).mean())
    return EpochMetrics(
        epoch=epoch,
        mean_reward=float(np.mean(rewards_seen)) if rewards_seen else float("nan"),
        mean_abs_advantage=float(np.mean(abs_adv)) if abs_adv else 0.0,
        rl_loss=float(np.mean(rl_vals)) if rl_vals else 0.0,
        bc_loss=float(np.mean(bc_vals)) if bc_vals else 0.0,
        skipped=skipped,
    )


def finetune(policy: DiffusionPolicy, reward_model: RewardModel,
             dp: list[Scenario], cfg: FinetuneConfig,
             on_epoch=None) -> tuple[DiffusionPolicy, list[EpochMetrics]]:
    """Run the full RL loop against a frozen copy of the starting policy.

    Per-epoch RNG streams are derived from (seed, epoch) so interrupted
    runs resumed from an epoch checkpoint reproduce the uninterrupted
    result. Returns (frozen reference, metrics); `policy` is updated in
    place."""
    reference = policy.copy()
    metrics = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(epoch + 1)[-1])
        m = dpgrpo_epoch(policy, reference, reward_model, dp, cfg, rng, epoch)
        metrics.append(m)
        if on_epoch is not None:
            on_epoch(epoch, m)
    return reference, metrics


def supervised_refresh(policy: DiffusionPolicy, dp: list[Scenario],
                       epochs: int = 100, lr: float = 3e-4,
                       batch_size: int = 16, seed: int = 0) -> list[float]:
    """Short supervised pass on the preference ground truths using the
    pretraining objective; zero epochs is a no-op."""
    if epochs == 0 or not dp:
        return []
    rng = np.random.default_rng(seed)
    obs = np.stack([s.obs for s in dp])
    actions = np.stack([to_actions(s.gt) for s in dp])
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(dp))
        for start in range(0, len(dp), batch_size):
            idx = order[start:start + batch_size]
            losses.append(pretrain_step(policy, obs[idx], actions[idx], rng, lr))
    return losses
