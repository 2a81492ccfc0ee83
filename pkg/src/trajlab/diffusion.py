"""Conditional DDPM trajectory generator and its denoising-chain MDP view.

The planner diffuses in *action space*: a trajectory is first-differenced
into per-step displacements, flattened, and scaled by a fixed constant so
the diffusion variable is roughly unit range. Reverse sampling follows
the standard ancestral transition

    x_{t-1} = (1/sqrt(a_t)) (x_t - (1-a_t)/sqrt(1-abar_t) * eps_hat) + sigma_t z

and every reverse step doubles as one action of a T-step MDP whose
per-step Gaussian log-density is recorded, which is what the RL
finetuning differentiates later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MlpSpec, ParamSet, Tensor, adam_step, backward, init_mlp_params,
    mlp_apply, mlp_forward, mul, sub, square, tsum, Tape,
)
from .world import FEATURE_WIDTH, HORIZON, MAX_STEP_DISP, check_trajectory

ACTION_DIM = 2 * HORIZON      # flattened per-step displacements
TIME_EMB_DIM = 16
DEFAULT_ACTION_SCALE = 3.0    # meters per unit of the diffusion variable
DEFAULT_SIGMA_MIN = 1e-3      # floor keeps the step density proper at tiny beta


# ---------------------------------------------------------------------------
# Action-space projection
# ---------------------------------------------------------------------------


def to_actions(traj: np.ndarray) -> np.ndarray:
    """Waypoints -> per-step displacements (the start point is the origin)."""
    traj = np.asarray(traj, dtype=np.float64)
    pts = np.vstack([np.zeros(2), traj])
    return np.diff(pts, axis=0)


def to_states(actions: np.ndarray) -> np.ndarray:
    """Per-step displacements -> waypoints; exact inverse of to_actions."""
    return np.cumsum(np.asarray(actions, dtype=np.float64), axis=0)


def clip_action_steps(actions: np.ndarray) -> np.ndarray:
    """Clamp each displacement to the physical step ceiling. Identity for
    anything a trained model emits; keeps generated trajectories inside
    the trajectory contract even for untrained nets."""
    actions = np.asarray(actions, dtype=np.float64)
    norms = np.linalg.norm(actions, axis=-1, keepdims=True)
    scale = np.minimum(1.0, (MAX_STEP_DISP - 1e-9) / np.maximum(norms, 1e-12))
    return actions * scale


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha tables; index i holds step t = i + 1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self):
        return {"betas": self.betas.tolist()}


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    betas = np.linspace(beta_start, beta_end, T)
    return schedule_from_betas(betas)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("betas must lie in (0, 1)")
    alphas = 1.0 - betas
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        sigmas=np.sqrt(betas),
    )


def time_embedding(t: int, dim: int = TIME_EMB_DIM) -> np.ndarray:
    """Sinusoidal features of the integer diffusion step."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass
class DiffusionPolicy:
    """Noise-prediction MLP plus everything needed to sample from it."""

    params: ParamSet
    spec: MlpSpec
    schedule: NoiseSchedule
    obs_width: int = FEATURE_WIDTH
    action_scale: float = DEFAULT_ACTION_SCALE
    sigma_min: float = DEFAULT_SIGMA_MIN

    def sigma_tilde(self, t: int) -> float:
        return max(self.schedule.sigmas[t - 1], self.sigma_min)

    def net_input(self, x: np.ndarray, t: int, obs: np.ndarray) -> np.ndarray:
        """concat(noisy actions, time embedding, observation); x may be a
        batch (K, ACTION_DIM) or a single vector."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        temb = time_embedding(t)
        rows = x.shape[0]
        return np.concatenate(
            [x, np.tile(temb, (rows, 1)),
             np.tile(np.asarray(obs, dtype=np.float64), (rows, 1))], axis=1)

    def predict_eps(self, x: np.ndarray, t: int, obs: np.ndarray) -> np.ndarray:
        """No-graph noise prediction; shape follows x."""
        single = np.asarray(x).ndim == 1
        out = mlp_apply(self.params, self.spec, self.net_input(x, t, obs))
        return out[0] if single else out

    def normalize(self, actions_m: np.ndarray) -> np.ndarray:
        return np.asarray(actions_m, dtype=np.float64).reshape(-1) / self.action_scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        """Back to per-step displacements in meters, clamped to the physical
        step ceiling so emitted trajectories satisfy the contract."""
        actions = np.asarray(x, dtype=np.float64).reshape(HORIZON, 2) * self.action_scale
        return clip_action_steps(actions)

    def copy(self) -> "DiffusionPolicy":
        return DiffusionPolicy(self.params.copy(), self.spec, self.schedule,
                               self.obs_width, self.action_scale, self.sigma_min)


def new_policy(schedule: NoiseSchedule, rng: np.random.Generator,
               hidden=(256, 256), obs_width: int = FEATURE_WIDTH,
               action_scale: float = DEFAULT_ACTION_SCALE,
               sigma_min: float = DEFAULT_SIGMA_MIN) -> DiffusionPolicy:
    in_width = ACTION_DIM + TIME_EMB_DIM + obs_width
    spec = MlpSpec((in_width, *hidden, ACTION_DIM), activation="relu")
    return DiffusionPolicy(init_mlp_params(spec, rng), spec, schedule,
                           obs_width, action_scale, sigma_min)


# ---------------------------------------------------------------------------
# Pretraining (noise-prediction objective)
# ---------------------------------------------------------------------------


def pretrain_loss(policy: DiffusionPolicy, obs: np.ndarray, x0: np.ndarray,
                  t_idx: np.ndarray, eps: np.ndarray) -> Tensor:
    """Batch-mean squared noise prediction error with the (t, eps) draws
    fixed by the caller, so the loss is a deterministic function of the
    parameters (finite differences rely on that).

    obs (B, F); x0 (B, ACTION_DIM) normalized clean actions; t_idx (B,)
    in 1..T; eps (B, ACTION_DIM).
    """
    abar = policy.schedule.alpha_bars[t_idx - 1][:, None]
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    temb = np.stack([time_embedding(int(t)) for t in t_idx])
    inp = np.concatenate([x_t, temb, obs], axis=1)
    pred, _ = mlp_forward(policy.params, policy.spec, Tensor(inp))
    diff = sub(pred, Tensor(eps))
    return mul(tsum(square(diff)), Tensor(1.0 / len(t_idx)))


def pretrain_step(policy: DiffusionPolicy, obs: np.ndarray, gt_actions: np.ndarray,
                  rng: np.random.Generator, lr: float) -> float:
    """One optimizer step of the denoising objective on a batch of
    (observation, ground-truth action sequence in meters) pairs.
    Returns the loss; a non-finite loss skips the update."""
    if len(obs) == 0:
        raise ValueError("pretrain_step: empty batch")
    x0 = np.stack([a.reshape(-1) for a in gt_actions]) / policy.action_scale
    t_idx = rng.integers(1, policy.schedule.T + 1, size=len(obs))
    eps = rng.standard_normal((len(obs), ACTION_DIM))
    loss = pretrain_loss(policy, np.asarray(obs), x0, t_idx, eps)
    value = float(loss.data)
    if not np.isfinite(value):
        return value
    grads = backward(Tape(loss, policy.params), 1.0)
    adam_step(policy.params, grads, lr)
    return value


def eval_pretrain_loss(policy: DiffusionPolicy, obs: np.ndarray,
                       gt_actions: np.ndarray, seed: int = 0,
                       draws: int = 256) -> float:
    """Monte-Carlo estimate of the denoising loss with a fixed noise stream;
    used to compare models on equal footing."""
    rng = np.random.default_rng(seed)
    reps = max(1, draws // max(1, len(obs)))
    obs_rep = np.repeat(np.asarray(obs), reps, axis=0)
    x0 = np.repeat(np.stack([a.reshape(-1) for a in gt_actions]), reps,
                   axis=0) / policy.action_scale
    t_idx = rng.integers(1, policy.schedule.T + 1, size=len(obs_rep))
    eps = rng.standard_normal((len(obs_rep), ACTION_DIM))
    return float(pretrain_loss(policy, obs_rep, x0, t_idx, eps).data)


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def reverse_mean(policy: DiffusionPolicy, x_t: np.ndarray, t: int,
                 obs: np.ndarray) -> np.ndarray:
    """Posterior mean of the ancestral transition at step t (1..T)."""
    sched = policy.schedule
    a_t = sched.alphas[t - 1]
    abar_t = sched.alpha_bars[t - 1]
    eps_hat = policy.predict_eps(x_t, t, obs)
    return (x_t - (1.0 - a_t) / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(a_t)


def gaussian_logprob(a: np.ndarray, mean: np.ndarray, sigma: float) -> float:
    """Isotropic Gaussian log-density of `a` (any shape, flattened)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    d = a.size
    return float(-np.sum((a - mean) ** 2) / (2.0 * sigma ** 2)
                 - 0.5 * d * math.log(2.0 * math.pi * sigma ** 2))


def reverse_step(policy: DiffusionPolicy, x_t: np.ndarray, t: int,
                 obs: np.ndarray, z: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
    """One ancestral sampling step; returns (x_{t-1}, step log-prob).

    Pass `z` to pin the step noise, otherwise it is drawn from `rng`.
    """
    if not (1 <= t <= policy.schedule.T):
        raise ValueError(f"t must be in 1..{policy.schedule.T}, got {t}")
    mean = reverse_mean(policy, x_t, t, obs)
    sigma = policy.sigma_tilde(t)
    if z is None:
        if rng is None:
            raise ValueError("reverse_step needs either z or rng")
        z = rng.standard_normal(mean.shape)
    a = mean + sigma * np.asarray(z, dtype=np.float64)
    return a, gaussian_logprob(a, mean, sigma)


def step_logprob_graph(policy: DiffusionPolicy, x_t: np.ndarray, t: int,
                       obs: np.ndarray, actions: np.ndarray) -> Tensor:
    """Differentiable log pi(actions | x_t, t, obs) for a batch of chains.

    x_t, actions: (K, ACTION_DIM) stored chain states/actions (constants);
    gradients flow through the noise prediction into the step mean.
    Returns a (K,) Tensor.
    """
    sched = policy.schedule
    a_t = sched.alphas[t - 1]
    abar_t = sched.alpha_bars[t - 1]
    sigma = policy.sigma_tilde(t)
    x_t = np.atleast_2d(x_t)
    actions = np.atleast_2d(actions)
    eps, _ = mlp_forward(policy.params, policy.spec,
                         Tensor(policy.net_input(x_t, t, obs)))
    mean = mul(sub(Tensor(x_t), mul(eps, Tensor((1.0 - a_t) / math.sqrt(1.0 - abar_t)))),
               Tensor(1.0 / math.sqrt(a_t)))
    se = tsum(square(sub(Tensor(actions), mean)), axis=1)
    const = -0.5 * ACTION_DIM * math.log(2.0 * math.pi * sigma ** 2)
    return mul(se, Tensor(-1.0 / (2.0 * sigma ** 2))) + Tensor(const)


# ---------------------------------------------------------------------------
# Denoising-chain rollouts
# ---------------------------------------------------------------------------


@dataclass
class DenoisingRollout:
    """One reverse chain recorded as a T-step MDP trajectory.

    xs[0] is x_T (shared group noise), xs[T] is the terminal x_0; the MDP
    state at time t is (obs, xs[t]) and its action is xs[t+1]. Everything
    lives in the normalized diffusion space.
    """

    obs: np.ndarray
    xs: np.ndarray          # (T+1, ACTION_DIM)
    log_probs: np.ndarray   # (T,)

    @property
    def T(self) -> int:
        return len(self.log_probs)

    def state(self, t: int) -> np.ndarray:
        return self.xs[t]

    def action(self, t: int) -> np.ndarray:
        return self.xs[t + 1]

    @property
    def x0(self) -> np.ndarray:
        return self.xs[-1]

    def trajectory(self, policy: DiffusionPolicy) -> np.ndarray:
        return to_states(policy.denormalize(self.x0))


@dataclass
class RolloutGroup:
    """K chains sharing (observation, initial noise)."""

    obs: np.ndarray
    z: np.ndarray
    rollouts: list[DenoisingRollout]
    rewards: np.ndarray | None = None

    @property
    def K(self) -> int:
        return len(self.rollouts)


def sample_group(policy: DiffusionPolicy, obs: np.ndarray, K: int,
                 rng: np.random.Generator, shared_init: bool = True,
                 zero_step_noise: bool = False) -> RolloutGroup:
    """Sample K reverse chains under one observation.

    With shared_init (the RL grouping), one x_T is drawn and all members
    share it while their per-step noises stay independent; without it,
    each member draws its own x_T (plain model inference).
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    T = policy.schedule.T
    obs = np.asarray(obs, dtype=np.float64)
    z_init = rng.standard_normal(ACTION_DIM)
    if shared_init:
        x = np.tile(z_init, (K, 1))
    else:
        x = rng.standard_normal((K, ACTION_DIM))
    xs = np.zeros((K, T + 1, ACTION_DIM))
    log_probs = np.zeros((K, T))
    xs[:, 0] = x
    for step in range(T):
        t = T - step
        a_t = policy.schedule.alphas[t - 1]
        abar_t = policy.schedule.alpha_bars[t - 1]
        eps_hat = mlp_apply(policy.params, policy.spec,
                            policy.net_input(x, t, obs))
        mean = (x - (1.0 - a_t) / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(a_t)
        sigma = policy.sigma_tilde(t)
        noise = np.zeros_like(mean) if zero_step_noise \
            else rng.standard_normal(mean.shape)
        x = mean + sigma * noise
        sq = np.sum((x - mean) ** 2, axis=1)
        log_probs[:, step] = (-sq / (2.0 * sigma ** 2)
                              - 0.5 * ACTION_DIM * math.log(2.0 * math.pi * sigma ** 2))
        xs[:, step + 1] = x
    rollouts = [DenoisingRollout(obs, xs[k], log_probs[k]) for k in range(K)]
    return RolloutGroup(obs=obs, z=z_init, rollouts=rollouts)


def sample_candidates(policy: DiffusionPolicy, obs: np.ndarray, K: int,
                      rng: np.random.Generator,
                      shared_init: bool = False) -> list[np.ndarray]:
    """K sampled trajectories in meters (independent x_T by default)."""
    group = sample_group(policy, obs, K, rng, shared_init=shared_init)
    return [check_trajectory(r.trajectory(policy)) for r in group.rollouts]


# ---------------------------------------------------------------------------
# Training loop + checkpoints
# ---------------------------------------------------------------------------


def train_denoiser(policy: DiffusionPolicy, obs_all: np.ndarray,
                   gt_actions_all: np.ndarray, steps: int, batch_size: int,
                   lr: float, rng: np.random.Generator,
                   log_every: int = 0) -> list[float]:
    """Minibatch pretraining loop; returns the per-step loss history."""
    n = len(obs_all)
    losses = []
    for step in range(steps):
        # with replacement: batch size is independent of dataset size, so a
        # single-sample overfit run still gets full batches of (t, eps) draws
        idx = rng.integers(0, n, size=batch_size)
        loss = pretrain_step(policy, obs_all[idx], gt_actions_all[idx], rng, lr)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            print(f"  pretrain step {step + 1}/{steps}  loss {recent:.4f}")
    return losses


def save_policy(policy: DiffusionPolicy, path) -> None:
    from .autodiff import save_params
    meta = {
        "kind": "policy",
        "schedule": policy.schedule.to_dict(),
        "widths": list(policy.spec.widths),
        "activation": policy.spec.activation,
        "obs_width": policy.obs_width,
        "action_scale": policy.action_scale,
        "sigma_min": policy.sigma_min,
    }
    save_params(policy.params, path, meta=meta)


def load_policy(path) -> DiffusionPolicy:
    from .autodiff import CheckpointError, load_params
    params, meta = load_params(path)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{path}: not a policy checkpoint")
    spec = MlpSpec(tuple(meta["widths"]), meta["activation"])
    schedule = schedule_from_betas(meta["schedule"]["betas"])
    return DiffusionPolicy(params, spec, schedule, int(meta["obs_width"]),
                           float(meta["action_scale"]), float(meta["sigma_min"]))
