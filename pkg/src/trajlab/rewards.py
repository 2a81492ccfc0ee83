"""Semi-synthetic preference pairs and the scalar reward model.

Raw policy samples differ from ground truth in statistics a ranking model
could latch onto instead of style, so each negative is passed through a
small autoencoder trained to reconstruct the sample while matching the
chosen trajectory's velocity mean/std. The reward model itself is an MLP
over (observation, waypoints) trained with a margin Bradley-Terry loss.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    MlpSpec, ParamSet, Tape, Tensor, adam_step, backward, init_mlp_params,
    mlp_apply, mlp_forward, mul, relu, reshape, softplus, sqrt, square, sub,
    tmean, tsum,
)
from .diffusion import (
    ACTION_DIM, DiffusionPolicy, clip_action_steps, sample_candidates,
    to_actions, to_states,
)
from .world import DT, FEATURE_WIDTH, HORIZON, Scenario, check_trajectory

log = logging.getLogger(__name__)

TRAJ_SCALE = 50.0           # brings waypoint inputs to roughly unit range
SPEED_ENVELOPE = 22.0       # m/s; waypoint features saturate beyond this pace
AE_WIDTHS = (ACTION_DIM, 32, 8, 32, ACTION_DIM)
REWARD_HIDDEN = (256, 256)
DEFAULT_DELTA = 0.3         # style-loss weight
DEFAULT_MARGIN = 1.0
DEFAULT_Q = 3               # pairs synthesized per preference record

PROVENANCES = ("raw", "reconstructed", "live-annotated")


class TrainingDiverged(RuntimeError):
    """Raised when a training loss blows past 10x its starting value."""


@dataclass
class PreferencePair:
    id: str
    obs: np.ndarray
    chosen: np.ndarray    # (HORIZON, 2) waypoints
    ignored: np.ndarray   # (HORIZON, 2) waypoints
    provenance: str = "raw"

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.chosen = check_trajectory(self.chosen)
        self.ignored = check_trajectory(self.ignored)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def to_dict(self):
        return {"id": self.id, "obs": self.obs.tolist(),
                "chosen": self.chosen.tolist(), "ignored": self.ignored.tolist(),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], np.asarray(d["obs"]), np.asarray(d["chosen"]),
                   np.asarray(d["ignored"]), d["provenance"])


def save_pairs(path, pairs: list[PreferencePair]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def load_pairs(path) -> list[PreferencePair]:
    with open(path, "r", encoding="utf-8") as f:
        return [PreferencePair.from_dict(json.loads(line))
                for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Style autoencoder
# ---------------------------------------------------------------------------


@dataclass
class StyleAutoencoder:
    """Dense bottleneck autoencoder over flattened action sequences."""

    params: ParamSet
    spec: MlpSpec = field(default_factory=lambda: MlpSpec(AE_WIDTHS))

    def apply(self, actions_flat: np.ndarray) -> np.ndarray:
        return mlp_apply(self.params, self.spec, np.asarray(actions_flat))


def new_autoencoder(rng: np.random.Generator) -> StyleAutoencoder:
    spec = MlpSpec(AE_WIDTHS)
    return StyleAutoencoder(init_mlp_params(spec, rng), spec)


def _velocity_stats_t(actions_flat: Tensor, batch: int):
    """(mean, std) Tensors of per-step speeds, shape (batch,) each.
    Population std convention."""
    steps = reshape(actions_flat, (batch, HORIZON, 2))
    v = mul(sqrt(tsum(square(steps), axis=2)), Tensor(1.0 / DT))   # (B, L)
    m = tmean(v, axis=1)                                           # (B,)
    centered = sub(v, reshape(m, (batch, 1)))
    s = sqrt(tmean(square(centered), axis=1))
    return m, s


def velocity_stats(actions: np.ndarray):
    """Plain-numpy (mean, std) of per-step speeds for one action sequence."""
    v = np.linalg.norm(np.asarray(actions).reshape(HORIZON, 2), axis=1) / DT
    return float(v.mean()), float(v.std())


def autoencoder_loss(ae: StyleAutoencoder, raw_flat: np.ndarray,
                     chosen_flat: np.ndarray, delta: float = DEFAULT_DELTA) -> Tensor:
    """(1-delta) * reconstruction + delta * velocity-statistics match,
    averaged over the batch. Inputs are (B, ACTION_DIM) in meters."""
    raw_flat = np.atleast_2d(raw_flat)
    chosen_flat = np.atleast_2d(chosen_flat)
    batch = len(raw_flat)
    out, _ = mlp_forward(ae.params, ae.spec, Tensor(raw_flat))
    recon = tsum(square(sub(out, Tensor(raw_flat))), axis=1)       # (B,)
    m_i, s_i = _velocity_stats_t(out, batch)
    m_c = np.array([velocity_stats(c)[0] for c in chosen_flat])
    s_c = np.array([velocity_stats(c)[1] for c in chosen_flat])
    style = square(sub(m_i, Tensor(m_c))) + square(sub(s_i, Tensor(s_c)))
    total = mul(recon, Tensor(1.0 - delta)) + mul(style, Tensor(delta))
    return tmean(total)


def train_style_autoencoder(raw_actions: np.ndarray, chosen_actions: np.ndarray,
                            rng: np.random.Generator, delta: float = DEFAULT_DELTA,
                            epochs: int = 100, lr: float = 1e-3,
                            batch_size: int = 32) -> tuple[StyleAutoencoder, list]:
    """Fit the autoencoder on (raw sample, chosen) action pairs.

    Aborts with TrainingDiverged if the running loss exceeds 10x the
    initial loss.
    """
    raw_actions = np.atleast_2d(np.asarray(raw_actions, dtype=np.float64))
    chosen_actions = np.atleast_2d(np.asarray(chosen_actions, dtype=np.float64))
    if len(raw_actions) == 0:
        raise ValueError("autoencoder training needs at least one pair")
    ae = new_autoencoder(rng)
    initial = float(autoencoder_loss(ae, raw_actions, chosen_actions, delta).data)
    history = []
    n = len(raw_actions)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = autoencoder_loss(ae, raw_actions[idx], chosen_actions[idx], delta)
            value = float(loss.data)
            if value > 10.0 * max(initial, 1e-12):
                raise TrainingDiverged(
                    f"autoencoder loss {value:.4g} exceeded 10x initial "
                    f"{initial:.4g} at epoch {epoch}"
                )
            grads = backward(Tape(loss, ae.params), 1.0)
            adam_step(ae.params, grads, lr)
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    return ae, history


# ---------------------------------------------------------------------------
# Pair synthesis
# ---------------------------------------------------------------------------


def sample_raw_pairs(dp: list[Scenario], policy: DiffusionPolicy, q: int,
                     rng: np.random.Generator) -> list[PreferencePair]:
    """q policy samples per preference record, paired against its ground
    truth; cardinality is exactly q * len(dp)."""
    pairs = []
    for scen in dp:
        samples = sample_candidates(policy, scen.obs, q, rng)
        for j, traj in enumerate(samples):
            pairs.append(PreferencePair(
                id=f"{scen.id}-p{j}", obs=scen.obs, chosen=scen.gt,
                ignored=traj, provenance="raw"))
    return pairs


def synthesize_pairs(dp: list[Scenario], policy: DiffusionPolicy,
                     ae: StyleAutoencoder, q: int = DEFAULT_Q,
                     seed: int = 0) -> list[PreferencePair]:
    """Build the semi-synthetic pair set: sample q trajectories per record,
    reconstruct each through the style autoencoder, and emit q pairs."""
    rng = np.random.default_rng(seed)
    raw = sample_raw_pairs(dp, policy, q, rng)
    out = []
    for pair in raw:
        recon_flat = ae.apply(to_actions(pair.ignored).reshape(-1))
        recon = to_states(clip_action_steps(recon_flat.reshape(HORIZON, 2)))
        out.append(PreferencePair(pair.id, pair.obs, pair.chosen, recon,
                                  provenance="reconstructed"))
    return out


# ---------------------------------------------------------------------------
# Bradley-Terry margin loss
# ---------------------------------------------------------------------------


def bt_margin_loss(r_c: float, r_i: float, margin: float = DEFAULT_MARGIN) -> float:
    """-log sigmoid(r_c - r_i) + [margin - (r_c - r_i)]_+ for scalars."""
    d = r_c - r_i
    return float(np.logaddexp(0.0, -d) + max(0.0, margin - d))


def bt_margin_loss_t(r_c: Tensor, r_i: Tensor,
                     margin: float = DEFAULT_MARGIN) -> Tensor:
    """Batch-mean margin loss as a graph Tensor; the hinge subgradient at
    the kink is 0 (relu convention)."""
    d = sub(r_c, r_i)
    per_pair = softplus(mul(d, Tensor(-1.0))) + relu(sub(Tensor(margin), d))
    return tmean(per_pair)


# ---------------------------------------------------------------------------
# Reward model
# ---------------------------------------------------------------------------


@dataclass
class RewardModel:
    params: ParamSet
    spec: MlpSpec
    obs_width: int = FEATURE_WIDTH

    def inputs(self, obs: np.ndarray, traj: np.ndarray) -> np.ndarray:
        """Waypoint features saturate outside the kinematic data envelope
        (no plausible driver sustains SPEED_ENVELOPE), so scores cannot be
        hacked by unbounded linear extrapolation in speed."""
        pts = np.asarray(traj, dtype=np.float64).reshape(HORIZON, 2)
        limits = (SPEED_ENVELOPE * DT * np.arange(1, HORIZON + 1))[:, None]
        feat = np.clip(pts, -limits, limits).reshape(-1) / TRAJ_SCALE
        return np.concatenate([np.asarray(obs, dtype=np.float64), feat])

    def score(self, obs: np.ndarray, traj: np.ndarray) -> float:
        return float(mlp_apply(self.params, self.spec,
                               self.inputs(obs, traj))[0])


def new_reward_model(rng: np.random.Generator,
                     obs_width: int = FEATURE_WIDTH,
                     hidden=REWARD_HIDDEN) -> RewardModel:
    spec = MlpSpec((obs_width + ACTION_DIM, *hidden, 1))
    return RewardModel(init_mlp_params(spec, rng), spec, obs_width)


def reward_pair_loss(model: RewardModel, chosen_in: np.ndarray,
                     ignored_in: np.ndarray,
                     margin: float = DEFAULT_MARGIN) -> Tensor:
    """Margin loss on pre-featurized (B, in) chosen/ignored input batches."""
    out_c, _ = mlp_forward(model.params, model.spec, Tensor(chosen_in))
    out_i, _ = mlp_forward(model.params, model.spec, Tensor(ignored_in))
    b = len(chosen_in)
    return bt_margin_loss_t(reshape(out_c, (b,)), reshape(out_i, (b,)), margin)


def save_reward_model(model: RewardModel, path) -> None:
    from .autodiff import save_params
    save_params(model.params, path, meta={
        "kind": "reward", "widths": list(model.spec.widths),
        "activation": model.spec.activation, "obs_width": model.obs_width})


def load_reward_model(path) -> RewardModel:
    from .autodiff import CheckpointError, load_params
    params, meta = load_params(path)
    if meta.get("kind") != "reward":
        raise CheckpointError(f"{path}: not a reward-model checkpoint")
    return RewardModel(params, MlpSpec(tuple(meta["widths"]), meta["activation"]),
                       int(meta["obs_width"]))


def save_autoencoder(ae: StyleAutoencoder, path) -> None:
    from .autodiff import save_params
    save_params(ae.params, path, meta={
        "kind": "autoencoder", "widths": list(ae.spec.widths),
        "activation": ae.spec.activation})


def load_autoencoder(path) -> StyleAutoencoder:
    from .autodiff import CheckpointError, load_params
    params, meta = load_params(path)
    if meta.get("kind") != "autoencoder":
        raise CheckpointError(f"{path}: not an autoencoder checkpoint")
    return StyleAutoencoder(params, MlpSpec(tuple(meta["widths"]), meta["activation"]))


@dataclass
class RewardTrainResult:
    model: RewardModel
    held_out_accuracy: float
    epochs_ran: int
    flagged_unusable: bool
    history: list = field(default_factory=list)


def pairwise_accuracy(model: RewardModel, pairs: list[PreferencePair]) -> float:
    wins = sum(1 for p in pairs
               if model.score(p.obs, p.chosen) > model.score(p.obs, p.ignored))
    return wins / len(pairs)


def train_reward_model(pairs: list[PreferencePair], seed: int = 0,
                       lr: float = 1e-3, max_epochs: int = 30,
                       batch_size: int = 32, margin: float = DEFAULT_MARGIN,
                       holdout_frac: float = 0.1,
                       patience: int = 5) -> RewardTrainResult:
    """Train the scalar reward model with a 90/10 split and early stop on
    the held-out loss; reports held-out pairwise accuracy.

    Accuracy below 0.5 is flagged: such a model would misorder pairs more
    often than a coin flip and must not drive finetuning.
    """
    if len(pairs) < 20:
        raise ValueError(f"need at least 20 pairs, got {len(pairs)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_val = max(1, int(round(holdout_frac * len(pairs))))
    val = [pairs[i] for i in order[:n_val]]
    train = [pairs[i] for i in order[n_val:]]

    model = new_reward_model(rng, obs_width=len(pairs[0].obs))
    chosen_in = np.stack([model.inputs(p.obs, p.chosen) for p in train])
    ignored_in = np.stack([model.inputs(p.obs, p.ignored) for p in train])
    val_chosen = np.stack([model.inputs(p.obs, p.chosen) for p in val])
    val_ignored = np.stack([model.inputs(p.obs, p.ignored) for p in val])

    best_val, best_params, best_epoch = float("inf"), model.params.copy(), 0
    history = []
    epochs_ran = 0
    for epoch in range(max_epochs):
        epochs_ran = epoch + 1
        idx = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            b = idx[start:start + batch_size]
            loss = reward_pair_loss(model, chosen_in[b], ignored_in[b], margin)
            grads = backward(Tape(loss, model.params), 1.0)
            adam_step(model.params, grads, lr)
        val_loss = float(reward_pair_loss(model, val_chosen, val_ignored,
                                          margin).data)
        history.append(val_loss)
        if val_loss < best_val - 1e-6:
            best_val, best_params, best_epoch = val_loss, model.params.copy(), epoch
        elif epoch - best_epoch >= patience:
            break
    model = RewardModel(best_params, model.spec, model.obs_width)
    accuracy = pairwise_accuracy(model, val)
    flagged = accuracy < 0.5
    if flagged:
        log.warning("reward model held-out accuracy %.3f < 0.5: unusable", accuracy)
    return RewardTrainResult(model, accuracy, epochs_ran, flagged, history)
