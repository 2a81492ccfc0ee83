"""End-to-end workflow as composable commands over one run directory.

Every command is a pure function of (config, upstream artifacts): re-runs
produce byte-identical artifacts, and downstream commands fail with the
name of any missing prerequisite. Timestamps are kept out of payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion, emselect, grpo, metrics, mining, rewards, world
from .config import RunConfig

PREF_STYLES = ("aggressive", "defensive")


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self):
        return self.root / "data"

    @property
    def checkpoints(self):
        return self.root / "checkpoints"

    @property
    def pairs(self):
        return self.root / "pairs"

    @property
    def metrics(self):
        return self.root / "metrics"

    @property
    def annotation(self):
        return self.root / "annotation"

    def ensure(self):
        for d in (self.data, self.checkpoints, self.pairs, self.metrics):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def train_set(self):
        return self.data / "train.jsonl"

    def pref_set(self, style):
        return self.data / f"pref_{style}.jsonl"

    def normal_eval_set(self):
        return self.data / "eval_normal.jsonl"

    def pretrained(self):
        return self.checkpoints / "pretrained.ckpt"

    def dp_train(self, style):
        return self.pairs / f"dp_{style}.jsonl"

    def dp_eval(self, style):
        return self.pairs / f"dp_{style}_eval.jsonl"

    def pair_set(self, style):
        return self.pairs / f"pairs_{style}.jsonl"

    def autoencoder(self, style):
        return self.checkpoints / f"autoencoder_{style}.ckpt"

    def reward(self, style):
        return self.checkpoints / f"reward_{style}.ckpt"

    def finetuned_rl(self, tag):
        return self.checkpoints / f"finetuned_{tag}_rl.ckpt"

    def finetuned(self, tag):
        return self.checkpoints / f"finetuned_{tag}.ckpt"

    def epoch_ckpt(self, tag, epoch):
        return self.checkpoints / f"finetuned_{tag}_epoch{epoch:03d}.ckpt"

    def finetune_metrics(self, tag):
        return self.metrics / f"finetune_{tag}.jsonl"

    def eval_report(self, tag):
        return self.metrics / f"eval_{tag}.json"

    def boe_records(self, tag):
        return self.metrics / f"boe_{tag}.jsonl"

    def sweep_report(self, kind, value):
        return self.metrics / f"sweep_{kind}_{value}.json"


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"missing artifact {path} — run `{hint}` first")
    return path


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> dict:
    """Training mixture, the two style-pure preference splits, and a
    normal split held out for retention checks."""
    paths = RunPaths(cfg.out_dir).ensure()
    mix = world.MixtureWeights(cfg.w_normal, cfg.w_aggressive, cfg.w_defensive)
    train = world.generate_scenarios([cfg.seed, 0], cfg.train_count, mix, "tr")
    world.save_scenarios(paths.train_set(), train, [cfg.seed, 0])
    for k, style in enumerate(PREF_STYLES, start=1):
        pure = world.MixtureWeights(*(1.0 if s == style else 0.0
                                      for s in world.STYLES))
        scen = world.generate_scenarios([cfg.seed, k], cfg.pref_count, pure,
                                        style[:2])
        world.save_scenarios(paths.pref_set(style), scen, [cfg.seed, k])
    normal = world.generate_scenarios([cfg.seed, 3], cfg.eval_count,
                                      world.MixtureWeights(1.0, 0.0, 0.0), "ev")
    world.save_scenarios(paths.normal_eval_set(), normal, [cfg.seed, 3])
    return {"train": str(paths.train_set())}


def _schedule(cfg: RunConfig):
    return diffusion.build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)


def cmd_pretrain(cfg: RunConfig, log_every: int = 500) -> dict:
    paths = RunPaths(cfg.out_dir).ensure()
    scenarios, _ = world.load_scenarios(
        _require(paths.train_set(), "gen-data"))
    rng = np.random.default_rng([cfg.seed, 10])
    policy = diffusion.new_policy(_schedule(cfg), rng, hidden=tuple(cfg.hidden),
                                  action_scale=cfg.action_scale,
                                  sigma_min=cfg.sigma_min)
    obs = np.stack([s.obs for s in scenarios])
    actions = np.stack([diffusion.to_actions(s.gt) for s in scenarios])
    losses = diffusion.train_denoiser(policy, obs, actions, cfg.pretrain_steps,
                                      cfg.pretrain_batch, cfg.pretrain_lr, rng,
                                      log_every=log_every)
    diffusion.save_policy(policy, paths.pretrained())
    _write_json(paths.metrics / "pretrain.json", {
        "steps": cfg.pretrain_steps,
        "initial_loss": float(np.mean(losses[:20])),
        "final_loss": float(np.mean(losses[-50:])),
    })
    return {"checkpoint": str(paths.pretrained()),
            "final_loss": float(np.mean(losses[-50:]))}


def cmd_mine(cfg: RunConfig, style: str) -> dict:
    paths = RunPaths(cfg.out_dir).ensure()
    scenarios, _ = world.load_scenarios(
        _require(paths.pref_set(style), "gen-data"))
    policy = diffusion.load_policy(_require(paths.pretrained(), "pretrain"))
    report = mining.mine_preference_set(
        scenarios, policy, style, seed=cfg.seed + 17,
        samples_per_scenario=cfg.mining_samples,
        mining_threshold=cfg.mining_threshold, ade_reject=cfg.ade_reject,
        speed_jump=cfg.keyframe_speed_jump,
        heading_jump_deg=cfg.keyframe_heading_jump_deg)
    kept = report.kept
    if not kept:
        print(f"mine[{style}]: empty preference set "
              f"(stats {report.stats()}); nothing written")
        return {"kept": 0, "stats": report.stats()}
    rng = np.random.default_rng([cfg.seed, 20])
    order = rng.permutation(len(kept))
    n_eval = max(1, int(round(cfg.eval_frac * len(kept)))) if len(kept) > 1 else 0
    eval_set = [kept[i] for i in order[:n_eval]]
    train_set = [kept[i] for i in order[n_eval:]]
    world.save_scenarios(paths.dp_train(style), train_set, [cfg.seed, 20])
    world.save_scenarios(paths.dp_eval(style), eval_set, [cfg.seed, 20])
    _write_json(paths.metrics / f"mine_{style}.json", report.stats())
    return {"kept": len(kept), "train": len(train_set), "eval": len(eval_set),
            "stats": report.stats()}


def cmd_build_pairs(cfg: RunConfig, style: str) -> dict:
    paths = RunPaths(cfg.out_dir).ensure()
    dp, _ = world.load_scenarios(_require(paths.dp_train(style), "mine"))
    policy = diffusion.load_policy(_require(paths.pretrained(), "pretrain"))
    rng = np.random.default_rng([cfg.seed, 30])
    raw = rewards.sample_raw_pairs(dp, policy, cfg.pair_q, rng)
    subset = raw[:min(cfg.ae_subset, len(raw))]
    raw_actions = np.stack([diffusion.to_actions(p.ignored).reshape(-1)
                            for p in subset])
    chosen_actions = np.stack([diffusion.to_actions(p.chosen).reshape(-1)
                               for p in subset])
    ae, history = rewards.train_style_autoencoder(
        raw_actions, chosen_actions, rng, delta=cfg.style_delta,
        epochs=cfg.ae_epochs, lr=cfg.ae_lr, batch_size=cfg.ae_batch)
    pairs = rewards.synthesize_pairs(dp, policy, ae, q=cfg.pair_q,
                                     seed=cfg.seed + 31)
    rewards.save_pairs(paths.pair_set(style), pairs)
    rewards.save_autoencoder(ae, paths.autoencoder(style))
    _write_json(paths.metrics / f"autoencoder_{style}.json", {
        "pairs": len(pairs), "ae_initial_loss": history[0],
        "ae_final_loss": history[-1]})
    return {"pairs": len(pairs), "path": str(paths.pair_set(style))}


def cmd_train_reward(cfg: RunConfig, style: str) -> dict:
    paths = RunPaths(cfg.out_dir).ensure()
    pairs = rewards.load_pairs(_require(paths.pair_set(style), "build-pairs"))
    result = rewards.train_reward_model(
        pairs, seed=cfg.seed + 41, lr=cfg.reward_lr,
        max_epochs=cfg.reward_epochs, batch_size=cfg.reward_batch,
        margin=cfg.margin, patience=cfg.reward_patience)
    rewards.save_reward_model(result.model, paths.reward(style))
    _write_json(paths.metrics / f"reward_{style}.json", {
        "held_out_accuracy": result.held_out_accuracy,
        "epochs_ran": result.epochs_ran,
        "flagged_unusable": result.flagged_unusable})
    return {"accuracy": result.held_out_accuracy,
            "flagged": result.flagged_unusable}


def _load_dp_fraction(paths: RunPaths, cfg: RunConfig, style: str,
                      fraction: float):
    dp, _ = world.load_scenarios(_require(paths.dp_train(style), "mine"))
    if fraction >= 1.0:
        return dp
    rng = np.random.default_rng([cfg.seed, 50])
    order = rng.permutation(len(dp))
    n = max(1, int(round(fraction * len(dp))))
    return [dp[i] for i in order[:n]]


def cmd_finetune(cfg: RunConfig, style: str, alpha: float | None = None,
                 fraction: float = 1.0, tag: str | None = None,
                 epochs: int | None = None) -> dict:
    """RL epochs against the frozen pretrained reference, resumable from
    the newest epoch checkpoint (per-epoch RNG streams make a resumed run
    identical to an uninterrupted one)."""
    paths = RunPaths(cfg.out_dir).ensure()
    tag = tag or style
    epochs = epochs if epochs is not None else cfg.rl_epochs
    dp = _load_dp_fraction(paths, cfg, style, fraction)
    reward_model = rewards.load_reward_model(
        _require(paths.reward(style), "train-reward"))
    reference = diffusion.load_policy(_require(paths.pretrained(), "pretrain"))

    ft_cfg = grpo.FinetuneConfig(
        group_size=cfg.group_size, gamma=cfg.gamma,
        bc_weight=cfg.bc_weight if alpha is None else alpha,
        lr=cfg.rl_lr, epochs=epochs, seed=cfg.seed + 60)

    # resume from the newest epoch checkpoint if one exists
    start_epoch = 0
    policy = None
    for epoch in range(epochs - 1, -1, -1):
        ck = paths.epoch_ckpt(tag, epoch)
        if ck.exists():
            policy = diffusion.load_policy(ck)
            start_epoch = epoch + 1
            break
    if policy is None:
        policy = diffusion.load_policy(paths.pretrained())

    history = []
    mfile = paths.finetune_metrics(tag)
    if start_epoch > 0 and mfile.exists():
        with open(mfile, "r", encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        history = lines[:start_epoch]

    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence(ft_cfg.seed).spawn(epoch + 1)[-1])
        m = grpo.dpgrpo_epoch(policy, reference, reward_model, dp, ft_cfg,
                              rng, epoch)
        history.append(m.to_dict())
        print(f"  finetune[{tag}] epoch {epoch + 1}/{epochs}"
              f"  reward {m.mean_reward:.4f}  bc {m.bc_loss:.3f}")
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == epochs - 1:
            diffusion.save_policy(policy, paths.epoch_ckpt(tag, epoch))
            with open(mfile, "w", encoding="utf-8") as f:
                for row in history:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
    diffusion.save_policy(policy, paths.finetuned_rl(tag))
    _write_json(paths.metrics / f"finetune_{tag}_config.json", {
        "style": style, "alpha": ft_cfg.bc_weight, "fraction": fraction,
        "epochs": epochs, "dp_size": len(dp)})
    return {"checkpoint": str(paths.finetuned_rl(tag)),
            "epochs": epochs,
            "mean_reward_last": history[-1]["mean_reward"] if history else None}


def cmd_refresh(cfg: RunConfig, style: str, tag: str | None = None,
                fraction: float = 1.0, epochs: int | None = None) -> dict:
    paths = RunPaths(cfg.out_dir).ensure()
    tag = tag or style
    policy = diffusion.load_policy(_require(paths.finetuned_rl(tag), "finetune"))
    dp = _load_dp_fraction(paths, cfg, style, fraction)
    losses = grpo.supervised_refresh(policy, dp,
                                     epochs=epochs if epochs is not None
                                     else cfg.refresh_epochs,
                                     lr=cfg.refresh_lr,
                                     batch_size=cfg.refresh_batch,
                                     seed=cfg.seed + 70)
    diffusion.save_policy(policy, paths.finetuned(tag))
    return {"checkpoint": str(paths.finetuned(tag)),
            "refresh_final_loss": float(np.mean(losses[-20:])) if losses else None}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_checkpoints(cfg: RunConfig, subject_path, baseline_path,
                         split_path, tag: str,
                         boe_style: str | None = None) -> dict:
    """Metric report for subject and baseline on one split, plus simulated
    BOE between their aggregated plans (style taken per scenario unless
    pinned). Candidate noise streams depend only on (seed, scenario), so
    evaluating a checkpoint against itself gives exact ties."""
    paths = RunPaths(cfg.out_dir).ensure()
    subject = diffusion.load_policy(_require(subject_path, "finetune/refresh"))
    baseline = diffusion.load_policy(_require(baseline_path, "pretrain"))
    scenarios, _ = world.load_scenarios(_require(split_path, "gen-data"))

    side_stats = {"subject": [], "baseline": []}
    plans = {"subject": [], "baseline": []}
    records = []
    for i, scen in enumerate(scenarios):
        per_side = {}
        for side, model in (("subject", subject), ("baseline", baseline)):
            rng = np.random.default_rng([cfg.seed, 80, i])
            cands = diffusion.sample_candidates(model, scen.obs,
                                                cfg.eval_samples, rng)
            plan = emselect.aggregate(cands, d=cfg.em_radius, iters=cfg.em_iters)
            mins = metrics.displacement_metrics(cands, scen.gt)
            div = metrics.diversity(cands)
            score = metrics.style_score(boe_style or scen.style, scen, plan)
            side_stats[side].append((*mins, div if div is not None else 0.0, score))
            plans[side].append(plan)
            per_side[side] = plan
        h = metrics.simulated_h(boe_style or scen.style, scen,
                                per_side["subject"], per_side["baseline"],
                                tie_band=cfg.boe_tie_band)
        records.append(metrics.ComparisonRecord(
            scenario_id=scen.id, a_src="subject", b_src="baseline", h=h))

    reports = {}
    for side in ("subject", "baseline"):
        arr = np.asarray(side_stats[side])
        edges, dens = metrics.velocity_profile(plans[side])
        reports[side] = metrics.MetricReport(
            min_ade=float(arr[:, 0].mean()), mean_ade=float(arr[:, 1].mean()),
            min_fde=float(arr[:, 2].mean()), mean_fde=float(arr[:, 3].mean()),
            diversity=float(arr[:, 4].mean()), sample_count=cfg.eval_samples,
            style_scores={"target": float(arr[:, 5].mean())},
            mean_speed=metrics.mean_speed(plans[side]),
            velocity_bin_edges=edges.tolist(),
            velocity_densities=dens.tolist(),
        ).to_dict()
    boe_subject, boe_baseline = metrics.boe_compute(records)
    payload = {
        "tag": tag, "split": str(split_path),
        "subject_checkpoint": str(subject_path),
        "baseline_checkpoint": str(baseline_path),
        "n_scenarios": len(scenarios),
        "subject": reports["subject"], "baseline": reports["baseline"],
        "boe_subject": boe_subject, "boe_baseline": boe_baseline,
    }
    _write_json(paths.eval_report(tag), payload)
    rec_path = paths.boe_records(tag)
    rec_path.unlink(missing_ok=True)
    metrics.save_comparison_records(rec_path, records)
    return payload


def cmd_eval(cfg: RunConfig, style: str, tag: str | None = None) -> dict:
    """Finetuned-vs-pretrained comparison on the held-out preference split."""
    paths = RunPaths(cfg.out_dir)
    tag = tag or style
    return evaluate_checkpoints(
        cfg, paths.finetuned(tag), paths.pretrained(),
        paths.dp_eval(style), tag=tag, boe_style=style)


def cmd_sweep(cfg: RunConfig, kind: str, style: str,
              values: list | None = None) -> list:
    """Grid over BC weights or preference-data fractions; one metrics file
    per value with the swept value recorded inside."""
    if kind not in ("alpha", "fraction"):
        raise ValueError(f"sweep kind must be alpha|fraction, got {kind!r}")
    paths = RunPaths(cfg.out_dir).ensure()
    values = values if values is not None else (
        cfg.sweep_alphas if kind == "alpha" else cfg.sweep_fractions)
    n_full = len(world.load_scenarios(_require(paths.dp_train(style), "mine"))[0])
    out = []
    for v in values:
        tag = f"{style}_{kind}{v:g}"
        if kind == "alpha":
            cmd_finetune(cfg, style, alpha=float(v), tag=tag)
            cmd_refresh(cfg, style, tag=tag)
        else:
            # compute-matched: every fraction consumes the same number of
            # optimizer steps (one per scenario visit for RL; per minibatch
            # for the refresh), isolating data quantity from training budget
            n_frac = max(1, int(round(float(v) * n_full)))
            rl_epochs = min(500, int(round(cfg.rl_epochs * n_full / n_frac)))
            per_epoch_full = -(-n_full // cfg.refresh_batch)
            per_epoch_frac = -(-n_frac // cfg.refresh_batch)
            refresh_epochs = min(3000, int(round(
                cfg.refresh_epochs * per_epoch_full / per_epoch_frac)))
            cmd_finetune(cfg, style, fraction=float(v), tag=tag,
                         epochs=rl_epochs)
            cmd_refresh(cfg, style, tag=tag, fraction=float(v),
                        epochs=refresh_epochs)
        pref = evaluate_checkpoints(cfg, paths.finetuned(tag), paths.pretrained(),
                                    paths.dp_eval(style), tag=f"{tag}_pref",
                                    boe_style=style)
        normal = evaluate_checkpoints(cfg, paths.finetuned(tag), paths.pretrained(),
                                      paths.normal_eval_set(),
                                      tag=f"{tag}_normal", boe_style="normal")
        payload = {kind: float(v), "style": style,
                   "pref": pref, "normal": normal}
        if kind == "alpha":
            # the BC ablation targets the RL phase: the refresh largely
            # equalizes final behavior, so retention is also reported for
            # the post-RL checkpoint
            rl_normal = evaluate_checkpoints(
                cfg, paths.finetuned_rl(tag), paths.pretrained(),
                paths.normal_eval_set(), tag=f"{tag}_rl_normal",
                boe_style="normal")
            payload["normal_rl_phase"] = rl_normal
        _write_json(paths.sweep_report(kind, f"{style}_{v:g}"), payload)
        out.append(payload)
    return out


def cmd_pipeline(cfg: RunConfig, styles=PREF_STYLES) -> dict:
    """Full workflow: data, pretraining, and per style the mining, pair
    building, reward training, finetuning, refresh and evaluation."""
    results = {"gen_data": cmd_gen_data(cfg), "pretrain": cmd_pretrain(cfg)}
    for style in styles:
        results[f"mine_{style}"] = cmd_mine(cfg, style)
        results[f"build_pairs_{style}"] = cmd_build_pairs(cfg, style)
        results[f"train_reward_{style}"] = cmd_train_reward(cfg, style)
        results[f"finetune_{style}"] = cmd_finetune(cfg, style)
        results[f"refresh_{style}"] = cmd_refresh(cfg, style)
        results[f"eval_{style}"] = cmd_eval(cfg, style)
    return results
