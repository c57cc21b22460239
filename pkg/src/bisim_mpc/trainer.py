"""Training loop: episode collection with the planner, uniform replay of
fixed-length segments, one gradient update per collected env step, EMA
target maintenance, periodic evaluation, metrics CSV, checkpoints."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses as L
from .envs import DistractorConfig, make_env
from .models import ModelConfig, ModelSet
from .nncore import save_checkpoint, load_checkpoint
from .planner import PlanConfig, PlanState, plan


@dataclass
class TrainConfig:
    task: str = "pendulum"
    total_steps: int = 30_000
    episode_length: int = 200
    # Each selected action is applied this many consecutive env steps; the
    # stored transition reward is the sum over the repeats. Coarsens the
    # decision timestep so short-horizon planning and TD bootstrapping
    # cover a useful span of physical time.
    action_repeat: int = 1
    seed_steps: int = 5_000
    batch_size: int = 128
    horizon: int = 3                     # loss horizon H
    lr: float = 1e-3
    zeta: float = 0.99
    target_update_every: int = 2
    grad_clip: float = 10.0
    buffer_capacity: int = 1_000_000
    updates_per_episode: int = 0         # 0 -> one update per collected step
    eval_every: int = 2_000
    eval_episodes: int = 10
    explore_std_start: float = 0.5
    explore_std_end: float = 0.05
    explore_schedule_steps: int = 25_000
    loss_workers: int = 1
    checkpoint_every: int = 10_000
    seed: int = 0
    # Stored reward = (r + reward_shift) * reward_scale. The metric theory
    # assumes rewards in [0, 1]; map the task's reward range there or the
    # l1-vs-squared-l2 feedback in the bisimulation term can diverge.
    reward_shift: float = 0.0
    reward_scale: float = 1.0

    def explore_std(self, env_step: int) -> float:
        if env_step >= self.explore_schedule_steps:
            return self.explore_std_end
        frac = env_step / self.explore_schedule_steps
        return self.explore_std_start + frac * (self.explore_std_end - self.explore_std_start)


class ReplayBuffer:
    """Episode-aligned ring buffer; sampled segments never straddle
    episode boundaries, and segment start points are uniform over all
    valid (episode, offset) pairs."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.episodes: list[dict] = []
        self.total_transitions = 0

    def add_episode(self, obs: np.ndarray, actions: np.ndarray,
                    rewards: np.ndarray, episode_id: int) -> None:
        if obs.shape[0] != actions.shape[0] + 1 or actions.shape[0] != rewards.shape[0]:
            raise ValueError("episode arrays misaligned")
        self.episodes.append({"obs": obs, "actions": actions,
                              "rewards": rewards, "id": episode_id})
        self.total_transitions += actions.shape[0]
        while self.total_transitions > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.pop(0)
            self.total_transitions -= dropped["actions"].shape[0]

    def n_valid_starts(self, horizon: int) -> int:
        # A segment needs obs t..t+H+1 and actions/rewards t..t+H.
        return sum(max(0, ep["actions"].shape[0] - horizon)
                   for ep in self.episodes)

    def sample_segments(self, batch_size: int, horizon: int,
                        rng: np.random.Generator) -> L.SegmentBatch:
        starts = []
        for ep_i, ep in enumerate(self.episodes):
            n = max(0, ep["actions"].shape[0] - horizon)
            if n:
                starts.append((ep_i, n))
        total = sum(n for _, n in starts)
        if total == 0:
            raise ValueError("not enough data for the requested horizon")
        flat = rng.integers(0, total, size=batch_size)
        obs = np.empty((horizon + 2, batch_size) + self.episodes[0]["obs"].shape[1:])
        actions = np.empty((horizon + 1, batch_size) + self.episodes[0]["actions"].shape[1:])
        rewards = np.empty((horizon + 1, batch_size))
        bounds = np.cumsum([n for _, n in starts])
        for b, f in enumerate(flat):
            which = int(np.searchsorted(bounds, f, side="right"))
            ep = self.episodes[starts[which][0]]
            t = int(f - (bounds[which - 1] if which else 0))
            obs[:, b] = ep["obs"][t:t + horizon + 2]
            actions[:, b] = ep["actions"][t:t + horizon + 1]
            rewards[:, b] = ep["rewards"][t:t + horizon + 1]
        return L.SegmentBatch(obs=obs, actions=actions, rewards=rewards)


def collect_episode(env, models: ModelSet, plan_cfg: PlanConfig,
                    rng: np.random.Generator, mode: str, env_step: int,
                    train_cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, int]:
    """Roll one episode at the decision timestep (action_repeat env steps
    per decision; transition reward is the sum over the repeats).
    Returns (obs, actions, rewards, return, plan_calls)."""
    spec = env.spec
    repeat = train_cfg.action_repeat
    if repeat < 1 or spec.episode_length % repeat:
        raise ValueError("action_repeat must divide episode_length")
    n_dec = spec.episode_length // repeat
    obs = np.empty((n_dec + 1, spec.state_dim))
    actions = np.empty((n_dec, spec.action_dim))
    rewards = np.empty(n_dec)
    obs[0] = env.reset(rng)
    plan_state = PlanState()
    plan_calls = 0
    for t in range(n_dec):
        raw_step = env_step + t * repeat
        if mode == "seed_random":
            a = rng.uniform(spec.action_low, spec.action_high)
        elif mode == "plan":
            z = models.encode_np(obs[t][None])[0]
            a, plan_state = plan(z, models, plan_cfg, plan_state, rng,
                                 spec.action_low, spec.action_high,
                                 env_step=raw_step,
                                 noise_std=train_cfg.explore_std(raw_step))
            plan_calls += 1
        elif mode == "eval":
            z = models.encode_np(obs[t][None])[0]
            a, plan_state = plan(z, models, plan_cfg, plan_state, rng,
                                 spec.action_low, spec.action_high)
            plan_calls += 1
        else:
            raise ValueError(f"unknown mode {mode!r}")
        r_acc = 0.0
        for _ in range(repeat):
            ob, r = env.step(a)
            r_acc += r
        obs[t + 1] = ob
        rewards[t] = r_acc
        actions[t] = a
    return obs, actions, rewards, float(rewards.sum()), plan_calls


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train_step(models: ModelSet, batch: L.SegmentBatch,
               coeffs: L.LossCoefficients, cfg: TrainConfig,
               rng: np.random.Generator, grad_step: int) -> L.LossBreakdown:
    """One model Adam step, one policy Adam step, scheduled target EMA.

    Raises LossComputationError on non-finite losses (callers may skip)."""
    perm = L.permute_batch(batch.batch_size, rng)

    models.store.zero_grad()
    total, breakdown = L.total_model_loss(models, batch, coeffs, perm,
                                          n_workers=cfg.loss_workers)
    total.backward()
    grads = models.store.grads(models.model_param_names)
    breakdown.grad_norm = _clip_grads(grads, cfg.grad_clip)
    models.store.adam_step(grads, cfg.lr)

    models.pi_store.zero_grad()
    pi_loss, q_mean = L.policy_loss(models, batch, coeffs)
    pi_loss.backward()
    pi_grads = models.pi_store.grads(models.policy_param_names)
    _clip_grads(pi_grads, cfg.grad_clip)
    models.pi_store.adam_step(pi_grads, cfg.lr)
    breakdown.q_mean = q_mean

    models.update_targets(cfg.zeta, cfg.target_update_every, grad_step)
    return breakdown


def evaluate(models: ModelSet, plan_cfg: PlanConfig, env_factory,
             n_episodes: int, seed: int,
             train_cfg: TrainConfig | None = None) -> tuple[float, float]:
    """Mean/std episode return with exploration off; deterministic per seed."""
    returns = []
    train_cfg = train_cfg or TrainConfig()
    for ep in range(n_episodes):
        rng = np.random.default_rng((seed, ep))
        env = env_factory(seed * 31 + ep)
        _, _, _, ret, _ = collect_episode(env, models, plan_cfg, rng, "eval",
                                          0, train_cfg)
        returns.append(ret)
    returns = np.array(returns)
    std = float(returns.std()) if n_episodes > 1 else 0.0
    return float(returns.mean()), std


METRIC_COLUMNS = (
    "env_step", "grad_step", "episode", "episode_return", "total",
    "reward_loss", "value_loss", "consistency_loss", "bisim_loss",
    "grad_norm", "q_mean", "eval_return_mean", "eval_return_std",
    "skipped_steps",
)


class Trainer:
    """Owns one training run and its artifacts directory."""

    def __init__(self, train_cfg: TrainConfig, model_cfg_overrides: dict | None = None,
                 coeffs: L.LossCoefficients | None = None,
                 plan_cfg: PlanConfig | None = None,
                 distractors: DistractorConfig | None = None,
                 out_dir: str | None = None):
        self.cfg = train_cfg
        self.coeffs = coeffs or L.LossCoefficients()
        self.plan_cfg = plan_cfg or PlanConfig()
        self.distractors = distractors
        self.out_dir = out_dir
        self.rng = np.random.default_rng(train_cfg.seed)

        self._env_factory = lambda dseed=None: make_env(
            train_cfg.task, train_cfg.episode_length, distractors,
            distractor_seed=train_cfg.seed + 7919 if dseed is None else dseed)
        env = self._env_factory()
        self.env = env   # persistent: distractor streams continue across episodes
        overrides = dict(model_cfg_overrides or {})
        self.model_cfg = ModelConfig(
            state_dim=env.spec.state_dim, action_dim=env.spec.action_dim,
            action_low=env.spec.action_low, action_high=env.spec.action_high,
            **overrides)
        self.models = ModelSet(self.model_cfg, self.rng)
        self.buffer = ReplayBuffer(train_cfg.buffer_capacity)
        self.env_step = 0
        self.grad_step = 0
        self.episode = 0
        self.skipped_steps = 0
        self._rows: list[dict] = []
        self.eval_history: list[tuple[int, float, float]] = []

        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            manifest = {
                "train": asdict(train_cfg),
                "model": {k: v for k, v in asdict(self.model_cfg).items()
                          if k not in ("action_low", "action_high")},
                "coeffs": asdict(self.coeffs),
                "planner": asdict(self.plan_cfg),
                "distractors": asdict(distractors) if distractors else None,
                "revision": _revision(),
            }
            with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
            self._csv = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
            self._writer = csv.DictWriter(self._csv, fieldnames=METRIC_COLUMNS)
            self._writer.writeheader()
        else:
            self._csv = None
            self._writer = None

    # -- bookkeeping ----------------------------------------------------
    def _emit(self, row: dict) -> None:
        full = {k: row.get(k, "") for k in METRIC_COLUMNS}
        if self._writer:
            self._writer.writerow(full)
        self._rows.append(full)

    def _flush(self) -> None:
        if self._csv:
            self._csv.flush()

    def save(self, tag: str = "latest") -> None:
        if not self.out_dir:
            return
        save_checkpoint(
            os.path.join(self.out_dir, f"model_{tag}.npz"), self.models.store,
            extra_arrays=self.models.targets, rng=self.rng,
            meta={"env_step": self.env_step, "grad_step": self.grad_step})
        save_checkpoint(
            os.path.join(self.out_dir, f"policy_{tag}.npz"), self.models.pi_store)

    def load(self, model_path, policy_path) -> None:
        store, targets, rng_state, meta = load_checkpoint(model_path)
        for name, p in store.params.items():
            self.models.store.params[name].data[...] = p.data
            self.models.store.m[name][...] = store.m[name]
            self.models.store.v[name][...] = store.v[name]
        self.models.store.t = store.t
        for name, arr in targets.items():
            self.models.targets[name][...] = arr
        pi_store, _, _, _ = load_checkpoint(policy_path)
        for name, p in pi_store.params.items():
            self.models.pi_store.params[name].data[...] = p.data
            self.models.pi_store.m[name][...] = pi_store.m[name]
            self.models.pi_store.v[name][...] = pi_store.v[name]
        self.models.pi_store.t = pi_store.t
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.env_step = int(meta.get("env_step", 0))
        self.grad_step = int(meta.get("grad_step", 0))

    # -- main loop ------------------------------------------------------
    def run(self) -> None:
        cfg = self.cfg
        next_eval = cfg.eval_every
        next_ckpt = cfg.checkpoint_every
        while self.env_step < cfg.total_steps:
            mode = "seed_random" if self.env_step < cfg.seed_steps else "plan"
            obs, actions, rewards, ep_return, _ = collect_episode(
                self.env, self.models, self.plan_cfg, self.rng, mode,
                self.env_step, cfg)
            stored_r = (rewards + cfg.reward_shift) * cfg.reward_scale
            self.buffer.add_episode(obs, actions, stored_r, self.episode)
            self.env_step += actions.shape[0] * cfg.action_repeat
            self.episode += 1

            n_updates = cfg.updates_per_episode or actions.shape[0]
            can_train = (self.env_step >= cfg.seed_steps
                         and self.buffer.n_valid_starts(cfg.horizon) > 0)
            ep_row = {"env_step": self.env_step, "episode": self.episode,
                      "episode_return": repr(ep_return),
                      "skipped_steps": self.skipped_steps}
            if not can_train:
                self._emit(ep_row)
            else:
                for u in range(n_updates):
                    batch = self.buffer.sample_segments(cfg.batch_size,
                                                        cfg.horizon, self.rng)
                    self.grad_step += 1
                    try:
                        bd = train_step(self.models, batch, self.coeffs, cfg,
                                        self.rng, self.grad_step)
                    except L.LossComputationError:
                        self.skipped_steps += 1
                        continue
                    row = {"env_step": self.env_step, "grad_step": self.grad_step,
                           "total": repr(bd.total),
                           "grad_norm": repr(bd.grad_norm),
                           "q_mean": repr(bd.q_mean),
                           "skipped_steps": self.skipped_steps}
                    for name in L.TERM_NAMES:
                        row[name] = repr(bd.weighted[name])
                    if u == n_updates - 1:
                        row.update(ep_row)
                    self._emit(row)

            if self.env_step >= next_eval:
                next_eval += cfg.eval_every
                mean, std = evaluate(self.models, self.plan_cfg,
                                     self._env_factory, cfg.eval_episodes,
                                     seed=cfg.seed + 10_000 + self.env_step,
                                     train_cfg=cfg)
                self.eval_history.append((self.env_step, mean, std))
                self._emit({"env_step": self.env_step,
                            "eval_return_mean": repr(mean),
                            "eval_return_std": repr(std)})
                self._flush()
            if self.out_dir and self.env_step >= next_ckpt:
                next_ckpt += cfg.checkpoint_every
                self.save("latest")
        self.save("final")
        if self._csv:
            self._csv.close()


def _revision() -> str:
    try:
        import subprocess
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"
