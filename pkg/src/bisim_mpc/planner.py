"""Sampling-based MPC in latent space (MPPI).

Each call samples M action sequences from a diagonal Gaussian (a small
fraction rolled out from the prior policy instead), scores them with the
learned reward model plus a discounted terminal value, and refits the
Gaussian to an exponentially weighted elite set. The mean warm-starts the
next environment step by a one-step left shift.

The planner only needs batched numpy callables, so any object exposing
``predict_next_np / predict_reward_np / q_np / policy_np`` works,
including analytic toy models in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PlanConfig:
    horizon: int = 5
    population: int = 512
    elites: int = 64
    iterations: int = 6
    temperature: float = 0.5
    policy_fraction: float = 0.05
    init_mu: float = 0.0
    init_sigma: float = 2.0
    sigma_floor_start: float = 0.5
    sigma_floor_end: float = 0.05
    horizon_start: int = 1
    schedule_steps: int = 25_000
    gamma: float = 0.99

    def __post_init__(self):
        if self.elites > self.population:
            raise ValueError("elites must not exceed population")
        if not 0.0 <= self.policy_fraction <= 1.0:
            raise ValueError("policy_fraction must be in [0, 1]")

    def scheduled_horizon(self, env_step: int) -> int:
        """Linear ramp horizon_start -> horizon over schedule_steps, rounded."""
        if self.schedule_steps <= 0 or env_step >= self.schedule_steps:
            return self.horizon
        frac = env_step / self.schedule_steps
        return int(round(self.horizon_start + frac * (self.horizon - self.horizon_start)))

    def scheduled_sigma_floor(self, env_step: int) -> float:
        if self.schedule_steps <= 0 or env_step >= self.schedule_steps:
            return self.sigma_floor_end
        frac = env_step / self.schedule_steps
        return self.sigma_floor_start + frac * (self.sigma_floor_end - self.sigma_floor_start)


@dataclass
class PlanState:
    """Warm-start buffer carried across environment steps."""

    mu: np.ndarray | None = None        # (H, action_dim)
    last_diagnostics: dict = field(default_factory=dict)

    def advance(self):
        """Left-shift the mean for the next env step, padding with zeros."""
        if self.mu is not None:
            self.mu = np.concatenate([self.mu[1:], np.zeros_like(self.mu[:1])])


def rollout_score(models, z0: np.ndarray, actions: np.ndarray, gamma: float,
                  terminal_value: bool = True) -> np.ndarray:
    """Score M sequences: sum_h gamma^h r(z_h, a_h) + gamma^H Q(z_H, pi(z_H)).

    ``z0`` is (latent,) or (M, latent); ``actions`` is (M, H, action_dim).
    Dynamics are deterministic, so one rollout per sequence is exact.
    """
    m, h = actions.shape[0], actions.shape[1]
    z = np.broadcast_to(np.atleast_2d(z0), (m, np.atleast_2d(z0).shape[-1])).copy()
    scores = np.zeros(m)
    disc = 1.0
    for t in range(h):
        a = actions[:, t]
        scores += disc * models.predict_reward_np(z, a)
        z = models.predict_next_np(z, a)
        disc *= gamma
    if terminal_value:
        scores += disc * models.q_np(z, models.policy_np(z), mode="min")
    return scores


def _policy_rollout(models, z0: np.ndarray, n: int, h: int, action_dim: int) -> np.ndarray:
    """Roll the prior policy through the latent dynamics to propose sequences."""
    seqs = np.zeros((n, h, action_dim))
    z = np.broadcast_to(np.atleast_2d(z0), (n, np.atleast_2d(z0).shape[-1])).copy()
    for t in range(h):
        a = models.policy_np(z)
        seqs[:, t] = a
        z = models.predict_next_np(z, a)
    return seqs


def plan(z_t: np.ndarray, models, cfg: PlanConfig, state: PlanState,
         rng: np.random.Generator, action_low: np.ndarray,
         action_high: np.ndarray, env_step: int = 10**9,
         noise_std: float = 0.0) -> tuple[np.ndarray, PlanState]:
    """One closed-loop MPPI action selection. Returns (action, state).

    ``noise_std`` adds scheduled Gaussian exploration noise to the executed
    action (training only). If every sampled score is non-finite the prior
    policy's action is returned and a diagnostic is recorded.
    """
    action_dim = len(action_low)
    h = max(1, cfg.scheduled_horizon(env_step))
    sigma_floor = cfg.scheduled_sigma_floor(env_step)
    m = cfg.population
    n_pol = int(cfg.policy_fraction * m)
    n_gauss = m - n_pol

    mu = np.full((h, action_dim), float(cfg.init_mu))
    if state.mu is not None:
        prev = state.mu[:h]
        mu[:prev.shape[0]] = prev
    sigma = np.full((h, action_dim), float(cfg.init_sigma))

    best_score = -np.inf
    best_seq = None
    diagnostics = {"fallback": False}
    score_trace = []
    for _ in range(cfg.iterations):
        noise = rng.standard_normal((n_gauss, h, action_dim))
        cand = np.clip(mu[None] + sigma[None] * noise, action_low, action_high)
        if n_pol > 0:
            pol = _policy_rollout(models, z_t, n_pol, h, action_dim)
            cand = np.concatenate([cand, pol], axis=0)
        if best_seq is not None:
            # Retain the best sequence found so far so the elite maximum
            # never regresses between iterations.
            cand[0] = best_seq
        scores = rollout_score(models, z_t, cand, cfg.gamma)
        finite = np.isfinite(scores)
        if not finite.any():
            diagnostics["fallback"] = True
            state.last_diagnostics = diagnostics
            a = models.policy_np(np.atleast_2d(z_t))[0]
            return np.clip(a, action_low, action_high), state
        scores = np.where(finite, scores, -np.inf)
        elite_idx = np.argpartition(-scores, cfg.elites - 1)[:cfg.elites]
        elite_scores = scores[elite_idx]
        elite_actions = cand[elite_idx]
        w = np.exp((elite_scores - elite_scores.max()) / cfg.temperature)
        w /= w.sum()
        mu = np.einsum("i,ihd->hd", w, elite_actions)
        var = np.einsum("i,ihd->hd", w, (elite_actions - mu[None]) ** 2)
        sigma = np.maximum(np.sqrt(var), sigma_floor)
        it_best = int(np.argmax(scores))
        if scores[it_best] >= best_score:
            best_score = float(scores[it_best])
            best_seq = cand[it_best].copy()
        score_trace.append(float(elite_scores.max()))

    diagnostics.update(
        best_score=best_score,
        best_score_trace=score_trace,
        elite_spread=float(elite_scores.max() - elite_scores.min()),
        sigma_mean=float(sigma.mean()),
    )
    action = mu[0].copy()
    if noise_std > 0:
        action = action + rng.normal(0.0, noise_std, size=action.shape)
    action = np.clip(action, action_low, action_high)

    state.mu = mu
    state.advance()
    state.last_diagnostics = diagnostics
    return action, state
