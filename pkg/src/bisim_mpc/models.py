"""The five learned components: encoder, latent dynamics, reward, twin
value heads and policy, plus slow-moving target copies of encoder,
dynamics and the value heads.

Latent dynamics are deterministic (a point-mass prediction), so a single
rollout per action sequence is exact. The policy is a deterministic
tanh-squashed MLP; exploration noise is applied outside the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nncore import MLP, ParamStore, Tensor


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int
    latent_dim: int = 16
    hidden_dim: int = 64
    n_layers: int = 3
    action_low: np.ndarray | float = -1.0
    action_high: np.ndarray | float = 1.0

    def __post_init__(self):
        self.action_low = np.broadcast_to(
            np.asarray(self.action_low, dtype=np.float64), (self.action_dim,)
        ).copy()
        self.action_high = np.broadcast_to(
            np.asarray(self.action_high, dtype=np.float64), (self.action_dim,)
        ).copy()


# Components whose parameters have target copies.
TARGETED = ("encoder", "dynamics", "q1", "q2")


class ModelSet:
    """Online networks + target parameter dict.

    Targets are plain arrays (never registered with the optimizer) and are
    only written by :meth:`update_targets`.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.store = ParamStore()       # theta: encoder/dynamics/reward/Q
        self.pi_store = ParamStore()    # psi: policy (separate Adam state)
        zd, ad, hd, sl = cfg.latent_dim, cfg.action_dim, cfg.hidden_dim, cfg.n_layers
        self.encoder = MLP(self.store, "encoder", cfg.state_dim, hd, zd, rng, sl)
        self.dynamics = MLP(self.store, "dynamics", zd + ad, hd, zd, rng, sl)
        self.reward = MLP(self.store, "reward", zd + ad, hd, 1, rng, sl)
        self.q1 = MLP(self.store, "q1", zd + ad, hd, 1, rng, sl, use_layer_norm=True)
        self.q2 = MLP(self.store, "q2", zd + ad, hd, 1, rng, sl, use_layer_norm=True)
        self.policy = MLP(self.pi_store, "policy", zd, hd, ad, rng, sl)
        self.policy_param_names = list(self.policy.param_names)
        self.model_param_names = list(self.store.params)
        self.targets: dict[str, np.ndarray] = {}
        for comp in TARGETED:
            for name in getattr(self, comp).param_names:
                self.targets[name] = self.store.params[name].data.copy()
        self._action_mid = (cfg.action_high + cfg.action_low) / 2.0
        self._action_half = (cfg.action_high - cfg.action_low) / 2.0

    # -- online forward (tape) ------------------------------------------
    def encode(self, s: Tensor) -> Tensor:
        if s.data.shape[-1] != self.cfg.state_dim:
            raise ValueError(f"state dim {s.data.shape[-1]} != {self.cfg.state_dim}")
        return self.encoder.forward(s)

    def predict_next(self, z: Tensor, a: Tensor) -> Tensor:
        return self.dynamics.forward(z.concat(a))

    def predict_reward(self, z: Tensor, a: Tensor) -> Tensor:
        return self.reward.forward(z.concat(a))

    def q_value(self, z: Tensor, a: Tensor, mode: str = "min") -> Tensor:
        za = z.concat(a)
        if mode == "head1":
            return self.q1.forward(za)
        if mode == "head2":
            return self.q2.forward(za)
        if mode == "min":
            return self.q1.forward(za).minimum(self.q2.forward(za))
        if mode == "avg":
            return (self.q1.forward(za) + self.q2.forward(za)) * 0.5
        raise ValueError(f"unknown q mode {mode!r}")

    def policy_pre_tanh(self, z: Tensor, frozen: bool = False) -> Tensor:
        return self.policy.forward(z, frozen=frozen)

    def policy_tensor(self, z: Tensor) -> Tensor:
        """Differentiable squashed action."""
        u = self.policy.forward(z)
        return u.tanh() * self._action_half + self._action_mid

    # -- numpy fast paths (no tape) -------------------------------------
    def encode_np(self, s: np.ndarray, target: bool = False) -> np.ndarray:
        return self.encoder.forward_np(s, self.targets if target else None)

    def predict_next_np(self, z: np.ndarray, a: np.ndarray, target: bool = False) -> np.ndarray:
        za = np.concatenate([z, a], axis=-1)
        return self.dynamics.forward_np(za, self.targets if target else None)

    def predict_reward_np(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self.reward.forward_np(np.concatenate([z, a], axis=-1))[..., 0]

    def q_np(self, z: np.ndarray, a: np.ndarray, mode: str = "min",
             target: bool = False) -> np.ndarray:
        za = np.concatenate([z, a], axis=-1)
        params = self.targets if target else None
        if mode == "head1":
            return self.q1.forward_np(za, params)[..., 0]
        if mode == "head2":
            return self.q2.forward_np(za, params)[..., 0]
        q1 = self.q1.forward_np(za, params)[..., 0]
        q2 = self.q2.forward_np(za, params)[..., 0]
        if mode == "min":
            return np.minimum(q1, q2)
        if mode == "avg":
            return (q1 + q2) / 2.0
        raise ValueError(f"unknown q mode {mode!r}")

    def policy_np(self, z: np.ndarray) -> np.ndarray:
        u = self.policy.forward_np(z)
        return np.tanh(u) * self._action_half + self._action_mid

    def policy_action(self, z: np.ndarray, noise_std: float = 0.0,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        """Act: deterministic squashed output plus optional Gaussian noise,
        clipped back into bounds."""
        if noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        a = self.policy_np(z)
        if noise_std > 0:
            if rng is None:
                raise ValueError("rng required when noise_std > 0")
            a = a + rng.normal(0.0, noise_std, size=a.shape)
        return np.clip(a, self.cfg.action_low, self.cfg.action_high)

    # -- target maintenance ---------------------------------------------
    def update_targets(self, zeta: float, every: int = 1, step: int = 0) -> None:
        """EMA update theta_bar <- zeta*theta_bar + (1-zeta)*theta, applied
        only when ``step`` is a multiple of ``every``."""
        if not 0.0 <= zeta < 1.0:
            raise ValueError("zeta must be in [0, 1)")
        if every > 1 and step % every != 0:
            return
        for name, tgt in self.targets.items():
            tgt *= zeta
            tgt += (1.0 - zeta) * self.store.params[name].data
