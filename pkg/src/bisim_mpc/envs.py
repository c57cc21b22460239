"""Analytic training environments and finite-MDP generation.

Two closed-form control tasks (pendulum swing-up, planar point mass), a
wrapper that appends action-independent distractor dimensions to the
observation, and a seeded random tabular-MDP generator with a plain-text
file format for the bound-verification CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    episode_length: int
    dt: float


def _wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]."""
    return ((theta + np.pi) % (2.0 * np.pi)) - np.pi


class PendulumEnv:
    """Torque-limited pendulum swing-up.

    Observation (cos, sin, thdot), theta = 0 upright. Semi-implicit Euler
    with g=10, m=1, l=1, dt=0.05; angular velocity clipped to +-8; reward
    -(wrap(theta)^2 + 0.1 thdot^2 + 0.001 a^2) on the pre-step state.
    """

    G, M, L, DT = 10.0, 1.0, 1.0, 0.05
    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    def __init__(self, episode_length: int = 200):
        self.spec = EnvSpec(3, 1, np.array([-self.MAX_TORQUE]),
                            np.array([self.MAX_TORQUE]), episode_length, self.DT)
        self._theta = np.pi
        self._thdot = 0.0
        self.clip_count = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._theta = rng.uniform(-np.pi, np.pi)
        self._thdot = rng.uniform(-1.0, 1.0)
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self._theta), np.sin(self._theta), self._thdot])

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float]:
        a = float(np.asarray(action).reshape(-1)[0])
        if abs(a) > self.MAX_TORQUE:
            self.clip_count += 1
            a = float(np.clip(a, -self.MAX_TORQUE, self.MAX_TORQUE))
        th, thdot = self._theta, self._thdot
        reward = -(_wrap_angle(th) ** 2 + 0.1 * thdot**2 + 0.001 * a**2)
        thdot = thdot + self.DT * (
            3.0 * self.G / (2.0 * self.L) * np.sin(th)
            + 3.0 / (self.M * self.L**2) * a
        )
        thdot = float(np.clip(thdot, -self.MAX_SPEED, self.MAX_SPEED))
        th = th + self.DT * thdot
        self._theta, self._thdot = th, thdot
        return self._obs(), reward

    @staticmethod
    def static_step(state: np.ndarray, action: float) -> tuple[np.ndarray, float]:
        """Pure transition on an (cos, sin, thdot) triple (used by tests)."""
        c, s, thdot = state
        if abs(c**2 + s**2 - 1.0) > 1e-9:
            raise ValueError("state off the unit-circle manifold")
        env = PendulumEnv()
        env._theta = float(np.arctan2(s, c))
        env._thdot = float(thdot)
        return env.step(np.array([action]))


class PointMassEnv:
    """Damped double integrator on the plane; reward -||pos - origin||."""

    DT = 0.05
    DAMPING = 0.05

    def __init__(self, episode_length: int = 200):
        self.spec = EnvSpec(4, 2, np.array([-1.0, -1.0]), np.array([1.0, 1.0]),
                            episode_length, self.DT)
        self._state = np.zeros(4)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-1.0, 1.0, size=2)
        self._state = np.array([pos[0], pos[1], 0.0, 0.0])
        return self._state.copy()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float]:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        x, y, vx, vy = self._state
        reward = -float(np.hypot(x, y))
        vx = vx * (1.0 - self.DAMPING) + self.DT * a[0]
        vy = vy * (1.0 - self.DAMPING) + self.DT * a[1]
        x += self.DT * vx
        y += self.DT * vy
        self._state = np.array([x, y, vx, vy])
        return self._state.copy(), reward


@dataclass
class DistractorConfig:
    n_distractors: int = 16
    process: str = "ar1"            # "ar1" or "iid_gauss"
    rho: float = 0.9
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")
        if self.process not in ("ar1", "iid_gauss"):
            raise ValueError("process must be 'ar1' or 'iid_gauss'")
        if abs(self.rho) >= 1.0:
            raise ValueError("|rho| must be < 1 for a stationary AR(1)")


class DistractorWrapper:
    """Appends action-independent noise dimensions to the observation.

    The distractor process has its own RNG stream, so its trajectory is a
    function of the wrapper seed only, never of the actions taken.
    """

    def __init__(self, env, cfg: DistractorConfig, seed: int):
        self.env = env
        self.cfg = cfg
        base = env.spec
        self.spec = EnvSpec(base.state_dim + cfg.n_distractors, base.action_dim,
                            base.action_low, base.action_high,
                            base.episode_length, base.dt)
        self._rng = np.random.default_rng(seed)
        self._d = np.zeros(cfg.n_distractors)

    def _advance(self) -> None:
        n = self.cfg.n_distractors
        if n == 0:
            return
        eps = self._rng.normal(0.0, self.cfg.noise_scale, size=n)
        if self.cfg.process == "ar1":
            self._d = self.cfg.rho * self._d + eps
        else:
            self._d = eps

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        obs = self.env.reset(rng)
        self._d = np.zeros(self.cfg.n_distractors)
        self._advance()
        return np.concatenate([obs, self._d])

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float]:
        obs, reward = self.env.step(action)
        self._advance()
        return np.concatenate([obs, self._d]), reward


def make_env(name: str, episode_length: int = 200,
             distractors: DistractorConfig | None = None,
             distractor_seed: int = 0):
    if name == "pendulum":
        env = PendulumEnv(episode_length)
    elif name == "pointmass":
        env = PointMassEnv(episode_length)
    else:
        raise ValueError(f"unknown task {name!r}")
    if distractors is not None and distractors.n_distractors > 0:
        env = DistractorWrapper(env, distractors, distractor_seed)
    return env


# -- tabular MDPs --------------------------------------------------------

@dataclass
class TabularMdp:
    """Finite MDP with rewards in [0, 1] and row-stochastic transitions."""

    transitions: np.ndarray   # (S, A, S)
    rewards: np.ndarray       # (S, A)
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("inconsistent MDP shapes")
        if np.max(np.abs(self.transitions.sum(axis=-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if self.rewards.min() < 0.0 or self.rewards.max() > 1.0:
            raise ValueError("rewards must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def random_mdp(n_states: int, n_actions: int, sparsity: float = 1.0,
               seed: int = 0, gamma: float = 0.99) -> TabularMdp:
    """Dirichlet transition rows restricted to ceil(sparsity*n) successors,
    uniform [0, 1] rewards; fully reproducible from the seed."""
    rng = np.random.default_rng(seed)
    k = max(1, int(np.ceil(sparsity * n_states)))
    p = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=k, replace=False)
            p[s, a, succ] = rng.dirichlet(np.ones(k))
    # Renormalize away accumulated float error so rows sum to 1 exactly.
    p /= p.sum(axis=-1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(p, r, gamma)


def save_mdp(path, mdp: TabularMdp) -> None:
    """Plain-text format: header line, reward table, then P rows."""
    with open(path, "w") as fh:
        fh.write(f"{mdp.n_states} {mdp.n_actions} {float(mdp.gamma)!r}\n")
        for s in range(mdp.n_states):
            fh.write(" ".join(repr(float(x)) for x in mdp.rewards[s]) + "\n")
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                fh.write(" ".join(repr(float(x)) for x in mdp.transitions[s, a]) + "\n")


class MdpParseError(ValueError):
    pass


def load_mdp(path) -> TabularMdp:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MdpParseError("empty MDP file")
    head = lines[0].split()
    if len(head) != 3:
        raise MdpParseError("header must be 'n_states n_actions gamma'")
    try:
        n_s, n_a, gamma = int(head[0]), int(head[1]), float(head[2])
    except ValueError as exc:
        raise MdpParseError(f"bad header: {exc}") from exc
    expected = 1 + n_s + n_s * n_a
    if len(lines) != expected:
        raise MdpParseError(f"expected {expected} lines, found {len(lines)}")
    def parse_row(i: int, width: int) -> np.ndarray:
        vals = lines[i].split()
        if len(vals) != width:
            raise MdpParseError(f"line {i + 1}: expected {width} values, found {len(vals)}")
        try:
            return np.array([float(v) for v in vals])
        except ValueError as exc:
            raise MdpParseError(f"line {i + 1}: {exc}") from exc
    rewards = np.stack([parse_row(1 + s, n_a) for s in range(n_s)])
    p = np.zeros((n_s, n_a, n_s))
    for s in range(n_s):
        for a in range(n_a):
            p[s, a] = parse_row(1 + n_s + s * n_a + a, n_s)
    try:
        return TabularMdp(p, rewards, gamma)
    except ValueError as exc:
        raise MdpParseError(str(exc)) from exc
