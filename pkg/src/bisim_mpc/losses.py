"""Training objectives.

The model loss is a lambda-weighted sum over the horizon of four per-step
terms: reward regression (A), TD value regression against a stopped target
(B), latent consistency against the target encoder (C), and the
bisimulation-metric encoder term (D) that regresses the latent l1 distance
of a randomly paired batch onto its one-step metric target.

Every per-step term depends only on the precomputed online encodings of
the raw observations, never on a chained latent rollout, so the horizon
dimension carries no sequential dependency: the default path stacks all
time steps into single batched matrix products, and a thread-pool path
splits time steps across workers with a fixed reduction order. A
sequential-rollout reference objective (chained latent predictions) is
kept for benchmarking.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSet
from .nncore import Tensor

TERM_NAMES = ("reward_loss", "value_loss", "consistency_loss", "bisim_loss")


class LossComputationError(RuntimeError):
    """A loss term went non-finite; carries the offending term name."""

    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite value in {term} at step {step}")
        self.term = term
        self.step = step


@dataclass
class LossCoefficients:
    c1: float = 0.5          # reward
    c2: float = 0.1          # value
    c3: float = 0.5          # consistency
    c4: float = 0.01         # bisimulation metric (per-task, tuned)
    lam: float = 0.5         # temporal decay of per-step losses
    gamma: float = 0.99
    bisim_dyn_distance: str = "sq_l2"   # "sq_l2" (printed form), "l2", "l1"
    policy_reg: float = 1e-3  # L2 penalty on pre-tanh policy outputs

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.c4) < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.policy_reg < 0:
            raise ValueError("policy_reg must be nonnegative")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lam must be in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.bisim_dyn_distance not in ("sq_l2", "l2", "l1"):
            raise ValueError(
                "bisim_dyn_distance must be 'sq_l2', 'l2' or 'l1'")


@dataclass
class SegmentBatch:
    """H+2 observations, H+1 actions/rewards per segment (loss steps k=0..H)."""

    obs: np.ndarray      # (H+2, B, state_dim)
    actions: np.ndarray  # (H+1, B, action_dim)
    rewards: np.ndarray  # (H+1, B)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0] - 1

    @property
    def batch_size(self) -> int:
        return self.obs.shape[1]


@dataclass
class LossBreakdown:
    """Per-step and aggregated loss values for one training step."""

    per_step: dict[str, np.ndarray]          # term -> (H+1,)
    weighted: dict[str, float]               # term -> sum_k lam^k c_i term_k
    total: float = 0.0
    grad_norm: float = float("nan")          # pre-clip; filled by the trainer
    q_mean: float = float("nan")

    CSV_COLUMNS = ("total",) + TERM_NAMES + ("grad_norm", "q_mean")


def permute_batch(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform permutation per training step, shared across time steps."""
    if batch_size < 2:
        raise ValueError("bisimulation pairing needs batch_size >= 2")
    return rng.permutation(batch_size)


def _check_finite(arr: np.ndarray, term: str, batch_size: int) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.argmax(~np.isfinite(arr).reshape(-1)))
        raise LossComputationError(term, bad // batch_size)


def _stack_steps(x: np.ndarray) -> np.ndarray:
    """(K, B, d) -> (K*B, d); (K, B) -> (K*B, 1)."""
    if x.ndim == 2:
        return x.reshape(-1, 1)
    return x.reshape(-1, x.shape[-1])


def _per_step_terms(models: ModelSet, z_k: Tensor, z_perm: Tensor,
                    a_flat: np.ndarray, r_col: np.ndarray,
                    td_col: np.ndarray, z_next_tgt: np.ndarray,
                    r_perm_col: np.ndarray, dyn_gap_col: np.ndarray,
                    coeffs: LossCoefficients):
    """Row-wise values of terms A-D for a block of rows sharing encodings."""
    a_t = Tensor(a_flat)
    za = z_k.concat(a_t)

    rhat = models.reward.forward(za)
    term_a = (rhat - Tensor(r_col)).square()

    q1 = models.q1.forward(za)
    q2 = models.q2.forward(za)
    td = Tensor(td_col)
    term_b = ((q1 - td).square() + (q2 - td).square()) * 0.5

    zhat = models.dynamics.forward(za)
    term_c = (zhat - Tensor(z_next_tgt)).square().sum(axis=-1, keepdims=True)

    l1 = (z_k - z_perm).abs().sum(axis=-1, keepdims=True)
    rgap = np.abs(r_col - r_perm_col)
    term_d = (l1 - Tensor(rgap + coeffs.gamma * dyn_gap_col)).square()

    return term_a, term_b, term_c, term_d


def _prepare_constants(models: ModelSet, batch: SegmentBatch, perm: np.ndarray,
                       coeffs: LossCoefficients, z_all_data: np.ndarray):
    """All gradient-stopped quantities, computed tape-free in one batch.

    ``z_all_data`` holds online encodings of obs[0..H+1] stacked as
    ((H+2)*B, latent).
    """
    h1 = batch.horizon + 1
    b = batch.batch_size
    a_flat = _stack_steps(batch.actions)                  # (h1*B, A)
    r_col = _stack_steps(batch.rewards)                   # (h1*B, 1)

    # TD target: r_k + gamma * min_target_Q(z_{k+1}, pi(z_{k+1})), all stopped.
    z_next_online = z_all_data[b:]                        # rows for k=1..H+1
    pi_next = models.policy_np(z_next_online)
    q_next = models.q_np(z_next_online, pi_next, mode="min", target=True)
    td_col = r_col + coeffs.gamma * q_next[:, None]

    # Consistency target: target-encoder embedding of s_{k+1}.
    obs_next = _stack_steps(batch.obs[1:])
    z_next_tgt = models.encode_np(obs_next, target=True)

    # Bisimulation dynamics branch: target dynamics on stopped latents.
    z_bar = models.predict_next_np(z_all_data[:h1 * b], a_flat, target=True)
    z_bar_perm = z_bar.reshape(h1, b, -1)[:, perm].reshape(h1 * b, -1)
    diff = z_bar - z_bar_perm
    if coeffs.bisim_dyn_distance == "l1":
        # Norm-consistent with the online l1 distance (the metric
        # recursion's form); avoids a systematic l1-vs-l2 scale gap.
        dyn_gap_col = np.abs(diff).sum(axis=-1, keepdims=True)
    else:
        sq = (diff**2).sum(axis=-1, keepdims=True)
        dyn_gap_col = sq if coeffs.bisim_dyn_distance == "sq_l2" else np.sqrt(sq)

    r_perm_col = _stack_steps(batch.rewards[:, perm])

    # Catch divergence in the stopped branches here so the caller always
    # sees a LossComputationError naming the term, never a tape error.
    _check_finite(td_col, "value_loss", b)
    _check_finite(z_next_tgt, "consistency_loss", b)
    _check_finite(dyn_gap_col, "bisim_loss", b)
    return a_flat, r_col, td_col, z_next_tgt, r_perm_col, dyn_gap_col


def total_model_loss(models: ModelSet, batch: SegmentBatch,
                     coeffs: LossCoefficients, perm: np.ndarray,
                     n_workers: int = 1) -> tuple[Tensor, LossBreakdown]:
    """Eq.-style total: sum_k lam^k (c1 A_k + c2 B_k + c3 C_k + c4 D_k),
    each term averaged over the batch at its step.

    Returns the scalar loss tensor (ready for ``backward``) and the
    breakdown. ``n_workers > 1`` fans the per-step forward passes out to a
    thread pool; the reduction order over k is fixed either way.
    """
    h1 = batch.horizon + 1
    b = batch.batch_size
    if perm.shape != (b,):
        raise ValueError("permutation length must equal batch size")

    obs_flat = _stack_steps(batch.obs)
    z_all = models.encode(Tensor(obs_flat))
    consts = _prepare_constants(models, batch, perm, coeffs, z_all.data)
    a_flat, r_col, td_col, z_next_tgt, r_perm_col, dyn_gap_col = consts

    per_step = {name: np.zeros(h1) for name in TERM_NAMES}
    coefs = (coeffs.c1, coeffs.c2, coeffs.c3, coeffs.c4)

    def step_means(k: int):
        lo, hi = k * b, (k + 1) * b
        z_k = z_all.row_slice(lo, hi)
        z_perm = z_all.take_rows(lo + perm)
        terms = _per_step_terms(
            models, z_k, z_perm, a_flat[lo:hi], r_col[lo:hi], td_col[lo:hi],
            z_next_tgt[lo:hi], r_perm_col[lo:hi], dyn_gap_col[lo:hi], coeffs)
        means = []
        for name, t in zip(TERM_NAMES, terms):
            _check_finite(t.data, name, b)
            means.append(t.mean())
        return means

    if n_workers <= 1:
        # Single batched evaluation over all rows. One (H+1) x (H+1)B
        # averaging matmul per term replaces the per-step slice-and-mean
        # nodes; the lambda/coefficient weighting is then a dot over steps.
        z_k = z_all.row_slice(0, h1 * b)
        idx = (np.arange(h1)[:, None] * b + perm[None, :]).reshape(-1)
        z_perm = z_all.take_rows(idx)
        terms = _per_step_terms(models, z_k, z_perm, a_flat, r_col, td_col,
                                z_next_tgt, r_perm_col, dyn_gap_col, coeffs)
        red = np.zeros((h1, h1 * b))
        for k in range(h1):
            red[k, k * b:(k + 1) * b] = 1.0 / b
        red_t = Tensor(red)
        lam_row = Tensor((coeffs.lam ** np.arange(h1))[None, :])
        total = None
        for name, c, t in zip(TERM_NAMES, coefs, terms):
            _check_finite(t.data, name, b)
            means = red_t.matmul(t)                    # (h1, 1) step means
            per_step[name][:] = means.data[:, 0]
            contrib = lam_row.matmul(means) * c        # (1, 1)
            total = contrib if total is None else total + contrib
        total = total.sum()
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            all_means = list(pool.map(step_means, range(h1)))
        total = None
        for k in range(h1):
            lam_k = coeffs.lam**k
            step_total = None
            for name, c, m in zip(TERM_NAMES, coefs, all_means[k]):
                per_step[name][k] = float(m.data)
                contrib = m * (c * lam_k)
                step_total = contrib if step_total is None else step_total + contrib
            total = step_total if total is None else total + step_total

    weighted = {
        name: float(sum(coefs[i] * coeffs.lam**k * per_step[name][k]
                        for k in range(h1)))
        for i, name in enumerate(TERM_NAMES)
    }
    breakdown = LossBreakdown(per_step=per_step, weighted=weighted,
                              total=float(total.data))
    return total, breakdown


def policy_loss(models: ModelSet, batch: SegmentBatch,
                coeffs: LossCoefficients) -> tuple[Tensor, float]:
    """Negative lambda-weighted sum of Q(z_k, pi(z_bar_k)), averaged over the
    batch; z_k is the stopped online latent, z_bar_k the stopped target
    latent, and the value head's parameters are frozen so only the policy
    receives gradient. A small L2 penalty on the pre-tanh outputs keeps the
    squashed policy away from full saturation, where the tanh gradient
    vanishes and the policy can no longer be corrected.
    Returns (loss, mean Q diagnostic)."""
    h1 = batch.horizon + 1
    b = batch.batch_size
    obs_flat = _stack_steps(batch.obs[:h1])
    z_online = models.encode_np(obs_flat)
    z_target = models.encode_np(obs_flat, target=True)

    u = models.policy.forward(Tensor(z_target))
    a = u.tanh() * models._action_half + models._action_mid
    q = models.q1.forward(Tensor(z_online).concat(a), frozen=True)

    lam_w = np.repeat(coeffs.lam ** np.arange(h1), b)[:, None] / b
    loss = -(q * Tensor(lam_w)).sum()
    if coeffs.policy_reg > 0:
        loss = loss + (u.square() * Tensor(coeffs.policy_reg * lam_w)).sum()
    return loss, float(q.data.mean())


def sequential_reference_loss(models: ModelSet, batch: SegmentBatch,
                              coeffs: LossCoefficients,
                              perm: np.ndarray) -> Tensor:
    """Benchmark reference with a chained latent rollout: only s_0 is
    encoded and z_{k+1} comes from the online dynamics applied to the
    previous predicted latent, so the horizon must be walked in order."""
    h1 = batch.horizon + 1
    b = batch.batch_size
    consts_z = models.encode_np(_stack_steps(batch.obs))
    _, r_col, td_col, z_next_tgt, r_perm_col, dyn_gap_col = _prepare_constants(
        models, batch, perm, coeffs, consts_z)

    z_k = models.encode(Tensor(batch.obs[0]))
    total = None
    for k in range(h1):
        lo, hi = k * b, (k + 1) * b
        z_perm = z_k.take_rows(perm)
        terms = _per_step_terms(
            models, z_k, z_perm, batch.actions[k], r_col[lo:hi], td_col[lo:hi],
            z_next_tgt[lo:hi], r_perm_col[lo:hi], dyn_gap_col[lo:hi], coeffs)
        coefs = (coeffs.c1, coeffs.c2, coeffs.c3, coeffs.c4)
        step_total = None
        for c, t in zip(coefs, terms):
            contrib = t.mean() * (c * coeffs.lam**k)
            step_total = contrib if step_total is None else step_total + contrib
        total = step_total if total is None else total + step_total
        if k < h1 - 1:
            z_k = models.predict_next(z_k, Tensor(batch.actions[k]))
    return total
