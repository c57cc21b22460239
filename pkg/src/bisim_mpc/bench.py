"""Timing harness for the objective: the batched per-step path (all time
steps stacked into single matrix products, optionally sharded across
threads) against a sequential reference that chains the latent rollout
one step at a time.

The per-step formulation has no serial dependency between time steps, so
worker threads can shard it across cores; on a single core the batched
evaluation amortizes each weight matrix over (H+1)*B rows, which roughly
matches the sequential reference (both are BLAS-bound at equal FLOPs).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .models import ModelConfig, ModelSet


def _synthetic_batch(batch: int, horizon: int, state_dim: int,
                     action_dim: int, rng: np.random.Generator) -> L.SegmentBatch:
    return L.SegmentBatch(
        obs=rng.normal(size=(horizon + 2, batch, state_dim)),
        actions=rng.uniform(-1, 1, size=(horizon + 1, batch, action_dim)),
        rewards=rng.normal(size=(horizon + 1, batch)))


@dataclass
class BenchResult:
    batch: int
    horizon: int
    repeats: int
    sequential_s: float
    per_worker_s: dict[int, float]
    totals: dict[int, float] = field(default_factory=dict)
    sequential_total: float = 0.0

    @property
    def max_rel_disagreement(self) -> float:
        """Largest relative loss gap between worker counts (not vs the
        sequential path, whose reduction order differs by design)."""
        vals = list(self.totals.values())
        ref = vals[0]
        scale = max(abs(ref), 1.0)
        return max(abs(v - ref) / scale for v in vals)

    def speedup(self, workers: int = 1) -> float:
        return self.sequential_s / self.per_worker_s[workers]

    def table(self) -> str:
        lines = [f"batch={self.batch} horizon={self.horizon} repeats={self.repeats}",
                 f"  sequential reference: {self.sequential_s * 1e3:8.2f} ms/call"]
        for w, t in sorted(self.per_worker_s.items()):
            lines.append(f"  per-step, workers={w}: {t * 1e3:8.2f} ms/call "
                         f"(speedup {self.sequential_s / t:4.2f}x)")
        lines.append(f"  worker-count loss disagreement: "
                     f"{self.max_rel_disagreement:.3e}")
        return "\n".join(lines)


def _time_loss(fn, repeats: int) -> tuple[float, float]:
    """(seconds per call, loss value); one warm-up call excluded."""
    fn()
    vals = []
    t0 = time.perf_counter()
    for _ in range(repeats):
        vals.append(fn())
    elapsed = (time.perf_counter() - t0) / repeats
    return elapsed, vals[-1]


def run_benchmark(batch: int = 256, horizon: int = 5,
                  workers: list[int] = (1, 4), repeats: int = 10,
                  seed: int = 0, state_dim: int = 3, action_dim: int = 1,
                  backward: bool = True) -> BenchResult:
    rng = np.random.default_rng(seed)
    models = ModelSet(ModelConfig(state_dim=state_dim, action_dim=action_dim), rng)
    data = _synthetic_batch(batch, horizon, state_dim, action_dim, rng)
    coeffs = L.LossCoefficients()
    perm = L.permute_batch(batch, np.random.default_rng(seed + 1))

    def parallel(w: int) -> float:
        models.store.zero_grad()
        total, _ = L.total_model_loss(models, data, coeffs, perm, n_workers=w)
        if backward:
            total.backward()
        return float(total.data)

    def sequential() -> float:
        models.store.zero_grad()
        total = L.sequential_reference_loss(models, data, coeffs, perm)
        if backward:
            total.backward()
        return float(total.data)

    seq_s, seq_total = _time_loss(sequential, repeats)
    per_worker, totals = {}, {}
    for w in workers:
        per_worker[w], totals[w] = _time_loss(lambda w=w: parallel(w), repeats)
    return BenchResult(batch=batch, horizon=horizon, repeats=repeats,
                       sequential_s=seq_s, per_worker_s=per_worker,
                       totals=totals, sequential_total=seq_total)
