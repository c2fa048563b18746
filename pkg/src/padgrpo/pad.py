"""Prioritized Advantage Distillation and the ablation baselines.

PAD works on one flattened rollout batch at a time:

1. keep the indices whose absolute advantage lies in ``[t_low, t_high]``
   (the effective set E; zero-advantage rollouts from uniform-reward groups
   never survive because ``t_low > 0``);
2. draw ``k' = min(ceil(rho * N), |E|)`` distinct indices from E with
   priorities ``softmax(|A| / tau)``.

Weighted sampling without replacement uses exponential keys: each candidate
gets ``log(u) / p`` and the k' largest keys win. For k' = 1 this selects
index i with probability exactly p_i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .advantage import Rollout

STRATEGIES = ("pad", "grpo_baseline", "grpo_filter", "random_sampling")
PRIORITY_MODES = ("abs", "signed")


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.3
    horizon: int = 2000

    def problems(self) -> list[str]:
        out = []
        if not self.tau_start >= self.tau_end > 0:
            out.append("tau: tau_start >= tau_end > 0")
        if self.horizon < 1:
            out.append("tau.horizon: horizon >= 1")
        return out


@dataclass(frozen=True)
class PadConfig:
    t_low: float = 0.05
    t_high: float = 10.0
    rho: float = 0.5
    tau: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    priority: str = "abs"

    def problems(self) -> list[str]:
        out = []
        if not self.t_low > 0:
            out.append("t_low: t_low > 0")
        if not self.t_high >= self.t_low:
            out.append("t_high: t_high >= t_low")
        if not 0 < self.rho <= 1:
            out.append("rho: rho ∈ (0,1]")
        if self.priority not in PRIORITY_MODES:
            out.append(f"priority: one of {', '.join(PRIORITY_MODES)}")
        out.extend(self.tau.problems())
        return out


@dataclass(frozen=True)
class DistilledBatch:
    selected: tuple[Rollout, ...]
    selected_indices: tuple[int, ...]
    effective_set_size: int
    k_prime: int

    @property
    def empty(self) -> bool:
        return not self.selected

    def __len__(self):
        return len(self.selected)


def tau_at(schedule: TemperatureSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= schedule.horizon:
        return schedule.tau_end
    frac = step / schedule.horizon
    return schedule.tau_start + frac * (schedule.tau_end - schedule.tau_start)


def filter_effective(advantages: Sequence[float], t_low: float, t_high: float) -> dict[int, float]:
    """Map of batch index -> |A| for every index inside the informative range."""
    out = {}
    for i, a in enumerate(advantages):
        mag = abs(float(a))
        if t_low <= mag <= t_high:
            out[i] = mag
    return out


def sampling_probabilities(scores: dict[int, float], tau: float) -> dict[int, float]:
    """Softmax of ``score / tau`` over the effective set, uniform if it degenerates."""
    if not scores:
        raise ValueError("empty effective set")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    idx = list(scores)
    x = np.array([scores[i] for i in idx], dtype=np.float64) / tau
    w = np.exp(x - x.max())
    z = w.sum()
    if not (np.isfinite(z) and z > 0):
        p = np.full(len(idx), 1.0 / len(idx))
    else:
        p = w / z
    return dict(zip(idx, p.tolist()))


def weighted_sample_without_replacement(items: Sequence[int], probs: Sequence[float], k: int,
                                        rng: np.random.Generator) -> list[int]:
    """Efraimidis-Spirakis selection, returned in draw order (largest key first)."""
    if k <= 0:
        return []
    p = np.asarray(probs, dtype=np.float64)
    u = rng.random(len(p))
    with np.errstate(divide="ignore"):
        keys = np.log(u) / p
    order = np.argsort(-keys, kind="stable")[:k]
    return [items[j] for j in order]


def _empty(effective: int = 0) -> DistilledBatch:
    return DistilledBatch((), (), effective, 0)


def distill(batch: Sequence[Rollout], cfg: PadConfig, step: int, rng_seed: int) -> DistilledBatch:
    n = len(batch)
    if n < 1:
        raise ValueError("batch must hold at least one rollout")
    effective = filter_effective([r.advantage for r in batch], cfg.t_low, cfg.t_high)
    if not effective:
        return _empty()
    if cfg.priority == "abs":
        scores = effective
    else:
        scores = {i: float(batch[i].advantage) for i in effective}
    probs = sampling_probabilities(scores, tau_at(cfg.tau, step))
    k_prime = min(math.ceil(cfg.rho * n), len(effective))
    idx = list(probs)
    chosen = weighted_sample_without_replacement(idx, [probs[i] for i in idx], k_prime,
                                                 np.random.default_rng(rng_seed))
    return DistilledBatch(tuple(batch[i] for i in chosen), tuple(chosen), len(effective), k_prime)


def select_strategy(name: str, batch: Sequence[Rollout], cfg: PadConfig, step: int,
                    rng_seed: int) -> DistilledBatch:
    n = len(batch)
    if name == "pad":
        return distill(batch, cfg, step, rng_seed)
    if name == "grpo_baseline":
        return DistilledBatch(tuple(batch), tuple(range(n)), n, n)
    if name == "grpo_filter":
        effective = filter_effective([r.advantage for r in batch], cfg.t_low, cfg.t_high)
        idx = tuple(sorted(effective))
        return DistilledBatch(tuple(batch[i] for i in idx), idx, len(idx), len(idx))
    if name == "random_sampling":
        k = min(math.ceil(cfg.rho * n), n)
        idx = tuple(int(i) for i in np.random.default_rng(rng_seed).permutation(n)[:k])
        return DistilledBatch(tuple(batch[i] for i in idx), idx, n, k)
    raise ValueError(f"unknown strategy {name!r}; valid: {', '.join(STRATEGIES)}")
