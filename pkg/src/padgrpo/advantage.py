"""Group-relative advantages: z-score of each reward within its prompt group."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .policy import TokenSequence
from .rewards import RewardBreakdown

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class Rollout:
    seq: TokenSequence
    behavior_logprob: np.ndarray
    reward: RewardBreakdown
    advantage: float = 0.0

    def __post_init__(self):
        if len(self.behavior_logprob) != self.seq.length:
            raise ValueError("behavior log-probs must cover every response token")


@dataclass(frozen=True)
class Group:
    prompt_id: str
    rollouts: tuple[Rollout, ...]

    def __post_init__(self):
        object.__setattr__(self, "rollouts", tuple(self.rollouts))
        if any(r.seq.prompt_id != self.prompt_id for r in self.rollouts):
            raise ValueError("all rollouts in a group must share its prompt_id")

    @property
    def G(self) -> int:
        return len(self.rollouts)


def group_advantages(rewards: Sequence[float], eps_stability: float = DEFAULT_EPS) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("degenerate group")
    centered = r - r.mean()
    if np.all(r == r[0]):
        # exact zeros, independent of rounding in the mean
        return np.zeros_like(r)
    return centered / (r.std() + eps_stability)


def estimate_advantages(group: Group, eps_stability: float = DEFAULT_EPS) -> Group:
    if not eps_stability > 0:
        raise ValueError("eps_stability must be > 0")
    adv = group_advantages([ro.reward.r_total for ro in group.rollouts], eps_stability)
    return Group(group.prompt_id, tuple(replace(ro, advantage=float(a)) for ro, a in zip(group.rollouts, adv)))


def batch_advantages(groups: Sequence[Group], eps_stability: float = DEFAULT_EPS) -> list[Rollout]:
    out: list[Rollout] = []
    for g in groups:
        out.extend(estimate_advantages(g, eps_stability).rollouts)
    return out
