"""Accuracy reward plus the clipped linear efficient-length reward."""
from __future__ import annotations

from dataclasses import dataclass

from .envs import Prompt, verify
from .policy import TokenSequence


@dataclass(frozen=True)
class LengthRewardConfig:
    l_budget: int = 32
    alpha: float = 0.005
    delta: float = 0.5
    w_len: float = 0.5

    def problems(self) -> list[str]:
        out = []
        if self.l_budget < 1:
            out.append("l_budget: l_budget >= 1")
        if not self.alpha > 0:
            out.append("alpha: alpha > 0")
        if not 0.0 <= self.delta <= 1.0:
            out.append("delta: delta ∈ [0,1]")
        if not self.w_len >= 0:
            out.append("w_len: w_len >= 0")
        return out


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    r_len: float
    r_total: float


def length_reward(length: int, cfg: LengthRewardConfig) -> float:
    raw = cfg.alpha * (cfg.l_budget - length) + cfg.delta
    return max(0.0, min(1.0, raw))


def total_reward(prompt: Prompt, seq: TokenSequence, cfg: LengthRewardConfig,
                 length_reward_enabled: bool = True) -> RewardBreakdown:
    r_acc = verify(prompt, seq)
    if not length_reward_enabled:
        return RewardBreakdown(r_acc, 0.0, float(r_acc))
    # L_y counts every response token, EOS included
    r_len = length_reward(seq.length, cfg)
    return RewardBreakdown(r_acc, r_len, r_acc + cfg.w_len * r_len)
