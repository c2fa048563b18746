"""Clipped GRPO surrogate, k3 KL penalty, entropy bonus, and the optimizer step.

All losses are minimized. Gradients are w.r.t. the policy logits table and are
assembled from per-token coefficients on ``d log pi / d logits``:

* surrogate: coefficient ``-ratio * A / n`` where the unclipped branch of the
  min is selected, 0 where the clipped constant is selected;
* k3 KL with ``d = log pi_ref - log pi``: coefficient ``(1 - exp(d)) / n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pad import DistilledBatch
from .policy import (
    PolicyParams,
    accumulate_logprob_grad,
    batch_contexts,
    entropy_and_grad,
    token_logprobs,
)

RATIO_LEVELS = ("token", "sequence")


class SkipStep(Exception):
    """Raised when there is nothing to learn from (empty distilled batch)."""


class Diverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class EntropySchedule:
    beta0: float = 0.02
    beta_min: float = 0.0
    decay_lambda: float = 0.985
    warmup_steps: int = 140

    def problems(self) -> list[str]:
        out = []
        if not self.beta_min <= self.beta0:
            out.append("entropy.beta_min: beta_min <= beta0")
        if not 0 < self.decay_lambda <= 1:
            out.append("entropy.decay_lambda: decay_lambda ∈ (0,1]")
        if self.warmup_steps < 0:
            out.append("entropy.warmup_steps: warmup_steps >= 0")
        return out


@dataclass(frozen=True)
class GrpoConfig:
    clip_eps: float = 0.2
    kl_coef: float = 2e-3
    kl_enabled: bool = False
    entropy_enabled: bool = False
    entropy: EntropySchedule = field(default_factory=EntropySchedule)
    learning_rate: float = 0.5
    max_grad_norm: float = 1.0
    ratio_level: str = "token"
    update_epochs: int = 1
    eps_stability: float = 1e-6

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.clip_eps < 1:
            out.append("clip_eps: clip_eps ∈ (0,1)")
        if not self.kl_coef >= 0:
            out.append("kl_coef: kl_coef >= 0")
        if not self.learning_rate > 0:
            out.append("learning_rate: learning_rate > 0")
        if not self.max_grad_norm > 0:
            out.append("max_grad_norm: max_grad_norm > 0")
        if self.ratio_level not in RATIO_LEVELS:
            out.append(f"ratio_level: one of {', '.join(RATIO_LEVELS)}")
        if self.update_epochs < 1:
            out.append("update_epochs: update_epochs >= 1")
        if not self.eps_stability > 0:
            out.append("eps_stability: eps_stability > 0")
        out.extend(self.entropy.problems())
        return out


@dataclass(frozen=True)
class LossReport:
    surrogate_loss: float = 0.0
    kl_penalty: float = 0.0
    entropy_bonus: float = 0.0
    total_loss: float = 0.0
    clip_fraction: float = 0.0
    grad_norm_pre_clip: float = 0.0


def entropy_coef(schedule: EntropySchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < schedule.warmup_steps:
        return schedule.beta0
    return max(schedule.beta_min, schedule.beta0 * schedule.decay_lambda ** (step - schedule.warmup_steps))


def _flatten(params: PolicyParams, distilled: DistilledBatch):
    seqs = [r.seq for r in distilled.selected]
    ctx, tok, owner = batch_contexts(params, seqs)
    behavior = np.concatenate([np.asarray(r.behavior_logprob, dtype=np.float64) for r in distilled.selected])
    adv = np.array([r.advantage for r in distilled.selected], dtype=np.float64)
    return ctx, tok, owner, behavior, adv


def _clipped_objective(ratio: np.ndarray, adv: np.ndarray, clip_eps: float):
    """Per-element min(r A, clip(r) A), d objective / d r, and clipped-branch mask."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    use_clipped = clipped < unclipped
    obj = np.where(use_clipped, clipped, unclipped)
    d_obj_d_ratio = np.where(use_clipped, 0.0, adv)
    return obj, d_obj_d_ratio, use_clipped


def surrogate_loss(params: PolicyParams, distilled: DistilledBatch,
                   cfg: GrpoConfig) -> tuple[LossReport, np.ndarray]:
    """Negative clipped surrogate against the behavior log-probs stored in each rollout."""
    if distilled.empty:
        raise SkipStep("empty distilled batch")
    ctx, tok, owner, behavior, adv = _flatten(params, distilled)
    logp = token_logprobs(params, ctx, tok)
    if cfg.ratio_level == "token":
        n = len(ctx)
        if n == 0:
            raise SkipStep("distilled batch has no tokens")
        ratio = np.exp(logp - behavior)
        obj, d_ratio, clipped = _clipped_objective(ratio, adv[owner], cfg.clip_eps)
        # d ratio / d logp = ratio
        coeff = -(d_ratio * ratio) / n
    else:
        n = len(adv)
        seq_logp = np.bincount(owner, weights=logp, minlength=n)
        seq_beh = np.bincount(owner, weights=behavior, minlength=n)
        ratio = np.exp(seq_logp - seq_beh)
        obj, d_ratio, clipped = _clipped_objective(ratio, adv, cfg.clip_eps)
        coeff = (-(d_ratio * ratio) / n)[owner]
    loss = -float(obj.mean())
    grad = accumulate_logprob_grad(params, ctx, tok, coeff)
    report = LossReport(surrogate_loss=loss, total_loss=loss, clip_fraction=float(clipped.mean()))
    return report, grad


def kl_terms(params: PolicyParams, ref: PolicyParams, distilled: DistilledBatch) -> np.ndarray:
    """Per-token k3 terms ``exp(d) - d - 1`` with ``d = log pi_ref - log pi``."""
    ctx, tok, _, _, _ = _flatten(params, distilled)
    d = token_logprobs(ref, ctx, tok) - token_logprobs(params, ctx, tok)
    return np.expm1(d) - d


def kl_penalty(params: PolicyParams, ref: PolicyParams,
               distilled: DistilledBatch) -> tuple[float, np.ndarray]:
    """Low-variance KL estimate averaged over tokens, with its gradient."""
    ctx, tok, _, _, _ = _flatten(params, distilled)
    if len(ctx) == 0:
        return 0.0, np.zeros_like(params.logits)
    d = token_logprobs(ref, ctx, tok) - token_logprobs(params, ctx, tok)
    terms = np.expm1(d) - d
    grad = accumulate_logprob_grad(params, ctx, tok, -np.expm1(d) / len(ctx))
    return float(terms.mean()), grad


def compute_loss(params: PolicyParams, ref: PolicyParams | None, distilled: DistilledBatch,
                 cfg: GrpoConfig, step: int) -> tuple[LossReport, np.ndarray, float]:
    """Total loss ``surrogate + kl_coef * kl - beta * entropy`` and its gradient.

    Returns the report, the gradient, and the entropy coefficient used.
    """
    rep, grad = surrogate_loss(params, distilled, cfg)
    kl = 0.0
    if cfg.kl_enabled and ref is not None:
        kl, g_kl = kl_penalty(params, ref, distilled)
        grad = grad + cfg.kl_coef * g_kl
    beta = entropy_coef(cfg.entropy, step) if cfg.entropy_enabled else 0.0
    ent = 0.0
    if beta > 0:
        ctx, _, _ = batch_contexts(params, [r.seq for r in distilled.selected])
        ent, g_ent = entropy_and_grad(params, ctx)
        grad = grad - beta * g_ent
    total = rep.surrogate_loss + (cfg.kl_coef * kl if cfg.kl_enabled else 0.0) - beta * ent
    rep = LossReport(rep.surrogate_loss, kl, ent, total, rep.clip_fraction, float(np.linalg.norm(grad)))
    return rep, grad, beta


def apply_update(params: PolicyParams, total_gradient: np.ndarray, cfg: GrpoConfig) -> PolicyParams:
    g = np.asarray(total_gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise Diverged("diverged")
    norm = float(np.linalg.norm(g))
    if norm > cfg.max_grad_norm:
        g = g * (cfg.max_grad_norm / norm)
    new = params.logits - cfg.learning_rate * g
    if not np.all(np.isfinite(new)):
        raise Diverged("diverged")
    return params.with_logits(new)
