"""Staged rollout -> reward -> advantage -> distill -> update loop.

Randomness is derived, never carried: every draw in a stage comes from
``derive_seed(seed, stage_index, step, purpose, ...)`` with purposes
0 (prompt selection), 1 (rollout i), 2 (distillation). A checkpoint therefore
only needs the parameters, the reference policy and the next step index to
continue a run bit-for-bit.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .advantage import Group, Rollout, batch_advantages
from .config import StageConfig, stage_from_dict, to_dict
from .envs import Prompt, generate_dataset
from .grpo import Diverged, LossReport, SkipStep, compute_loss, apply_update
from .pad import filter_effective, select_strategy, tau_at
from .policy import PolicyParams, derive_seed, policy_entropy, sample_batch, snapshot
from .rewards import total_reward

log = logging.getLogger(__name__)

PURPOSE_PROMPTS, PURPOSE_ROLLOUT, PURPOSE_DISTILL = 0, 1, 2


# --- metrics --------------------------------------------------------------


@dataclass(frozen=True)
class TrainMetrics:
    stage: str
    step: int
    skipped: bool
    reward_accuracy: float
    mean_reward: float
    entropy: float
    mean_response_length: float
    clip_fraction: float
    effective_set_fraction: float
    k_prime: int
    surrogate_loss: float
    kl_penalty: float
    entropy_bonus: float
    total_loss: float
    grad_norm: float
    tau: float
    beta: float


METRIC_COLUMNS = tuple(f.name for f in dataclasses.fields(TrainMetrics))
_COLUMN_TYPES = {f.name: f.type for f in dataclasses.fields(TrainMetrics)}


class SchemaError(ValueError):
    pass


def collect_metrics(stage: str, step: int, rollouts: Sequence[Rollout], entropy: float,
                    effective_size: int, k_prime: int, report: LossReport | None,
                    tau: float, beta: float) -> TrainMetrics:
    """One row of the metrics stream. ``report=None`` marks a skipped step."""
    n = len(rollouts)
    acc = sum(r.reward.r_acc for r in rollouts) / n
    mean_reward = sum(r.reward.r_total for r in rollouts) / n
    mean_len = sum(r.seq.length for r in rollouts) / n
    skipped = report is None
    report = report or LossReport()
    return TrainMetrics(
        stage=stage,
        step=step,
        skipped=skipped,
        reward_accuracy=float(acc),
        mean_reward=float(mean_reward),
        entropy=float(entropy),
        mean_response_length=float(mean_len),
        clip_fraction=report.clip_fraction,
        effective_set_fraction=effective_size / n,
        k_prime=int(k_prime),
        surrogate_loss=report.surrogate_loss,
        kl_penalty=report.kl_penalty,
        entropy_bonus=report.entropy_bonus,
        total_loss=report.total_loss,
        grad_norm=report.grad_norm_pre_clip,
        tau=float(tau),
        beta=float(beta),
    )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(metrics: Iterable[TrainMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([_fmt(getattr(m, c)) for c in METRIC_COLUMNS])


def write_curves_csv(rows: Iterable[tuple[int, TrainMetrics]], path: str | Path) -> None:
    """Ablation curves: a ``seed`` column followed by the metrics schema."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", *METRIC_COLUMNS])
        for seed, m in rows:
            w.writerow([seed] + [_fmt(getattr(m, c)) for c in METRIC_COLUMNS])


def _parse(col: str, text: str):
    t = _COLUMN_TYPES[col]
    if t == "bool":
        return text == "1"
    if t == "int":
        return int(text)
    if t == "float":
        return float(text)
    return text


def read_metrics_csv(path: str | Path) -> list[TrainMetrics]:
    """Read a metrics CSV, rejecting anything but the exact documented schema."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for i, col in enumerate(header):
            if i >= len(METRIC_COLUMNS) or col != METRIC_COLUMNS[i]:
                raise SchemaError(f"{path}: unexpected column {col!r}")
        if len(header) != len(METRIC_COLUMNS):
            raise SchemaError(f"{path}: missing column {METRIC_COLUMNS[len(header)]!r}")
        return [TrainMetrics(*(_parse(c, v) for c, v in zip(METRIC_COLUMNS, row))) for row in reader]


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_MAGIC = b"PADGRPO-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    stage_name: str
    stage_index: int
    step: int  # next step to run
    seed: int
    config_hash: str
    params: PolicyParams
    ref: PolicyParams
    stage_config: dict

    def save(self, path: str | Path) -> Path:
        p = self.params
        header = {
            "format_version": CHECKPOINT_VERSION,
            "stage_name": self.stage_name,
            "stage_index": self.stage_index,
            "step": self.step,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "stage_config": self.stage_config,
            "policy": {
                "vocab_size": p.vocab_size,
                "max_len": p.max_len,
                "context_order": p.context_order,
                "n_prompt_keys": p.n_prompt_keys,
                "eos_id": p.eos_id,
            },
        }
        blob = json.dumps(header, sort_keys=True).encode()
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.params.logits, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.ref.logits, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        data = Path(path).read_bytes()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        off = len(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack_from("<II", data, off)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off += 8
        header = json.loads(data[off : off + hlen])
        off += hlen
        pol = header["policy"]
        n_ctx = pol["n_prompt_keys"] * (pol["vocab_size"] + 1) ** pol["context_order"]
        size = n_ctx * pol["vocab_size"]
        arrays = np.frombuffer(data, dtype="<f8", count=2 * size, offset=off).astype(np.float64)
        make = lambda a: PolicyParams(pol["vocab_size"], pol["max_len"], pol["context_order"],  # noqa: E731
                                      pol["n_prompt_keys"], a.reshape(n_ctx, -1), pol["eos_id"])
        return cls(header["stage_name"], header["stage_index"], header["step"], header["seed"],
                   header["config_hash"], make(arrays[:size]), make(arrays[size:]), header["stage_config"])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message if checkpoint is None else f"{message} (checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


# --- the loop -------------------------------------------------------------


def _check_compatible(params: PolicyParams, cfg: StageConfig) -> None:
    if params.vocab_size != cfg.env.vocab_size or params.max_len != cfg.env.max_len:
        raise ValueError("policy vocab_size/max_len must match the stage environment")


def rollout_step(params: PolicyParams, cfg: StageConfig, dataset: Sequence[Prompt], seed: int,
                 stage_index: int, step: int) -> list[Rollout]:
    """Sample prompts and G rollouts each; rewards and advantages filled in."""
    rng = np.random.default_rng(derive_seed(seed, stage_index, step, PURPOSE_PROMPTS))
    k = cfg.rollout_batch_prompts
    picks = rng.choice(len(dataset), size=k, replace=k > len(dataset))
    prompts = [dataset[i] for i in picks]
    flat = [p for p in prompts for _ in range(cfg.group_size)]
    seeds = [derive_seed(seed, stage_index, step, PURPOSE_ROLLOUT, i) for i in range(len(flat))]
    gen = cfg.generation
    seqs, logps = sample_batch(params, [p.key for p in flat], [p.prompt_id for p in flat],
                               gen.temperature, gen.top_p, seeds)
    groups = []
    G = cfg.group_size
    for gi, prompt in enumerate(prompts):
        rollouts = []
        for j in range(gi * G, (gi + 1) * G):
            reward = total_reward(prompt, seqs[j], cfg.rewards.length, cfg.rewards.length_reward_enabled)
            rollouts.append(Rollout(seqs[j], logps[j], reward))
        groups.append(Group(prompt.prompt_id, tuple(rollouts)))
    return batch_advantages(groups, cfg.grpo.eps_stability)


def train_step(params: PolicyParams, ref: PolicyParams, cfg: StageConfig, dataset: Sequence[Prompt],
               seed: int, stage_index: int, step: int) -> tuple[PolicyParams, TrainMetrics]:
    behavior = snapshot(params)
    batch = rollout_step(behavior, cfg, dataset, seed, stage_index, step)
    tau = tau_at(cfg.pad.tau, step)
    distilled = select_strategy(cfg.strategy, batch, cfg.pad, step,
                                derive_seed(seed, stage_index, step, PURPOSE_DISTILL))
    n_eff = len(filter_effective([r.advantage for r in batch], cfg.pad.t_low, cfg.pad.t_high))
    entropy = policy_entropy(behavior, [r.seq for r in batch])
    report, beta = None, 0.0
    new = params
    try:
        clip_fracs = []
        for _ in range(cfg.grpo.update_epochs):
            rep, grad, beta = compute_loss(new, ref, distilled, cfg.grpo, step)
            if not math.isfinite(rep.total_loss):
                raise Diverged(f"non-finite loss at step {step}")
            clip_fracs.append(rep.clip_fraction)
            report = report or rep
            new = apply_update(new, grad, cfg.grpo)
        report = dataclasses.replace(report, clip_fraction=float(np.mean(clip_fracs)))
    except SkipStep:
        report, new = None, params
    if report is None:
        beta = 0.0
    metrics = collect_metrics(cfg.name, step, batch, entropy, n_eff, len(distilled), report, tau, beta)
    return new, metrics


def run_stage(
    initial: PolicyParams,
    cfg: StageConfig,
    sink: Callable[[TrainMetrics], None] | None = None,
    *,
    seed: int | None = None,
    stage_index: int = 0,
    ref: PolicyParams | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[PolicyParams, list[TrainMetrics]]:
    """Run steps ``[start_step, stop_step)`` of a stage (default: all of them).

    ``ref`` is the KL reference; it defaults to ``initial`` (the policy the
    stage started from) and must be passed explicitly when resuming.
    """
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    _check_compatible(initial, cfg)
    seed = cfg.seed if seed is None else seed
    ref = snapshot(initial) if ref is None else ref
    stop = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    dataset = generate_dataset(cfg.env)
    params = initial
    history = []
    for step in range(start_step, stop):
        try:
            params, m = train_step(params, ref, cfg, dataset, seed, stage_index, step)
        except Diverged as exc:
            path = None
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"diverged_stage{stage_index}_step{step}.ckpt"
                make_checkpoint(params, ref, cfg, seed, stage_index, step).save(path)
            raise TrainingDiverged(f"stage {cfg.name} diverged at step {step}: {exc}", path) from exc
        history.append(m)
        if sink is not None:
            sink(m)
        if step % 100 == 0:
            log.debug("%s step %d acc=%.3f len=%.2f", cfg.name, step, m.reward_accuracy, m.mean_response_length)
    return params, history


def make_checkpoint(params: PolicyParams, ref: PolicyParams, cfg: StageConfig, seed: int,
                    stage_index: int, next_step: int) -> Checkpoint:
    return Checkpoint(cfg.name, stage_index, next_step, seed, cfg.config_hash(), params, ref, to_dict(cfg))


def resume_stage(ckpt: Checkpoint, cfg: StageConfig | None = None, sink=None,
                 stop_step: int | None = None) -> tuple[PolicyParams, list[TrainMetrics]]:
    cfg = cfg or stage_from_dict(ckpt.stage_config)
    if cfg.config_hash() != ckpt.config_hash:
        raise ValueError("checkpoint was written under a different stage config")
    return run_stage(ckpt.params, cfg, sink, seed=ckpt.seed, stage_index=ckpt.stage_index,
                     ref=ckpt.ref, start_step=ckpt.step, stop_step=stop_step)


# --- curriculum and ablation ----------------------------------------------


@dataclass
class StageOutcome:
    index: int
    name: str
    params: PolicyParams
    metrics: list[TrainMetrics]
    config_hash: str
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None


def stage_artifact_stem(index: int, name: str) -> str:
    return f"stage{index}_{name}"


def run_curriculum(stages: Sequence[StageConfig], seed: int, initial: PolicyParams,
                   out_dir: str | Path | None = None) -> list[StageOutcome]:
    """Run stages in order, threading parameters from one into the next."""
    if not stages:
        raise ValueError("at least one stage required")
    out = Path(out_dir) if out_dir is not None else None
    params = initial
    outcomes = []
    for i, cfg in enumerate(stages):
        params, metrics = run_stage(params, cfg, seed=seed, stage_index=i, checkpoint_dir=out)
        oc = StageOutcome(i, cfg.name, params, metrics, cfg.config_hash())
        if out is not None:
            stem = stage_artifact_stem(i, cfg.name)
            oc.metrics_path = out / f"{stem}_metrics.csv"
            write_metrics_csv(metrics, oc.metrics_path)
            oc.checkpoint_path = out / f"{stem}.ckpt"
            # the KL reference of a finished stage is irrelevant; store its final params twice
            make_checkpoint(params, params, cfg, seed, i, cfg.steps).save(oc.checkpoint_path)
        outcomes.append(oc)
    return outcomes


@dataclass(frozen=True)
class AblationSummary:
    strategy: str
    n_seeds: int
    terminal_accuracy_mean: float
    terminal_accuracy_std: float
    auc_mean: float
    auc_std: float


SUMMARY_COLUMNS = tuple(f.name for f in dataclasses.fields(AblationSummary))


@dataclass
class AblationResult:
    strategies: list[str]
    seeds: list[int]
    curves: dict[str, dict[int, list[TrainMetrics]]]
    summary: list[AblationSummary]


def terminal_accuracy(metrics: Sequence[TrainMetrics], frac: float = 0.1) -> float:
    """Mean reward accuracy over the final ``frac`` of steps (at least one step)."""
    k = max(1, math.ceil(frac * len(metrics)))
    return float(np.mean([m.reward_accuracy for m in metrics[-k:]]))


def accuracy_auc(metrics: Sequence[TrainMetrics]) -> float:
    """Area under the reward-accuracy curve, normalized by the number of steps."""
    return float(np.mean([m.reward_accuracy for m in metrics]))


def drift_stats(metrics: Sequence[TrainMetrics], frac: float = 0.1) -> dict:
    """Early-vs-late window statistics used by the length-drift comparison."""
    k = max(1, math.ceil(frac * len(metrics)))
    head, tail = metrics[:k], metrics[-k:]
    first = float(np.mean([m.mean_response_length for m in head]))
    last = float(np.mean([m.mean_response_length for m in tail]))
    return {
        "steps": len(metrics),
        "final_reward_accuracy": float(np.mean([m.reward_accuracy for m in tail])),
        "length_first_10pct": first,
        "length_last_10pct": last,
        "length_drift": last / first - 1.0,
        "final_entropy": float(np.mean([m.entropy for m in tail])),
        "final_clip_fraction": float(np.mean([m.clip_fraction for m in tail])),
    }


def _ablation_job(args):
    initial, cfg, seed = args
    return run_stage(initial, cfg, seed=seed)[1]


def run_ablation(base: StageConfig, strategies: Sequence[str], seeds: Sequence[int],
                 initial: PolicyParams, workers: int = 1) -> AblationResult:
    """Run every (strategy, seed) pair from the same initial parameters."""
    if len(strategies) < 2:
        raise ValueError("an ablation needs at least two strategies")
    if not seeds:
        raise ValueError("at least one seed required")
    jobs = [(s, seed) for s in strategies for seed in seeds]
    payload = [(initial, dataclasses.replace(base, strategy=s), seed) for s, seed in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, payload))
    else:
        results = [_ablation_job(p) for p in payload]
    curves: dict[str, dict[int, list[TrainMetrics]]] = {s: {} for s in strategies}
    for (s, seed), metrics in zip(jobs, results):
        curves[s][seed] = metrics
    summary = []
    for s in strategies:
        term = [terminal_accuracy(curves[s][seed]) for seed in seeds]
        auc = [accuracy_auc(curves[s][seed]) for seed in seeds]
        summary.append(AblationSummary(s, len(seeds), float(np.mean(term)), float(np.std(term)),
                                       float(np.mean(auc)), float(np.std(auc))))
    return AblationResult(list(strategies), list(seeds), curves, summary)
