"""Synthetic tasks with rule-based binary verifiers.

Token layout shared by all tasks: ids 0-9 are the digits, ``EOS_ID`` (10)
ends a response, and every id above that is a spare token that no verifier
accepts inside an answer.

digit_sum
    The prompt carries a target sum. A response is correct when every token
    before EOS is a digit and the digits add up to the target (a response
    truncated at max_len without EOS is judged on its digits). Difficulty
    moves the target across the upper half of the achievable range,
    ``ceil(max_sum / 2)`` to ``max_sum``, where the uniform-policy solve rate
    is non-increasing in the target.
parity_echo
    The prompt carries a bit pattern of length m. A correct response is
    exactly m digits whose parities spell the pattern, followed by EOS (or
    ending at max_len). Difficulty sets m; the uniform solve rate is
    (5/V)^m / V, decreasing in m.
padding_exploit
    The prompt carries an answer digit and a required count. The response is
    correct when the answer digit occurs at least that many times before EOS.
    The answer is hidden from the policy (all prompts share key 0), so the
    only lever a policy has is to say more. Difficulty raises the required
    count.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .policy import PolicyParams, TokenSequence, derive_seed, sample_batch

EOS_ID = 10
N_DIGITS = 10
TASK_KINDS = ("digit_sum", "parity_echo", "padding_exploit")
MAX_PARITY_LEN = 4
MAX_PAD_COUNT = 3


class EnvMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    task_kind: str
    spec: dict
    difficulty: float

    @property
    def key(self) -> int:
        """Conditioning index the policy is allowed to see."""
        return prompt_key(self)

    def to_record(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "task_kind": self.task_kind,
            "spec": self.spec,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Prompt:
        return cls(str(rec["prompt_id"]), rec["task_kind"], dict(rec["spec"]), float(rec["difficulty"]))


@dataclass(frozen=True)
class EnvConfig:
    task_kind: str = "digit_sum"
    vocab_size: int = 12
    max_len: int = 4
    difficulty_range: tuple[float, float] = (0.0, 1.0)
    dataset_size: int = 64
    rng_seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.task_kind not in TASK_KINDS:
            out.append(f"task_kind: unknown task {self.task_kind!r}; valid: {', '.join(TASK_KINDS)}")
        if self.dataset_size < 1:
            out.append("dataset_size: dataset_size >= 1")
        lo, hi = self.difficulty_range
        if not 0.0 <= lo <= hi <= 1.0:
            out.append("difficulty_range: 0 <= low <= high <= 1")
        if self.vocab_size <= EOS_ID:
            out.append(f"vocab_size: vocab_size > {EOS_ID} (digits and EOS)")
        if self.max_len < 1:
            out.append("max_len: max_len >= 1")
        return out

    def validate(self) -> None:
        probs = self.problems()
        if probs:
            raise ValueError("; ".join(probs))


# --- task definitions -----------------------------------------------------


def _decode_digits(seq: TokenSequence) -> list[int] | None:
    body = seq.tokens[:-1] if seq.tokens and seq.tokens[-1] == EOS_ID else seq.tokens
    if any(t >= N_DIGITS for t in body):
        return None
    return list(body)


def digit_sum_range(max_len: int) -> tuple[int, int]:
    max_sum = 9 * max_len
    return math.ceil(max_sum / 2), max_sum


def _digit_sum_spec(d: float, cfg: EnvConfig, rng) -> dict:
    lo, hi = digit_sum_range(cfg.max_len)
    return {"target": lo + int(round(d * (hi - lo)))}


def _digit_sum_verify(spec: dict, seq: TokenSequence) -> int:
    digits = _decode_digits(seq)
    return int(digits is not None and sum(digits) == spec["target"])


def _parity_len(d: float, cfg: EnvConfig) -> int:
    m_max = max(1, min(MAX_PARITY_LEN, cfg.max_len - 1))
    return 1 + int(round(d * (m_max - 1)))


def _parity_spec(d: float, cfg: EnvConfig, rng) -> dict:
    m = _parity_len(d, cfg)
    return {"bits": [int(b) for b in rng.integers(0, 2, size=m)]}


def _parity_verify(spec: dict, seq: TokenSequence) -> int:
    bits = spec["bits"]
    digits = _decode_digits(seq)
    if digits is None or len(digits) != len(bits):
        return 0
    return int(all(dg % 2 == b for dg, b in zip(digits, bits)))


def _pad_spec(d: float, cfg: EnvConfig, rng) -> dict:
    return {"answer": int(rng.integers(0, N_DIGITS)), "count": 1 + int(round(d * (MAX_PAD_COUNT - 1)))}


def _pad_verify(spec: dict, seq: TokenSequence) -> int:
    body = seq.tokens[:-1] if seq.tokens and seq.tokens[-1] == EOS_ID else seq.tokens
    return int(sum(1 for t in body if t == spec["answer"]) >= spec["count"])


def _digit_sum_key(spec: dict) -> int:
    return int(spec["target"])


def _parity_key(spec: dict) -> int:
    bits = spec["bits"]
    return (2 ** len(bits) - 2) + int("".join(map(str, bits)), 2)


_TASKS: dict[str, tuple[Callable, Callable, Callable]] = {
    "digit_sum": (_digit_sum_spec, _digit_sum_verify, _digit_sum_key),
    "parity_echo": (_parity_spec, _parity_verify, _parity_key),
    "padding_exploit": (_pad_spec, _pad_verify, lambda spec: 0),
}


def _task(kind: str):
    try:
        return _TASKS[kind]
    except KeyError:
        raise ValueError(f"unknown task_kind {kind!r}; valid: {', '.join(TASK_KINDS)}") from None


def n_prompt_keys(task_kind: str, max_len: int) -> int:
    """Size of the conditioning space a policy needs for this task."""
    _task(task_kind)
    if task_kind == "digit_sum":
        return 9 * max_len + 1
    if task_kind == "parity_echo":
        m_max = max(1, min(MAX_PARITY_LEN, max_len - 1))
        return 2 ** (m_max + 1) - 2
    return 1


def prompt_key(prompt: Prompt) -> int:
    return _task(prompt.task_kind)[2](prompt.spec)


def generate_dataset(cfg: EnvConfig) -> list[Prompt]:
    """Deterministic dataset; difficulties are stratified evenly over the range."""
    cfg.validate()
    make_spec = _task(cfg.task_kind)[0]
    rng = np.random.default_rng(cfg.rng_seed)
    lo, hi = cfg.difficulty_range
    n = cfg.dataset_size
    # one jittered point per stratum
    strata = (np.arange(n) + rng.random(n)) / n
    diffs = lo + (hi - lo) * strata
    rng.shuffle(diffs)
    prompts = []
    for i, d in enumerate(diffs):
        d = float(min(max(d, lo), hi))
        prompts.append(Prompt(f"{cfg.task_kind}-{cfg.rng_seed}-{i}", cfg.task_kind, make_spec(d, cfg, rng), d))
    return prompts


def verify(prompt: Prompt, seq: TokenSequence) -> int:
    """Binary correctness of ``seq`` as a response to ``prompt``."""
    if seq.prompt_id != prompt.prompt_id:
        raise EnvMismatch(f"sequence for {seq.prompt_id!r} checked against prompt {prompt.prompt_id!r}")
    return _task(prompt.task_kind)[1](prompt.spec, seq)


def uniform_digit_sum_solve_rate(target: int, vocab_size: int, max_len: int) -> float:
    """Exact probability that a uniform policy hits ``target``; used as a test oracle."""
    max_sum = 9 * max_len
    if target < 0 or target > max_sum:
        return 0.0
    done = np.zeros(max_sum + 1)
    cur = np.zeros(max_sum + 1)
    cur[0] = 1.0
    for _ in range(max_len):
        done += cur / vocab_size
        nxt = np.zeros_like(cur)
        for dg in range(N_DIGITS):
            nxt[dg:] += cur[: max_sum + 1 - dg] / vocab_size
        cur = nxt
    done += cur
    return float(done[target])


# --- probes ---------------------------------------------------------------


def stagnation_probe(
    cfg: EnvConfig,
    params: PolicyParams,
    G: int,
    n_groups: int,
    seed: int,
    gen_temperature: float = 1.0,
    top_p: float = 1.0,
    verifier: Callable[[Prompt, TokenSequence, int], int] | None = None,
) -> float:
    """Monte-Carlo fraction of G-rollout groups whose rewards are all equal.

    ``verifier`` overrides :func:`verify`; it also receives the rollout index
    within the group.
    """
    if G < 2:
        raise ValueError("G must be >= 2")
    dataset = generate_dataset(cfg)
    rng = np.random.default_rng(derive_seed(seed, 0))
    picks = rng.integers(0, len(dataset), size=n_groups)
    prompts = [dataset[i] for i in picks for _ in range(G)]
    seeds = [derive_seed(seed, 1, j) for j in range(len(prompts))]
    seqs, _ = sample_batch(params, [p.key for p in prompts], [p.prompt_id for p in prompts],
                           gen_temperature, top_p, seeds)
    uniform = 0
    for g in range(n_groups):
        rewards = set()
        for r in range(G):
            j = g * G + r
            rewards.add(verifier(prompts[j], seqs[j], r) if verifier else verify(prompts[j], seqs[j]))
        uniform += len(rewards) == 1
    return uniform / n_groups


def solve_rate(cfg: EnvConfig, params: PolicyParams, n_samples: int, seed: int,
               prompts: Sequence[Prompt] | None = None) -> float:
    """Monte-Carlo solve rate over the dataset (or the given prompts)."""
    dataset = list(prompts) if prompts is not None else generate_dataset(cfg)
    chosen = [dataset[i % len(dataset)] for i in range(n_samples)]
    seeds = [derive_seed(seed, j) for j in range(n_samples)]
    seqs, _ = sample_batch(params, [p.key for p in chosen], [p.prompt_id for p in chosen], 1.0, 1.0, seeds)
    return float(np.mean([verify(p, s) for p, s in zip(chosen, seqs)]))


# --- line-delimited export ------------------------------------------------


def save_dataset(prompts: Sequence[Prompt], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[Prompt]:
    prompts = []
    seen = set()
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            p = Prompt.from_record(json.loads(line))
            _task(p.task_kind)
            if p.prompt_id in seen:
                raise ValueError(f"duplicate prompt_id {p.prompt_id!r}")
            seen.add(p.prompt_id)
            prompts.append(p)
    return prompts
