"""Order-k autoregressive softmax policy over a small token vocabulary.

The policy is a single logits table. A row is selected by the *context*: the
prompt key the environment exposes to the policy plus the last
``context_order`` tokens of the response (left-padded with a BOS symbol).
Everything here is plain numpy; gradients are analytic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

GREEDY_TEMPERATURE = 1e-6


def derive_seed(*keys: int) -> int:
    """Map a tuple of non-negative integers to a 63-bit seed."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass(frozen=True)
class PolicyParams:
    vocab_size: int
    max_len: int
    context_order: int
    n_prompt_keys: int
    logits: np.ndarray
    eos_id: int = 10

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.context_order < 0:
            raise ValueError("context_order must be >= 0")
        if self.n_prompt_keys < 1:
            raise ValueError("n_prompt_keys must be >= 1")
        if not 0 <= self.eos_id < self.vocab_size:
            raise ValueError(f"eos_id {self.eos_id} outside vocabulary of size {self.vocab_size}")
        logits = np.array(self.logits, dtype=np.float64)
        expected = (self.n_contexts, self.vocab_size)
        if logits.shape != expected:
            raise ValueError(f"logits shape {logits.shape} != {expected}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @property
    def n_histories(self) -> int:
        return (self.vocab_size + 1) ** self.context_order

    @property
    def n_contexts(self) -> int:
        return self.n_prompt_keys * self.n_histories

    @property
    def bos_id(self) -> int:
        # only ever appears inside a history, never as an emitted token
        return self.vocab_size

    def with_logits(self, logits: np.ndarray) -> PolicyParams:
        return PolicyParams(
            self.vocab_size, self.max_len, self.context_order, self.n_prompt_keys, logits, self.eos_id
        )

    def with_max_len(self, max_len: int) -> PolicyParams:
        return PolicyParams(
            self.vocab_size, max_len, self.context_order, self.n_prompt_keys, self.logits, self.eos_id
        )

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (
            self.shape_key() == other.shape_key()
            and np.array_equal(self.logits, other.logits)
        )

    __hash__ = None

    def shape_key(self) -> tuple:
        return (self.vocab_size, self.max_len, self.context_order, self.n_prompt_keys, self.eos_id)


@dataclass(frozen=True)
class TokenSequence:
    """One sampled response. ``prompt_key`` is the conditioning the policy saw."""

    prompt_id: str
    tokens: tuple[int, ...]
    prompt_key: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    @property
    def length(self) -> int:
        return len(self.tokens)

    def validate(self, params: PolicyParams) -> None:
        if self.length > params.max_len:
            raise ValueError(f"sequence length {self.length} exceeds max_len {params.max_len}")
        if any(t < 0 or t >= params.vocab_size for t in self.tokens):
            raise ValueError("token id outside vocabulary")
        if params.eos_id in self.tokens[:-1]:
            raise ValueError("end-of-sequence token must be final")
        if not 0 <= self.prompt_key < params.n_prompt_keys:
            raise ValueError(f"prompt_key {self.prompt_key} outside [0, {params.n_prompt_keys})")


def init_params(
    vocab_size: int = 12,
    max_len: int = 8,
    context_order: int = 1,
    n_prompt_keys: int = 1,
    eos_id: int = 10,
    eos_logit: float = 0.0,
    scale: float = 0.0,
    seed: int = 0,
) -> PolicyParams:
    """Zero logits, optionally with Gaussian noise and an EOS offset."""
    n_ctx = n_prompt_keys * (vocab_size + 1) ** max(context_order, 0)
    base = PolicyParams(vocab_size, max_len, context_order, n_prompt_keys,
                        np.zeros((n_ctx, vocab_size)), eos_id)
    logits = np.zeros((n_ctx, vocab_size))
    if scale > 0:
        logits += scale * np.random.default_rng(seed).standard_normal(logits.shape)
    logits[:, eos_id] += eos_logit
    return base.with_logits(logits)


def snapshot(params: PolicyParams) -> PolicyParams:
    return params.with_logits(params.logits.copy())


# --- numerics -------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def sampling_distribution(z: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    """Row-wise temperature-scaled, nucleus-truncated next-token probabilities."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if temperature < GREEDY_TEMPERATURE:
        out = np.zeros_like(z)
        out[np.arange(z.shape[0]), np.argmax(z, axis=1)] = 1.0
        return out
    p = softmax(z / temperature)
    if top_p >= 1.0:
        return p
    # stable sort keeps the lower token id first among equal probabilities
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    mass_before = np.cumsum(sorted_p, axis=1) - sorted_p
    keep_sorted = mass_before < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    p = np.where(keep, p, 0.0)
    return p / p.sum(axis=1, keepdims=True)


# --- contexts -------------------------------------------------------------


def token_contexts(params: PolicyParams, seq: TokenSequence) -> np.ndarray:
    """Row index into ``params.logits`` used to emit each token of ``seq``."""
    base = params.vocab_size + 1
    n_hist = params.n_histories
    hist = _bos_history(params)
    ctx = np.empty(seq.length, dtype=np.int64)
    for t, tok in enumerate(seq.tokens):
        ctx[t] = seq.prompt_key * n_hist + hist
        if params.context_order:
            hist = (hist * base + tok) % n_hist
    return ctx


def _bos_history(params: PolicyParams) -> int:
    base = params.vocab_size + 1
    h = 0
    for _ in range(params.context_order):
        h = h * base + params.bos_id
    return h


def batch_contexts(params: PolicyParams, seqs: Iterable[TokenSequence]):
    """Flattened (contexts, tokens, owner) arrays for a list of sequences."""
    ctxs, toks, owner = [], [], []
    for i, s in enumerate(seqs):
        ctxs.append(token_contexts(params, s))
        toks.append(np.asarray(s.tokens, dtype=np.int64))
        owner.append(np.full(s.length, i, dtype=np.int64))
    if not ctxs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(ctxs), np.concatenate(toks), np.concatenate(owner)


# --- sampling -------------------------------------------------------------


def sample_batch(
    params: PolicyParams,
    prompt_keys: Sequence[int],
    prompt_ids: Sequence[str],
    gen_temperature: float,
    top_p: float,
    seeds: Sequence[int],
) -> tuple[list[TokenSequence], list[np.ndarray]]:
    """Sample one sequence per seed, in lockstep.

    Each rollout draws its uniforms from its own ``default_rng(seed)`` stream
    (one uniform per position), so the result for a rollout does not depend on
    what else is in the batch. Returns the sequences together with their
    per-token log-probabilities under the untruncated temperature-1 softmax.
    """
    if gen_temperature <= 0:
        raise ValueError("gen_temperature must be > 0")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    n = len(seeds)
    keys = np.asarray(prompt_keys, dtype=np.int64)
    if n and (keys.min() < 0 or keys.max() >= params.n_prompt_keys):
        raise ValueError("prompt key outside policy table")
    L, V = params.max_len, params.vocab_size
    base, n_hist = V + 1, params.n_histories
    u = np.stack([np.random.default_rng(s).random(L) for s in seeds]) if n else np.zeros((0, L))

    tokens = np.full((n, L), -1, dtype=np.int64)
    logps = np.zeros((n, L))
    hist = np.full(n, _bos_history(params), dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for t in range(L):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        z = params.logits[keys[rows] * n_hist + hist[rows]]
        probs = sampling_distribution(z, gen_temperature, top_p)
        cdf = np.cumsum(probs, axis=1)
        tok = (cdf < u[rows, t : t + 1] * cdf[:, -1:]).sum(axis=1)
        tok = np.minimum(tok, V - 1)
        # guard against landing on a zero-probability token through rounding
        bad = probs[np.arange(rows.size), tok] == 0
        if bad.any():
            tok[bad] = np.argmax(probs[bad], axis=1)
        tokens[rows, t] = tok
        logps[rows, t] = log_softmax(z)[np.arange(rows.size), tok]
        if params.context_order:
            hist[rows] = (hist[rows] * base + tok) % n_hist
        active[rows[tok == params.eos_id]] = False

    seqs, lps = [], []
    for i in range(n):
        row = tokens[i]
        length = int((row >= 0).sum())
        seqs.append(TokenSequence(prompt_ids[i], tuple(row[:length]), int(keys[i])))
        lps.append(logps[i, :length].copy())
    return seqs, lps


def sample_sequence(params: PolicyParams, prompt, gen_temperature: float = 1.0,
                    top_p: float = 1.0, rng_seed: int = 0) -> TokenSequence:
    """Sample a single response to ``prompt`` (anything with ``prompt_id`` and ``key``)."""
    seqs, _ = sample_batch(params, [prompt.key], [prompt.prompt_id], gen_temperature, top_p, [rng_seed])
    return seqs[0]


# --- log-probabilities, gradients, entropy -------------------------------


def token_logprobs(params: PolicyParams, ctx: np.ndarray, tok: np.ndarray) -> np.ndarray:
    return log_softmax(params.logits[ctx])[np.arange(len(ctx)), tok]


def sequence_logprob(params: PolicyParams, seq: TokenSequence) -> tuple[float, list[float]]:
    seq.validate(params)
    ctx = token_contexts(params, seq)
    per_token = token_logprobs(params, ctx, np.asarray(seq.tokens, dtype=np.int64))
    return float(per_token.sum()), per_token.tolist()


def accumulate_logprob_grad(params: PolicyParams, ctx: np.ndarray, tok: np.ndarray,
                            coeff: np.ndarray) -> np.ndarray:
    """Sum over tokens of ``coeff[t] * d log pi(tok_t | ctx_t) / d logits``."""
    grad = np.zeros_like(params.logits)
    if len(ctx) == 0:
        return grad
    coeff = np.asarray(coeff, dtype=np.float64)
    p = softmax(params.logits[ctx])
    np.add.at(grad, ctx, -coeff[:, None] * p)
    np.add.at(grad, (ctx, tok), coeff)
    return grad


def logprob_gradient(params: PolicyParams, seq: TokenSequence) -> np.ndarray:
    seq.validate(params)
    ctx = token_contexts(params, seq)
    tok = np.asarray(seq.tokens, dtype=np.int64)
    return accumulate_logprob_grad(params, ctx, tok, np.ones(len(ctx)))


def context_entropy(z: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of softmax(z) for each row."""
    logp = log_softmax(z)
    return -(np.exp(logp) * logp).sum(axis=-1)


def entropy_and_grad(params: PolicyParams, ctx: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean entropy over the given visited contexts, and its gradient w.r.t. logits."""
    grad = np.zeros_like(params.logits)
    if len(ctx) == 0:
        return 0.0, grad
    logp = log_softmax(params.logits[ctx])
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    # dH/dz_j = -p_j (log p_j + H)
    np.add.at(grad, ctx, -p * (logp + h[:, None]) / len(ctx))
    return float(h.mean()), grad


def policy_entropy(params: PolicyParams, batch: Sequence[TokenSequence]) -> float:
    if not batch:
        raise ValueError("empty batch")
    ctx, _, _ = batch_contexts(params, batch)
    if len(ctx) == 0:
        # every response empty: nothing visited
        return 0.0
    return float(context_entropy(params.logits[ctx]).mean())
