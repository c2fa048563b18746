"""Independent reference implementations used by the test suite.

Nothing here calls into the package's numerics; each oracle recomputes its
quantity from raw logits with plain loops.
"""
import math

import numpy as np

from padgrpo.advantage import Rollout
from padgrpo.pad import DistilledBatch
from padgrpo.policy import TokenSequence, init_params
from padgrpo.rewards import RewardBreakdown


def random_params(rng, vocab=5, max_len=4, order=1, keys=2, scale=1.5):
    return init_params(vocab, max_len, order, keys, eos_id=vocab - 1, scale=scale,
                       seed=int(rng.integers(1 << 30)))


def random_seq(rng, params, key=None, min_len=0):
    n = int(rng.integers(min_len, params.max_len + 1))
    body = [int(t) for t in rng.integers(0, params.vocab_size - 1, size=n)]
    if n and rng.random() < 0.5:
        body[-1] = params.eos_id
    k = int(rng.integers(params.n_prompt_keys)) if key is None else key
    return TokenSequence("p", tuple(body), k)


def brute_rows(params, seq):
    """Logit row used for each token, found by walking the history by hand."""
    hist = [params.vocab_size] * params.context_order
    rows = []
    for tok in seq.tokens:
        h = 0
        for x in hist:
            h = h * (params.vocab_size + 1) + x
        rows.append(params.logits[seq.prompt_key * params.n_histories + h])
        if params.context_order:
            hist = hist[1:] + [tok]
    return rows


def brute_token_logprobs(params, seq):
    out = []
    for row, tok in zip(brute_rows(params, seq), seq.tokens):
        z = sum(math.exp(v) for v in row)
        out.append(row[tok] - math.log(z))
    return out


def brute_logprob(params, seq):
    return sum(brute_token_logprobs(params, seq))


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


def surrogate_oracle(params, rollouts, clip_eps, level="token"):
    """(loss, clip fraction) of the clipped surrogate, by direct loops."""
    objs, clipped = [], []

    def term(r, a):
        u = r * a
        c = min(max(r, 1 - clip_eps), 1 + clip_eps) * a
        clipped.append(c < u)
        objs.append(min(u, c))

    for ro in rollouts:
        lps = brute_token_logprobs(params, ro.seq)
        if level == "token":
            for lp, b in zip(lps, ro.behavior_logprob):
                term(math.exp(lp - b), ro.advantage)
        else:
            term(math.exp(sum(lps) - sum(ro.behavior_logprob)), ro.advantage)
    return -sum(objs) / len(objs), sum(clipped) / len(clipped)


def exact_token_kl(params, ref, seq):
    """Exact KL(params || ref) of the next-token distribution at each visited context."""
    out = []
    for row_p, row_q in zip(brute_rows(params, seq), brute_rows(ref, seq)):
        lp = row_p - np.log(np.exp(row_p).sum())
        lq = row_q - np.log(np.exp(row_q).sum())
        out.append(float(np.sum(np.exp(lp) * (lp - lq))))
    return out


def make_rollouts(seqs, behavior_logps, advantages):
    return [Rollout(s, tuple(b), RewardBreakdown(0, 0.0, 0.0), float(a))
            for s, b, a in zip(seqs, behavior_logps, advantages)]


def as_distilled(rollouts):
    n = len(rollouts)
    return DistilledBatch(tuple(rollouts), tuple(range(n)), n, n)
