import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from padgrpo.advantage import Rollout
from padgrpo.pad import (
    PadConfig,
    TemperatureSchedule,
    distill,
    filter_effective,
    sampling_probabilities,
    select_strategy,
    tau_at,
    weighted_sample_without_replacement,
)
from padgrpo.policy import TokenSequence
from padgrpo.rewards import RewardBreakdown


def batch_from(advs):
    return [Rollout(TokenSequence(f"p{i}", (1,)), (0.0,), RewardBreakdown(0, 0.0, 0.0), float(a))
            for i, a in enumerate(advs)]


def test_filter_example():
    assert set(filter_effective([0, 0.5, -2.0, 3.5], 0.1, 3.0)) == {1, 2}


def test_filter_all_zero():
    assert filter_effective([0.0] * 8, 0.05, 10.0) == {}


def test_filter_sentinel_upper():
    assert set(filter_effective([0, 0.5, -2.0, 3.5], 0.1, float("inf"))) == {1, 2, 3}


def test_filter_boundaries_inclusive_and_stores_abs():
    e = filter_effective([-0.1, 3.0, 0.0999], 0.1, 3.0)
    assert e == {0: 0.1, 1: 3.0}


def test_probabilities_example():
    p = sampling_probabilities({0: 2.0, 1: 1.0}, 1.0)
    assert p[0] == pytest.approx(0.7310586, abs=1e-6)
    assert p[1] == pytest.approx(0.2689414, abs=1e-6)


def test_probabilities_equal_scores_uniform():
    p = sampling_probabilities({i: 1.3 for i in range(5)}, 0.7)
    assert all(v == pytest.approx(0.2) for v in p.values())


def test_probabilities_cold_limit():
    p = sampling_probabilities({0: 1.0, 1: 1.5, 2: 0.5}, 1e-3)
    assert p[1] == pytest.approx(1.0)


def test_probabilities_overflow_safe():
    p = sampling_probabilities({0: 1e4, 1: 1e4 - 1}, 1e-3)
    assert all(np.isfinite(list(p.values())))
    assert sum(p.values()) == pytest.approx(1.0)


def test_probabilities_empty():
    with pytest.raises(ValueError, match="empty effective set"):
        sampling_probabilities({}, 1.0)


@given(st.dictionaries(st.integers(0, 50), st.floats(0.05, 10.0), min_size=1, max_size=20),
       st.floats(0.05, 3.0))
def test_probabilities_laws(scores, tau):
    p = sampling_probabilities(scores, tau)
    assert abs(sum(p.values()) - 1.0) < 1e-12
    assert all(v > 0 for v in p.values())
    for i in scores:
        for j in scores:
            if scores[i] > scores[j]:
                assert p[i] >= p[j]


def test_k_prime_example():
    b = batch_from([0, 0, 1.0, 0, -2.0, 0, 0.5, 0])
    d = distill(b, PadConfig(rho=0.5), 0, 1)
    assert d.k_prime == 3 and d.effective_set_size == 3
    assert set(d.selected_indices) == {2, 4, 6}


def test_uniform_batch_empty():
    d = distill(batch_from([0.0] * 8), PadConfig(), 0, 1)
    assert d.empty and len(d) == 0 and d.k_prime == 0


def test_full_rho_is_permutation():
    b = batch_from([1.0, -1.0, 0.5, -0.5, 2.0, -2.0])
    d = distill(b, PadConfig(rho=1.0), 3, 9)
    assert sorted(d.selected_indices) == list(range(6))


def test_distill_deterministic():
    b = batch_from(np.linspace(-2, 2, 16))
    assert distill(b, PadConfig(), 5, 42) == distill(b, PadConfig(), 5, 42)


@given(st.lists(st.sampled_from([0.0, 0.03, -0.3, 0.7, -1.2, 2.5, 11.0]), min_size=1, max_size=32),
       st.floats(0.01, 1.0), st.integers(0, 3000), st.integers(0, 2**31))
def test_distill_laws(advs, rho, step, seed):
    cfg = PadConfig(rho=rho)
    d = distill(batch_from(advs), cfg, step, seed)
    eff = filter_effective(advs, cfg.t_low, cfg.t_high)
    assert len(d) == d.k_prime == (min(math.ceil(rho * len(advs)), len(eff)) if eff else 0)
    assert len(set(d.selected_indices)) == len(d.selected_indices)
    assert all(cfg.t_low <= abs(r.advantage) <= cfg.t_high for r in d.selected)


def test_baseline_identity():
    b = batch_from([0, 1, 0, -1])
    d = select_strategy("grpo_baseline", b, PadConfig(), 0, 0)
    assert list(d.selected) == b and d.selected_indices == (0, 1, 2, 3)


def test_filter_strategy_example():
    d = select_strategy("grpo_filter", batch_from([0, 0.5]), PadConfig(t_low=0.1), 0, 0)
    assert d.selected_indices == (1,)


def test_random_sampling_deterministic_and_sized():
    b = batch_from([0.0] * 10)
    a = select_strategy("random_sampling", b, PadConfig(rho=0.3), 0, 5)
    assert a == select_strategy("random_sampling", b, PadConfig(rho=0.3), 0, 5)
    assert len(a) == 3 and len(set(a.selected_indices)) == 3


def test_unknown_strategy():
    with pytest.raises(ValueError, match="valid: pad, grpo_baseline"):
        select_strategy("ppo", batch_from([1, -1]), PadConfig(), 0, 0)


def test_signed_priority_prefers_positive():
    b = batch_from([-2.0, 2.0, 0.5])
    cfg = PadConfig(rho=0.34, priority="signed", tau=TemperatureSchedule(0.05, 0.05, 10))
    picks = [distill(b, cfg, 0, s).selected_indices[0] for s in range(50)]
    assert picks.count(1) == 50


def test_tau_schedule():
    s = TemperatureSchedule(1.0, 0.3, 2000)
    assert tau_at(s, 0) == 1.0
    assert tau_at(s, 2000) == 0.3
    assert tau_at(s, 5000) == 0.3
    assert tau_at(s, 1000) == pytest.approx(0.65, abs=1e-15)
    vals = [tau_at(s, t) for t in range(0, 2500, 7)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(0.3 <= v <= 1.0 for v in vals)


def test_config_problems():
    assert any("rho ∈ (0,1]" in p for p in PadConfig(rho=1.5).problems())
    assert PadConfig(t_low=0.0).problems()
    assert PadConfig(t_low=2.0, t_high=1.0).problems()
    assert PadConfig().problems() == []


def test_weighted_sampling_single_draw_frequencies():
    probs = [0.5, 0.3, 0.15, 0.05]
    rng = np.random.default_rng(0)
    n = 20_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[weighted_sample_without_replacement([0, 1, 2, 3], probs, 1, rng)[0]] += 1
    sigma = np.sqrt(n * np.array(probs) * (1 - np.array(probs)))
    assert np.all(np.abs(counts - n * np.array(probs)) <= 3 * sigma)
