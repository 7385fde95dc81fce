import dataclasses

import numpy as np
import pytest

from specmon.env import EnvSpec, IntRange, sample_environment, truth_grid
from specmon.hypotheses import (HypothesisEngine, InconsistentPrior,
                                PriorTooLarge, TrackedPair, active_at,
                                candidate_matches_pair, count_candidates,
                                enumerate_candidates, hypothesis_eliminate,
                                hypothesis_init, hypothesis_predict)


def tuple_active(f, w, p, d, s, t, band):
    """Independent activity oracle for one candidate tuple."""
    if t < s:
        return False
    phase = (t - s) % p
    return band == (f if phase < d else f + w - 1)


def random_prior(rng, n_bands=None):
    n_bands = n_bands or int(rng.integers(8, 16))
    period_lo = int(rng.integers(4, 8))
    period_hi = period_lo + int(rng.integers(0, 3))
    duty_lo = int(rng.integers(1, period_lo))
    duty_hi = duty_lo + int(rng.integers(0, 3))
    n_hi = int(rng.integers(1, 3))
    return EnvSpec.create(
        number=[int(rng.integers(0, n_hi + 1)), n_hi],
        width=[2, int(rng.integers(2, 4))],
        period=[period_lo, period_hi],
        duty_cycle=[duty_lo, duty_hi],
        freq="random",
        start=[0, int(rng.integers(0, 4))],
        n_bands=n_bands,
    )


def drive(engine, env, T, policy_rng, dwell=True):
    """Feed observations chosen by a dwell-or-sweep probe policy."""
    last_band = 0
    for t in range(T):
        unresolved = [tp for tp in engine.tracked if not tp.resolved]
        if dwell and unresolved:
            band = max(unresolved, key=lambda x: x.last_detect_time).last_detect_band
        else:
            band = int(policy_rng.integers(env.n_bands))
        det = env.observe(t, band).detection
        engine.observe(t, band, det)
        last_band = band
    return last_band


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------

def test_spec_a_prior_enumerates_38_tuples(spec_a):
    cands = enumerate_candidates(spec_a)
    assert cands.shape == (38, 5)
    assert count_candidates(spec_a) == 38


def test_degenerate_prior_singleton():
    prior = EnvSpec.create(number=1, width=2, period=8, duty_cycle=4,
                           freq=[3, 3], start=0, n_bands=10)
    assert enumerate_candidates(prior).shape[0] == 1


def test_wider_prior_strictly_larger(spec_a, spec_b1):
    assert count_candidates(spec_b1) > count_candidates(spec_a)


def test_candidate_cap(spec_b1):
    with pytest.raises(PriorTooLarge) as err:
        enumerate_candidates(spec_b1, cap=10)
    assert "coarser prior" in str(err.value)


def test_activity_matches_oracle(spec_b1):
    cands = enumerate_candidates(spec_b1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = int(rng.integers(0, 30))
        band = int(rng.integers(0, spec_b1.n_bands))
        mask = active_at(cands, t, band)
        for i in range(0, cands.shape[0], 7):
            f, w, p, d, s = cands[i]
            assert mask[i] == tuple_active(f, w, p, d, s, t, band)


# ---------------------------------------------------------------------------
# Elimination
# ---------------------------------------------------------------------------

def test_first_detection_keeps_only_consistent_tuples(spec_a):
    engine = hypothesis_init(spec_a)
    all_cands = engine.pool.copy()
    expected = sum(1 for f, w, p, d, s in all_cands
                   if tuple_active(f, w, p, d, s, 0, 3))
    hypothesis_eliminate(engine, 0, 3, 1)
    assert len(engine.tracked) == 1
    assert engine.tracked[0].size == expected == 2


def test_negative_observation_prunes_pool(spec_a):
    engine = hypothesis_init(spec_a)
    before = engine.pool.shape[0]
    engine.observe(0, 3, 0)
    gone = before - engine.pool.shape[0]
    assert gone == 2            # the two period variants with freq_lo == 3
    assert not active_at(engine.pool, 0, 3).any()


def test_soundness_true_tuple_never_eliminated():
    rng = np.random.default_rng(42)
    for _ in range(120):
        prior = random_prior(rng)
        env = sample_environment(prior, int(rng.integers(10 ** 6)))
        engine = hypothesis_init(prior)
        drive(engine, env, T=50, policy_rng=rng)
        assert not engine.inconsistent
        for pair in env.pairs:
            assert candidate_matches_pair(engine.pool, pair).any(), \
                "true tuple dropped from the undiscovered pool"
        for tp in engine.tracked:
            assert tp.size > 0


def test_out_of_prior_environment_detected(spec_a, spec_b1):
    failures = 0
    rng = np.random.default_rng(7)
    for seed in range(40):
        env = sample_environment(spec_b1, seed)
        inside = (len(env.pairs) == 2 and all(
            p.width == 2 and p.duty_cycle == 4 for p in env.pairs))
        engine = hypothesis_init(spec_a)
        try:
            drive(engine, env, T=100, policy_rng=rng)
        except InconsistentPrior:
            failures += 1
            assert not inside, "in-prior environment flagged inconsistent"
    assert failures > 10


def test_unexplainable_detection_raises():
    prior = EnvSpec.create(number=[0, 0], width=2, period=8, duty_cycle=4,
                           freq="random", start=0, n_bands=10)
    engine = hypothesis_init(prior)
    with pytest.raises(InconsistentPrior):
        engine.observe(0, 3, 1)
    assert engine.inconsistent


def test_pool_exhaustion_with_required_pair_raises():
    prior = EnvSpec.create(number=[1, 1], width=2, period=[8, 8], duty_cycle=4,
                           freq="random", start=0, n_bands=6)
    engine = hypothesis_init(prior)
    with pytest.raises(InconsistentPrior):
        for t in range(200):
            engine.observe(t, t % 6, 0)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def test_two_tuple_disagreement_gives_half_probability_unit_uncertainty():
    prior = EnvSpec.create(number=[1, 1], width=2, period=[8, 9], duty_cycle=4,
                           freq="random", start=0, n_bands=10)
    engine = hypothesis_init(prior)
    cands = enumerate_candidates(prior)
    pair_cands = cands[cands[:, 0] == 3]          # (3, 2, 8|9, 4, 0)
    engine.tracked.append(TrackedPair(cands=pair_cands, opened_at=0,
                                      last_detect_band=3, last_detect_time=0))
    engine.pool = engine.pool[:0]
    probs, unc = hypothesis_predict(engine, 8)    # periods disagree at t=8
    assert probs.values[3] == pytest.approx(0.5)
    assert probs.values[4] == pytest.approx(0.5)
    assert unc[3] == pytest.approx(1.0)
    assert unc[4] == pytest.approx(1.0)


def test_singleton_engine_predicts_exactly():
    prior = EnvSpec.create(number=1, width=2, period=8, duty_cycle=4,
                           freq=[3, 3], start=0, n_bands=10)
    env = sample_environment(prior, 0)
    engine = hypothesis_init(prior)
    engine.observe(0, 3, 1)
    assert engine.fully_resolved()
    for t in range(40):
        probs, unc = engine.predict(t)
        assert np.array_equal(probs.values > 0.5,
                              env.state_at(t).values > 0)
        assert np.all(unc == 0.0)


def test_untracked_empty_bands_probability_zero(spec_a):
    engine = hypothesis_init(spec_a)
    for t in range(4):
        engine.observe(t, 0, 0)
    probs, unc = engine.predict(4)
    # band 0 can now only be lit by an undiscovered pair's upper band
    assert probs.values[19] <= probs.values[5]
    assert unc.max() > 0            # undiscovered prior mass keeps uncertainty


def test_fully_resolved_after_informative_observations():
    rng = np.random.default_rng(3)
    resolved = 0
    for seed in range(30):
        prior = EnvSpec.create(number=[1, 1], width=2, period=[8, 9],
                               duty_cycle=[3, 4], freq="random", start=0,
                               n_bands=10)
        env = sample_environment(prior, seed)
        engine = hypothesis_init(prior)
        drive(engine, env, T=60, policy_rng=rng)
        if engine.fully_resolved():
            resolved += 1
            true_pair = env.pairs[0]
            assert candidate_matches_pair(engine.tracked[0].cands, true_pair).all()
    assert resolved >= 20


# ---------------------------------------------------------------------------
# Monotonicity / progress properties
# ---------------------------------------------------------------------------

def test_total_count_weakly_decreases_every_step():
    rng = np.random.default_rng(11)
    for _ in range(40):
        prior = random_prior(rng)
        env = sample_environment(prior, int(rng.integers(10 ** 6)))
        engine = hypothesis_init(prior)
        prev = engine.total_count()
        for t in range(40):
            band = int(rng.integers(env.n_bands))
            engine.observe(t, band, env.observe(t, band).detection)
            cur = engine.total_count()
            assert cur <= prev
            prev = cur


def test_dwell_reduces_hypotheses_within_one_period():
    # Single-pair priors: every detection has a unique source, so dwelling on
    # a band where candidates disagree must prune within period.hi steps.
    rng = np.random.default_rng(21)
    checked = 0
    for seed in range(40):
        prior = EnvSpec.create(number=[1, 1], width=2,
                               period=[int(rng.integers(5, 8)), 9],
                               duty_cycle=[2, 4], freq="random", start=0,
                               n_bands=10)
        env = sample_environment(prior, seed)
        engine = hypothesis_init(prior)
        band = env.pairs[0].freq_lo
        t0 = 0
        while not engine.fully_resolved() and t0 < 60:
            _, unc = engine.predict(t0)
            ambiguous = unc[band] > 0
            count_before = engine.total_count()
            window_progress = False
            for t in range(t0, t0 + prior.period.hi):
                engine.observe(t, band, env.observe(t, band).detection)
                if engine.total_count() < count_before:
                    window_progress = True
            if ambiguous:
                assert window_progress
                checked += 1
            t0 += prior.period.hi
    assert checked >= 10
