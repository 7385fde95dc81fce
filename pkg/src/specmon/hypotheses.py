"""Hypothesis-elimination engine over candidate signal-pair parameter tuples.

The engine is given finite prior ranges for the pair parameters but not
their true values.  It enumerates every candidate tuple
(freq_lo, width, period, duty_cycle, start) and discards candidates that
contradict observations:

* detection = 0 at (t, band) disproves every candidate active there, both in
  the undiscovered pool and in every tracked pair (no pair can be emitting in
  a band observed silent).
* detection = 1 at (t, band) is attributed to a tracked pair only when that
  pair is the *unique* possible explanation; the tracked pair then keeps only
  candidates active at (t, band).  If no tracked pair can explain it and the
  undiscovered pool can, a new tracked pair is opened from the pool
  candidates active at (t, band).  Ambiguous detections (several possible
  sources) update dwell bookkeeping but eliminate nothing, which keeps
  elimination sound for environments drawn inside the prior: a true tuple is
  never active where silence was observed, and positives only prune a pair
  that must be their source.

An observation no candidate set can explain raises InconsistentPrior (the
out-of-distribution failure mode); callers fall back to persistent-state
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .env import BandVector, EnvSpec, SignalPair, validate_spec

DEFAULT_CANDIDATE_CAP = 10_000_000

# Candidate tuple columns.
F, W, P, D, S = range(5)


class InconsistentPrior(RuntimeError):
    """Observations cannot be produced by any environment inside the prior."""


class PriorTooLarge(ValueError):
    """Candidate enumeration would exceed the cap; use a coarser prior."""


def count_candidates(prior: EnvSpec) -> int:
    """Tuple count for one pair without materializing the enumeration."""
    placements = 0
    for w in prior.width.values():
        if prior.freq_is_random:
            placements += max(prior.n_bands - w + 1, 0)
        else:
            hi = min(prior.freq.hi, prior.n_bands - w)
            placements += max(hi - prior.freq.lo + 1, 0)
    pd_combos = 0
    for p in prior.period.values():
        d_hi = min(prior.duty_cycle.hi, p - 1)
        pd_combos += max(d_hi - prior.duty_cycle.lo + 1, 0)
    return placements * pd_combos * prior.start.size


def enumerate_candidates(prior: EnvSpec, cap: int = DEFAULT_CANDIDATE_CAP) -> np.ndarray:
    """(N, 5) int array of all candidate tuples, columns (f, w, p, d, s)."""
    violations = validate_spec(prior)
    if violations:
        raise ValueError("invalid prior: " + "; ".join(violations))
    n = count_candidates(prior)
    if n > cap:
        raise PriorTooLarge(
            f"prior enumerates {n} candidate tuples (cap {cap}); "
            "use a coarser prior or raise the cap")
    rows = []
    for w in prior.width.values():
        if prior.freq_is_random:
            freqs = range(0, prior.n_bands - w + 1)
        else:
            freqs = range(prior.freq.lo, min(prior.freq.hi, prior.n_bands - w) + 1)
        for f in freqs:
            for p in prior.period.values():
                for d in range(prior.duty_cycle.lo, min(prior.duty_cycle.hi, p - 1) + 1):
                    for s in prior.start.values():
                        rows.append((f, w, p, d, s))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 5)


def active_bands(cands: np.ndarray, t: int) -> np.ndarray:
    """Per candidate, the band it lights at step t (-1 before its start)."""
    if cands.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    started = t >= cands[:, S]
    phase = np.mod(t - cands[:, S], cands[:, P])
    band = np.where(phase < cands[:, D], cands[:, F], cands[:, F] + cands[:, W] - 1)
    return np.where(started, band, -1)


def active_at(cands: np.ndarray, t: int, band: int) -> np.ndarray:
    """Boolean mask of candidates active at (t, band)."""
    return active_bands(cands, t) == band


def candidate_matches_pair(cands: np.ndarray, pair: SignalPair) -> np.ndarray:
    row = np.array([pair.freq_lo, pair.width, pair.period, pair.duty_cycle,
                    pair.start], dtype=np.int64)
    return (cands == row).all(axis=1)


@dataclass
class TrackedPair:
    """Candidate set for one detected pair plus dwell bookkeeping."""

    cands: np.ndarray
    opened_at: int
    last_detect_band: int
    last_detect_time: int

    @property
    def size(self) -> int:
        return int(self.cands.shape[0])

    @property
    def resolved(self) -> bool:
        return self.size == 1


@dataclass
class HypothesisEngine:
    """Mutable hypothesis state: undiscovered pool + tracked pairs."""

    prior: EnvSpec
    pool: np.ndarray
    tracked: List[TrackedPair] = field(default_factory=list)
    inconsistent: bool = False

    @property
    def n_bands(self) -> int:
        return self.prior.n_bands

    @property
    def n_lo(self) -> int:
        return self.prior.number.lo

    @property
    def n_hi(self) -> int:
        return self.prior.number.hi

    @property
    def open_slots(self) -> int:
        return max(self.n_hi - len(self.tracked), 0)

    def total_count(self) -> int:
        """Count-based global uncertainty; weakly decreases with every update."""
        total = sum(tp.size - 1 for tp in self.tracked)
        total += self.open_slots * max(self.pool.shape[0] - 1, 0)
        return total

    # -- elimination ------------------------------------------------------

    def observe(self, t: int, band: int, detection: int) -> None:
        if self.inconsistent:
            return
        try:
            if detection:
                self._observe_positive(t, band)
            else:
                self._observe_negative(t, band)
        except InconsistentPrior:
            self.inconsistent = True
            raise

    def _observe_negative(self, t: int, band: int) -> None:
        self.pool = self.pool[~active_at(self.pool, t, band)]
        for tp in self.tracked:
            keep = ~active_at(tp.cands, t, band)
            if not keep.all():
                tp.cands = tp.cands[keep]
                if tp.size == 0:
                    raise InconsistentPrior(
                        f"tracked pair emptied by silence at (t={t}, band={band})")
        if self.pool.shape[0] == 0 and len(self.tracked) < self.n_lo:
            raise InconsistentPrior(
                f"prior requires >= {self.n_lo} pairs but no placement for "
                f"pair {len(self.tracked) + 1} remains consistent")

    def _observe_positive(self, t: int, band: int) -> None:
        explaining = [tp for tp in self.tracked if active_at(tp.cands, t, band).any()]
        pool_mask = active_at(self.pool, t, band)
        pool_explains = self.open_slots > 0 and bool(pool_mask.any())

        if not explaining and not pool_explains:
            raise InconsistentPrior(
                f"detection at (t={t}, band={band}) has no consistent explanation")
        if len(explaining) == 1 and not pool_explains:
            tp = explaining[0]
            tp.cands = tp.cands[active_at(tp.cands, t, band)]
            tp.last_detect_band, tp.last_detect_time = band, t
        elif not explaining:
            self.tracked.append(TrackedPair(
                cands=self.pool[pool_mask].copy(), opened_at=t,
                last_detect_band=band, last_detect_time=t))
        else:
            # Ambiguous source: keep soundness, only refresh dwell bookkeeping
            # on the nearest explaining pair.
            tp = min(explaining, key=lambda x: (abs(x.last_detect_band - band),
                                                x.opened_at))
            tp.last_detect_band, tp.last_detect_time = band, t

    # -- prediction --------------------------------------------------------

    def _band_fraction(self, cands: np.ndarray, t: int) -> np.ndarray:
        if cands.shape[0] == 0:
            return np.zeros(self.n_bands)
        bands = active_bands(cands, t)
        counts = np.bincount(bands[bands >= 0], minlength=self.n_bands)
        return counts / cands.shape[0]

    def predict(self, t: int) -> Tuple[BandVector, np.ndarray]:
        """Activity probabilities and per-band uncertainty for step t.

        Per source (each tracked pair, each potentially undiscovered pair)
        the band probability is the fraction of that source's surviving
        candidates active there and its uncertainty is 1 - |2 p - 1|, so a
        singleton set predicts exactly and contributes no uncertainty.
        Sources combine as a noisy-OR for probability (counting only pairs
        that must exist for the pool term) and additively for uncertainty.
        The undiscovered-pool term is scaled by how much a discovery would
        change the prediction (1 - tracked probability); a pool candidate
        co-located with an already tracked pair can never be disproven and
        must not keep attracting probes.
        """
        prob_off = np.ones(self.n_bands)
        unc = np.zeros(self.n_bands)
        for tp in self.tracked:
            frac = self._band_fraction(tp.cands, t)
            prob_off *= 1.0 - frac
            unc += 1.0 - np.abs(2.0 * frac - 1.0)
        p_tracked = 1.0 - prob_off
        pool_n = self.pool.shape[0]
        if pool_n > 0 and self.open_slots > 0:
            q = self._band_fraction(self.pool, t)
            must_exist = max(self.n_lo - len(self.tracked), 0)
            prob_off *= (1.0 - q) ** must_exist
            unc += (self.open_slots * (1.0 - np.abs(2.0 * q - 1.0))
                    * (1.0 - p_tracked))
        probs = 1.0 - prob_off
        return BandVector(values=probs, mode="prob"), unc

    # -- introspection ------------------------------------------------------

    def tracked_sizes(self) -> List[int]:
        return [tp.size for tp in self.tracked]

    def surviving_tuples(self) -> np.ndarray:
        """All tracked candidates stacked (for spec estimation and tests)."""
        if not self.tracked:
            return np.zeros((0, 5), dtype=np.int64)
        return np.concatenate([tp.cands for tp in self.tracked], axis=0)

    def fully_resolved(self) -> bool:
        """Every allowed pair found and pinned to a single tuple."""
        return (not self.inconsistent
                and len(self.tracked) == self.n_hi
                and all(tp.resolved for tp in self.tracked))


def hypothesis_init(prior: EnvSpec, cap: int = DEFAULT_CANDIDATE_CAP) -> HypothesisEngine:
    """Fresh engine over the full candidate enumeration of the prior."""
    return HypothesisEngine(prior=prior, pool=enumerate_candidates(prior, cap))


def hypothesis_eliminate(engine: HypothesisEngine, t: int, band: int,
                         detection: int) -> HypothesisEngine:
    engine.observe(t, band, detection)
    return engine


def hypothesis_predict(engine: HypothesisEngine, t: int) -> Tuple[BandVector, np.ndarray]:
    return engine.predict(t)
