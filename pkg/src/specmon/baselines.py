"""Hand-coded controllers: random, scan, scan-and-dwell, and the expert.

Random and Scan predict with a persistent-state scheme: each band's state is
whatever was last observed in it, initially inactive everywhere.  The two
spec-aware controllers run the hypothesis-elimination engine over a given
prior; when the prior cannot explain the observations (InconsistentPrior)
they fall back to persistent-state prediction and plain scanning for the
rest of the episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import BandVector, EnvSpec
from .harness import History
from .hypotheses import HypothesisEngine, InconsistentPrior, hypothesis_init


@dataclass
class PersistentState:
    """Last observed value per band; bands never sampled count as inactive."""

    last_obs: np.ndarray
    last_t: np.ndarray

    @classmethod
    def fresh(cls, n_bands: int) -> "PersistentState":
        return cls(last_obs=np.zeros(n_bands, dtype=np.int64),
                   last_t=np.full(n_bands, -1, dtype=np.int64))

    def update(self, t: int, band: int, detection: int) -> None:
        self.last_obs[band] = detection
        self.last_t[band] = t


def persistent_predict(state: PersistentState) -> BandVector:
    return BandVector(values=state.last_obs.copy(), mode="binary")


def baseline_select_band(kind: str, state, n_bands: int,
                         rng: Optional[np.random.Generator] = None) -> int:
    """Stateless-style selection: 'random' uniform draw, 'scan' round robin.

    For 'scan', state is the previously selected band (or None at episode
    start); the caller keeps the returned band as the next state.
    """
    if kind == "random":
        return int(rng.integers(n_bands))
    if kind == "scan":
        return 0 if state is None else (int(state) + 1) % n_bands
    raise ValueError(f"unknown baseline kind {kind!r}")


class RandomController:
    """Uniform random band choice, persistent-state prediction."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.state: Optional[PersistentState] = None

    def reset(self, n_bands: int, n_classes: int = 1) -> None:
        self.state = PersistentState.fresh(n_bands)
        self.n_bands = n_bands

    def select_band(self, history: History) -> int:
        return baseline_select_band("random", None, self.n_bands, self.rng)

    def predict(self, history: History) -> BandVector:
        action, obs = history.last
        self.state.update(len(history) - 1, action, obs.detection)
        return persistent_predict(self.state)


class ScanController:
    """Sequential band sweep, persistent-state prediction."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.prev: Optional[int] = None
        self.state: Optional[PersistentState] = None

    def reset(self, n_bands: int, n_classes: int = 1) -> None:
        self.state = PersistentState.fresh(n_bands)
        self.n_bands = n_bands
        self.prev = None

    def select_band(self, history: History) -> int:
        self.prev = baseline_select_band("scan", self.prev, self.n_bands)
        return self.prev

    def predict(self, history: History) -> BandVector:
        action, obs = history.last
        self.state.update(len(history) - 1, action, obs.detection)
        return persistent_predict(self.state)


class _HypothesisController:
    """Shared machinery for the spec-aware controllers."""

    def __init__(self, prior: EnvSpec, seed: int = 0):
        self.prior = prior
        self.seed = seed
        self.engine: Optional[HypothesisEngine] = None
        self.persistent: Optional[PersistentState] = None
        self.fallback = False
        self._ingested = 0
        self._scan_prev: Optional[int] = None

    def reset(self, n_bands: int, n_classes: int = 1) -> None:
        if n_bands != self.prior.n_bands:
            raise ValueError(
                f"prior is defined over {self.prior.n_bands} bands, env has {n_bands}")
        self.engine = hypothesis_init(self.prior)
        self.persistent = PersistentState.fresh(n_bands)
        self.fallback = False
        self._ingested = 0
        self._scan_prev = None
        self.n_bands = n_bands

    def _ingest(self, history: History) -> None:
        while self._ingested < len(history):
            t = self._ingested
            action, obs = history.steps[t]
            self.persistent.update(t, action, obs.detection)
            if not self.fallback:
                try:
                    self.engine.observe(t, action, obs.detection)
                except InconsistentPrior:
                    self.fallback = True
            self._ingested += 1

    def _scan(self) -> int:
        self._scan_prev = baseline_select_band("scan", self._scan_prev, self.n_bands)
        return self._scan_prev

    def predict(self, history: History) -> BandVector:
        self._ingest(history)
        if self.fallback:
            return persistent_predict(self.persistent)
        probs, _ = self.engine.predict(len(history) - 1)
        return probs


def scan_and_dwell_select(engine: HypothesisEngine, scan_state: Optional[int],
                          n_bands: int):
    """Dwell on the most recently detected band of any unresolved pair; else scan.

    Returns (band, new_scan_state).
    """
    unresolved = [tp for tp in engine.tracked if not tp.resolved]
    if unresolved:
        tp = max(unresolved, key=lambda x: x.last_detect_time)
        return tp.last_detect_band, scan_state
    nxt = baseline_select_band("scan", scan_state, n_bands)
    return nxt, nxt


def expert_select(engine: HypothesisEngine, t: int) -> int:
    """Band with the highest hypothesis uncertainty; ties to the lowest index."""
    _, unc = engine.predict(t)
    return int(np.argmax(unc))


class ScanAndDwellController(_HypothesisController):
    """Scans until a detection, then dwells on that band until resolved."""

    def select_band(self, history: History) -> int:
        self._ingest(history)
        if self.fallback:
            return self._scan()
        band, self._scan_prev = scan_and_dwell_select(
            self.engine, self._scan_prev, self.n_bands)
        return band


class ExpertController(_HypothesisController):
    """Always samples the band with the highest hypothesis uncertainty."""

    def select_band(self, history: History) -> int:
        self._ingest(history)
        if self.fallback:
            return self._scan()
        return expert_select(self.engine, len(history))
