"""Parameterized RF spectrum environments.

A *spec* is a population model over environments: integer ranges for the
number of interacting signal pairs and for each pair's dynamics (width,
period, duty cycle, placement, start time).  Sampling a spec with a seed
yields a concrete :class:`EnvironmentInstance` whose hidden per-band state
evolves deterministically.

Each signal pair occupies two bands, ``freq_lo`` and ``freq_lo + width - 1``.
Within every interaction cycle of ``period`` steps the lower band is active
for the first ``duty_cycle`` steps and the upper band for the remainder, so
exactly one of the two bands emits at every step once the pair has started.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

RANDOM_FREQ = "random"

SPEC_KEYS = (
    "number",
    "width",
    "period",
    "duty_cycle",
    "freq",
    "start",
    "n_bands",
    "n_classes",
    "change_prob",
)


class SpecValidationError(ValueError):
    """Raised when an environment spec fails validation."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid environment spec: " + "; ".join(self.violations))


@dataclass(frozen=True)
class IntRange:
    """Inclusive integer range [lo, hi]; a scalar is the degenerate range."""

    lo: int
    hi: int

    @classmethod
    def of(cls, value) -> "IntRange":
        if isinstance(value, IntRange):
            return value
        if isinstance(value, (tuple, list)):
            lo, hi = value
            return cls(int(lo), int(hi))
        return cls(int(value), int(value))

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def contains(self, value: int) -> bool:
        return self.lo <= value <= self.hi

    def values(self) -> range:
        return range(self.lo, self.hi + 1)

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))

    def __str__(self) -> str:
        if self.lo == self.hi:
            return str(self.lo)
        return f"[{self.lo}, {self.hi}]"


@dataclass(frozen=True)
class EnvSpec:
    """Ranged population model over signal-pair environments."""

    number: IntRange
    width: IntRange
    period: IntRange
    duty_cycle: IntRange
    freq: Union[IntRange, str]
    start: IntRange
    n_bands: int = 20
    n_classes: int = 1
    change_prob: float = 0.0
    # Optional per-class period ranges; classes otherwise differ by label only.
    class_periods: Optional[tuple] = None
    name: str = ""

    @classmethod
    def create(cls, number, width, period, duty_cycle, freq=RANDOM_FREQ, start=0,
               n_bands=20, n_classes=1, change_prob=0.0, class_periods=None,
               name="") -> "EnvSpec":
        """Build a spec from scalars, pairs or IntRanges; freq may be "random"."""
        if isinstance(freq, str):
            if freq.lower() != RANDOM_FREQ:
                raise ValueError(f"freq must be an integer range or {RANDOM_FREQ!r}")
            freq_val: Union[IntRange, str] = RANDOM_FREQ
        else:
            freq_val = IntRange.of(freq)
        if class_periods is not None:
            class_periods = tuple(IntRange.of(r) for r in class_periods)
        return cls(
            number=IntRange.of(number),
            width=IntRange.of(width),
            period=IntRange.of(period),
            duty_cycle=IntRange.of(duty_cycle),
            freq=freq_val,
            start=IntRange.of(start),
            n_bands=int(n_bands),
            n_classes=int(n_classes),
            change_prob=float(change_prob),
            class_periods=class_periods,
            name=name,
        )

    @property
    def freq_is_random(self) -> bool:
        return isinstance(self.freq, str)

    def period_range_for_class(self, class_id: int) -> IntRange:
        if self.class_periods is not None:
            return self.class_periods[class_id - 1]
        return self.period


def validate_spec(spec: EnvSpec) -> list:
    """Check every spec invariant; returns a list of violations (empty = ok)."""
    v = []
    for key in ("number", "width", "period", "duty_cycle", "start"):
        r = getattr(spec, key)
        if r.lo > r.hi:
            v.append(f"{key} range has lo > hi ({r.lo} > {r.hi})")
    if not spec.freq_is_random and spec.freq.lo > spec.freq.hi:
        v.append(f"freq range has lo > hi ({spec.freq.lo} > {spec.freq.hi})")
    if spec.n_bands < 2:
        v.append(f"n_bands must be >= 2, got {spec.n_bands}")
    if spec.n_classes < 1:
        v.append(f"n_classes must be >= 1, got {spec.n_classes}")
    if spec.number.lo < 0:
        v.append(f"number must be >= 0, got lo={spec.number.lo}")
    if spec.width.lo < 2:
        v.append(f"width must be >= 2 (a pair spans two bands), got lo={spec.width.lo}")
    if spec.width.hi > spec.n_bands:
        v.append(f"width.hi={spec.width.hi} exceeds n_bands={spec.n_bands}")
    if spec.duty_cycle.lo < 1:
        v.append(f"duty_cycle must be >= 1, got lo={spec.duty_cycle.lo}")
    period_ranges = [spec.period]
    if spec.class_periods is not None:
        if len(spec.class_periods) != spec.n_classes:
            v.append("class_periods must list one period range per class")
        period_ranges = list(spec.class_periods)
    for pr in period_ranges:
        if spec.duty_cycle.lo >= pr.lo:
            v.append("duty_cycle must be < period for all feasible draws "
                     f"(duty_cycle.lo={spec.duty_cycle.lo}, period.lo={pr.lo})")
            break
    if not spec.freq_is_random:
        if spec.freq.lo < 0:
            v.append(f"freq.lo must be >= 0, got {spec.freq.lo}")
        if spec.freq.hi + spec.width.hi - 1 >= spec.n_bands:
            v.append(f"freq draws can place a pair outside [0, {spec.n_bands}) "
                     f"(freq.hi={spec.freq.hi}, width.hi={spec.width.hi})")
    if spec.start.lo < 0:
        v.append(f"start must be >= 0, got lo={spec.start.lo}")
    if not (0.0 <= spec.change_prob <= 1.0):
        v.append(f"change_prob must be in [0, 1], got {spec.change_prob}")
    return v


# ---------------------------------------------------------------------------
# Concrete environments
# ---------------------------------------------------------------------------

class Observation(NamedTuple):
    """Result of sampling one band: detection flag plus emitting class (0 = none)."""

    detection: int
    class_id: int


@dataclass(frozen=True)
class SignalPair:
    """One sampled interacting pair occupying bands freq_lo and freq_lo+width-1."""

    freq_lo: int
    width: int
    period: int
    duty_cycle: int
    start: int
    class_id: int = 1

    @property
    def freq_hi(self) -> int:
        return self.freq_lo + self.width - 1

    def active_band(self, t: int) -> int:
        """Band emitting at step t, or -1 before the pair's start."""
        if t < self.start:
            return -1
        phase = (t - self.start) % self.period
        return self.freq_lo if phase < self.duty_cycle else self.freq_hi


@dataclass
class BandVector:
    """Per-band values: binary truth, class labels, probabilities, or class scores.

    modes:
      binary      - ints in {0, 1}
      labels      - int class ids in [0, n_classes], 0 meaning no signal
      prob        - activity probabilities in [0, 1]
      class_probs - (n_bands, n_classes + 1) rows summing to 1; column 0 = none
    """

    values: np.ndarray
    mode: str = "binary"

    def validate(self) -> None:
        v = self.values
        if self.mode == "binary":
            if not np.isin(v, (0, 1)).all():
                raise ValueError("binary BandVector must contain only 0/1")
        elif self.mode == "labels":
            if (v < 0).any():
                raise ValueError("labels BandVector must be non-negative")
        elif self.mode == "prob":
            if ((v < 0) | (v > 1)).any():
                raise ValueError("prob BandVector values must lie in [0, 1]")
        elif self.mode == "class_probs":
            if v.ndim != 2:
                raise ValueError("class_probs BandVector must be 2-D")
            if not np.allclose(v.sum(axis=1), 1.0, atol=1e-6):
                raise ValueError("class_probs rows must sum to 1")
        else:
            raise ValueError(f"unknown BandVector mode {self.mode!r}")

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    def active_mask(self, threshold: float = 0.5) -> np.ndarray:
        """Boolean activity per band; probabilities binarize at strict > threshold."""
        if self.mode in ("binary", "labels"):
            return self.values > 0
        if self.mode == "prob":
            return self.values > threshold
        return (1.0 - self.values[:, 0]) > threshold

    def activity_probs(self) -> np.ndarray:
        """Per-band activity probability regardless of mode."""
        if self.mode in ("binary", "labels"):
            return (self.values > 0).astype(np.float64)
        if self.mode == "prob":
            return np.asarray(self.values, dtype=np.float64)
        return 1.0 - np.asarray(self.values[:, 0], dtype=np.float64)


@dataclass
class EnvironmentInstance:
    """Concrete environment: sampled pairs plus a private random stream.

    Immutable after construction except for the rng stream; non-stationary
    re-draws return a new instance sharing the stream.
    """

    pairs: list
    n_bands: int
    n_classes: int
    change_prob: float
    spec: EnvSpec
    seed: int
    rng: np.random.Generator
    noise_prob: float = 0.0

    def state_at(self, t: int) -> BandVector:
        return state_at(self, t)

    def observe(self, t: int, band: int) -> Observation:
        return observe(self, t, band)

    def advance_nonstationary(self, t: int) -> "EnvironmentInstance":
        return advance_nonstationary(self, t)


def _sample_pair(spec: EnvSpec, rng: np.random.Generator) -> SignalPair:
    # Draw order is part of the determinism contract:
    # class, width, period, duty (clipped below the drawn period), freq, start.
    class_id = int(rng.integers(1, spec.n_classes + 1)) if spec.n_classes > 1 else 1
    width = spec.width.sample(rng)
    period = spec.period_range_for_class(class_id).sample(rng)
    duty_hi = min(spec.duty_cycle.hi, period - 1)
    duty = int(rng.integers(spec.duty_cycle.lo, duty_hi + 1))
    if spec.freq_is_random:
        freq_lo = int(rng.integers(0, spec.n_bands - width + 1))
    else:
        freq_lo = spec.freq.sample(rng)
    start = spec.start.sample(rng)
    return SignalPair(freq_lo=freq_lo, width=width, period=period,
                      duty_cycle=duty, start=start, class_id=class_id)


def sample_environment(spec: EnvSpec, seed: int) -> EnvironmentInstance:
    """Draw a concrete environment from the spec; deterministic given seed."""
    violations = validate_spec(spec)
    if violations:
        raise SpecValidationError(violations)
    rng = np.random.default_rng(seed)
    n_pairs = spec.number.sample(rng)
    pairs = [_sample_pair(spec, rng) for _ in range(n_pairs)]
    return EnvironmentInstance(
        pairs=pairs,
        n_bands=spec.n_bands,
        n_classes=spec.n_classes,
        change_prob=spec.change_prob,
        spec=spec,
        seed=seed,
        rng=rng,
    )


def state_at(env: EnvironmentInstance, t: int) -> BandVector:
    """Hidden truth at step t: 0/1 activity, or class labels when n_classes > 1.

    Overlapping pairs OR their activity; the lowest-index pair's class wins.
    """
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    values = np.zeros(env.n_bands, dtype=np.int64)
    for pair in reversed(env.pairs):
        band = pair.active_band(t)
        if band >= 0:
            values[band] = pair.class_id
    mode = "binary" if env.n_classes == 1 else "labels"
    return BandVector(values=values, mode=mode)


def observe(env: EnvironmentInstance, t: int, band: int) -> Observation:
    """Noiseless detection at (t, band); class of the lowest-index active pair."""
    if not 0 <= band < env.n_bands:
        raise ValueError(f"band {band} out of range [0, {env.n_bands})")
    detection, class_id = 0, 0
    for pair in env.pairs:
        if pair.active_band(t) == band:
            detection, class_id = 1, pair.class_id
            break
    if env.noise_prob > 0.0 and env.rng.random() < env.noise_prob:
        detection = 1 - detection
        class_id = 0
    return Observation(detection=detection, class_id=class_id)


def advance_nonstationary(env: EnvironmentInstance, t: int) -> EnvironmentInstance:
    """Per pair, with probability change_prob re-draw placement/period/duty.

    A changed pair keeps its width and class but resets start to t (phase
    restarts).  Call once per step before reading state when change_prob > 0.
    """
    if env.change_prob <= 0.0:
        return env
    spec = env.spec
    new_pairs = []
    for pair in env.pairs:
        if env.rng.random() < env.change_prob:
            period = spec.period_range_for_class(pair.class_id).sample(env.rng)
            duty_hi = min(spec.duty_cycle.hi, period - 1)
            duty = int(env.rng.integers(spec.duty_cycle.lo, duty_hi + 1))
            if spec.freq_is_random:
                freq_lo = int(env.rng.integers(0, env.n_bands - pair.width + 1))
            else:
                freq_lo = spec.freq.sample(env.rng)
            pair = SignalPair(freq_lo=freq_lo, width=pair.width, period=period,
                              duty_cycle=duty, start=t, class_id=pair.class_id)
        new_pairs.append(pair)
    return dataclasses.replace(env, pairs=new_pairs)


def truth_grid(env: EnvironmentInstance, T: int) -> np.ndarray:
    """(T, n_bands) int grid of class ids (0 = none).

    Applies non-stationary re-draws step by step when change_prob > 0, which
    consumes the instance's rng stream.
    """
    grid = np.zeros((T, env.n_bands), dtype=np.int64)
    for t in range(T):
        if env.change_prob > 0.0:
            env = advance_nonstationary(env, t)
        grid[t] = state_at(env, t).values
    return grid


# ---------------------------------------------------------------------------
# Spec files and truth-grid CSV
# ---------------------------------------------------------------------------

def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "freq" and raw.lower() == RANDOM_FREQ:
        return RANDOM_FREQ
    if raw.startswith("["):
        if not raw.endswith("]"):
            raise ValueError(f"unterminated range for {key}: {raw!r}")
        parts = [p.strip() for p in raw[1:-1].split(",")]
        if len(parts) != 2:
            raise ValueError(f"range for {key} must have two entries: {raw!r}")
        return IntRange(int(parts[0]), int(parts[1]))
    if key == "change_prob":
        return float(raw)
    return int(raw)


def parse_spec(text: str, name: str = "") -> EnvSpec:
    """Parse the key = value spec format ('#' starts a comment)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SPEC_KEYS:
            raise ValueError(f"line {lineno}: unknown spec key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    missing = [k for k in ("number", "width", "period", "duty_cycle", "freq", "start")
               if k not in values]
    if missing:
        raise ValueError("spec is missing required keys: " + ", ".join(missing))
    return EnvSpec.create(name=name, **values)


def load_spec(path) -> EnvSpec:
    path = Path(path)
    return parse_spec(path.read_text(), name=path.stem)


def format_spec(spec: EnvSpec) -> str:
    freq = spec.freq if spec.freq_is_random else str(spec.freq)
    lines = [
        f"number = {spec.number}",
        f"width = {spec.width}",
        f"period = {spec.period}",
        f"duty_cycle = {spec.duty_cycle}",
        f"freq = {freq}",
        f"start = {spec.start}",
        f"n_bands = {spec.n_bands}",
        f"n_classes = {spec.n_classes}",
        f"change_prob = {spec.change_prob:g}",
    ]
    return "\n".join(lines) + "\n"


def save_spec(spec: EnvSpec, path) -> None:
    Path(path).write_text(format_spec(spec))


def grid_to_csv(grid: np.ndarray, path) -> None:
    """Write a truth grid as CSV: header t,band_0..band_{n-1}, cell = class id."""
    grid = np.asarray(grid)
    n_bands = grid.shape[1]
    header = "t," + ",".join(f"band_{b}" for b in range(n_bands))
    lines = [header]
    for t in range(grid.shape[0]):
        lines.append(str(t) + "," + ",".join(str(int(c)) for c in grid[t]))
    Path(path).write_text("\n".join(lines) + "\n")


def grid_from_csv(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    rows = [[int(c) for c in line.split(",")[1:]] for line in lines[1:]]
    return np.asarray(rows, dtype=np.int64)
