"""Experience-feedback loops for retraining from budget-limited field time.

Field deployments yield only (action, observation) pairs -- no ground truth
ever leaves the field (FieldExperience physically contains no state rows).
Two routes turn that experience into training material:

* spec estimation: run hypothesis elimination over each field episode and
  pool the surviving parameter tuples into estimated ranges; retrain on a
  weighted pool of estimated spec (0.7) and original lab spec (0.3), or
  bootstrap the loop across several field deployments.
* state estimation: a bidirectional recurrent reconstructor (conv in
  frequency, recurrent both ways in time, trained only on lab episodes where
  truth is known) fills in full binary state grids from the partial
  observations; grids are stored in a database and replayed as scripted
  environments for retraining, optionally extended by a free-running
  recurrent generator.

The alternative of fine-tuning directly on partial field episodes restricts
the prediction loss and reward to the single sampled band per step.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .env import (BandVector, EnvSpec, IntRange, Observation, grid_from_csv,
                  grid_to_csv, sample_environment)
from .harness import encode_step, run_episode
from .hypotheses import InconsistentPrior, hypothesis_init
from .nn import Adam, conv1d_apply, conv1d_backward, convlstm_backward, convlstm_step, sigmoid
from . import dan as dan_mod
from .dan import (AlternatingSource, DanAgent, DanController, PoolSource,
                  ReplayEpisode, SpecSource, TrainConfig, TrainingCurve,
                  dqn_update, train)


class InsufficientFieldEvidence(RuntimeError):
    """No usable detections in the collected field experience."""


# ---------------------------------------------------------------------------
# Field experience
# ---------------------------------------------------------------------------

@dataclass
class FieldEpisode:
    """Partially observed episode: the sampled bands and what they showed."""

    actions: np.ndarray      # (T,)
    detections: np.ndarray   # (T,)
    obs_classes: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return len(self.actions)


@dataclass
class FieldExperience:
    """Budget-limited field samples; deliberately holds no full-state rows."""

    episodes: List[FieldEpisode]
    n_bands: int
    n_classes: int
    T: int
    budget_episodes: int
    field_spec_id: str = ""
    controller_id: str = ""

    def __post_init__(self):
        if len(self.episodes) > self.budget_episodes:
            raise ValueError(
                f"{len(self.episodes)} episodes exceed budget {self.budget_episodes}")


def collect_field_experience(controller_factory: Callable[[int], object],
                             field_spec: EnvSpec, budget_episodes: int, T: int,
                             seed: int = 0) -> FieldExperience:
    """Deploy a controller on fresh field environments, keep only (a, z)."""
    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(budget_episodes):
        env = sample_environment(field_spec, int(rng.integers(2 ** 31)))
        controller = controller_factory(int(rng.integers(2 ** 31)))
        log = run_episode(controller, env, T)
        episodes.append(FieldEpisode(actions=log.actions.copy(),
                                     detections=log.detections.copy(),
                                     obs_classes=log.obs_classes.copy()))
    return FieldExperience(episodes=episodes, n_bands=field_spec.n_bands,
                           n_classes=field_spec.n_classes, T=T,
                           budget_episodes=budget_episodes,
                           field_spec_id=field_spec.name)


# ---------------------------------------------------------------------------
# Spec estimation
# ---------------------------------------------------------------------------

def widen_spec(spec: EnvSpec, margin: int = 1) -> EnvSpec:
    """Estimation prior: lab ranges widened so nearby field dynamics fit."""
    def grow(r: IntRange, lo_min: int, hi_max: int) -> IntRange:
        return IntRange(max(r.lo - margin, lo_min), min(r.hi + margin, hi_max))

    period = grow(spec.period, 2, 10 ** 6)
    duty = IntRange(max(spec.duty_cycle.lo - margin, 1),
                    min(spec.duty_cycle.hi + margin, period.hi - 1))
    start = IntRange(0, spec.start.hi + margin)
    return dataclasses.replace(
        spec,
        number=IntRange(0, spec.number.hi + margin),
        width=grow(spec.width, 2, spec.n_bands),
        period=period,
        duty_cycle=duty,
        start=start,
        name=f"{spec.name}_widened" if spec.name else "widened_prior",
    )


def estimate_field_spec(exp: FieldExperience, prior: EnvSpec) -> EnvSpec:
    """Pool per-episode hypothesis survivors into estimated parameter ranges.

    Placement is left random: pair positions vary per episode, so the
    population-level frequency parameter carries no information here.
    """
    survivors = []
    pair_counts = []
    any_detection = False
    for ep in exp.episodes:
        any_detection = any_detection or bool((ep.detections > 0).any())
        engine = hypothesis_init(prior)
        ok = True
        for t in range(ep.T):
            try:
                engine.observe(t, int(ep.actions[t]), int(ep.detections[t]))
            except InconsistentPrior:
                ok = False
                break
        if not ok or not engine.tracked:
            continue
        survivors.append(engine.surviving_tuples())
        pair_counts.append(len(engine.tracked))
    if not survivors:
        if not any_detection:
            raise InsufficientFieldEvidence(
                "insufficient field evidence: no detections in any episode")
        raise InsufficientFieldEvidence(
            "insufficient field evidence: no episode was consistent with the prior")
    stacked = np.concatenate(survivors, axis=0)
    est = dataclasses.replace(
        prior,
        number=IntRange(min(pair_counts), max(pair_counts)),
        width=IntRange(int(stacked[:, 1].min()), int(stacked[:, 1].max())),
        period=IntRange(int(stacked[:, 2].min()), int(stacked[:, 2].max())),
        duty_cycle=IntRange(int(stacked[:, 3].min()), int(stacked[:, 3].max())),
        start=IntRange(int(stacked[:, 4].min()), int(stacked[:, 4].max())),
        name=f"estimated_{exp.field_spec_id or 'field'}",
    )
    return est


# ---------------------------------------------------------------------------
# Spec pool and pooled retraining
# ---------------------------------------------------------------------------

@dataclass
class SpecPool:
    """Weighted specs sampled during retraining; weights sum to 1."""

    specs: List[EnvSpec]
    weights: List[float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.specs) != len(w):
            raise ValueError("one weight per spec required")
        if (w < 0).any():
            raise ValueError("pool weights must be non-negative")
        if not np.isclose(w.sum(), 1.0, atol=1e-9):
            raise ValueError(f"pool weights must sum to 1, got {w.sum()}")

    @classmethod
    def normalized(cls, specs: Sequence[EnvSpec], raw_weights: Sequence[float]) -> "SpecPool":
        w = np.asarray(raw_weights, dtype=np.float64)
        return cls(specs=list(specs), weights=list(w / w.sum()))

    def source(self) -> PoolSource:
        return PoolSource(self.specs, self.weights)


def retrain_pooled(agent: DanAgent, pool: SpecPool,
                   config: Optional[TrainConfig] = None,
                   eval_source=None) -> TrainingCurve:
    """Continue training, drawing each episode's spec by pool weight."""
    return train(agent, pool.source(), config, eval_source=eval_source)


def feedback_pool(estimates: Sequence[EnvSpec], lab_spec: EnvSpec,
                  estimated_weight: float = 0.7) -> SpecPool:
    """Estimated specs share estimated_weight equally; the lab spec keeps the rest."""
    if not estimates:
        raise ValueError("need at least one estimated spec")
    per_est = estimated_weight / len(estimates)
    specs = list(estimates) + [lab_spec]
    weights = [per_est] * len(estimates) + [1.0 - estimated_weight]
    return SpecPool(specs=specs, weights=weights)


@dataclass
class BootstrapIteration:
    iteration: int
    field_spec_id: str
    estimated: Optional[EnvSpec]
    eval_scores: dict          # spec name -> mean cumulative IoU


def bootstrap(agent: DanAgent, lab_spec: EnvSpec, field_specs: Sequence[EnvSpec],
              budget_episodes: int, config: TrainConfig,
              estimation_prior: Optional[EnvSpec] = None,
              pool_mode: str = "all", eval_episodes: int = 20,
              seed: int = 0) -> Tuple[DanAgent, List[BootstrapIteration]]:
    """Iterate deploy -> estimate -> pooled retrain across field specs.

    pool_mode "all" retrains on every estimate gathered so far (plus lab);
    "current" keeps only the newest estimate (the forgetting-prone ablation).
    After each iteration the agent is evaluated against the lab spec and all
    field specs.
    """
    if pool_mode not in ("all", "current"):
        raise ValueError(f"unknown pool mode {pool_mode!r}")
    prior = estimation_prior or widen_spec(lab_spec)
    estimates: List[EnvSpec] = []
    rows: List[BootstrapIteration] = []
    eval_specs = [lab_spec] + list(field_specs)
    for i, field_spec in enumerate(field_specs, start=1):
        exp = collect_field_experience(
            lambda s: DanController(agent, seed=s), field_spec,
            budget_episodes, config.T, seed=seed + 1000 * i)
        est = None
        try:
            est = estimate_field_spec(exp, prior)
            estimates.append(est)
        except InsufficientFieldEvidence as exc:
            warnings.warn(f"bootstrap iteration {i}: {exc}; skipping retrain")
        if est is not None:
            pool_estimates = estimates if pool_mode == "all" else [estimates[-1]]
            pool = feedback_pool(pool_estimates, lab_spec)
            retrain_pooled(agent, pool, config)
        scores = {
            spec.name or f"spec_{j}": dan_mod.evaluate_agent(
                agent, SpecSource(spec), eval_episodes, config.T)
            for j, spec in enumerate(eval_specs)
        }
        rows.append(BootstrapIteration(iteration=i, field_spec_id=field_spec.name,
                                       estimated=est, eval_scores=scores))
    return agent, rows


# ---------------------------------------------------------------------------
# Scripted environments and the state database
# ---------------------------------------------------------------------------

@dataclass
class ScriptedEnvironment:
    """Replays a stored truth grid through the standard environment surface."""

    grid: np.ndarray             # (T, n_bands) class labels (0 = none)
    n_classes: int = 1
    seed: int = 0
    change_prob: float = 0.0
    spec_id: str = "scripted"

    @property
    def n_bands(self) -> int:
        return self.grid.shape[1]

    def state_at(self, t: int) -> BandVector:
        if not 0 <= t < self.grid.shape[0]:
            raise ValueError(f"scripted grid has {self.grid.shape[0]} steps, got t={t}")
        mode = "binary" if self.n_classes == 1 else "labels"
        return BandVector(values=self.grid[t].copy(), mode=mode)

    def observe(self, t: int, band: int) -> Observation:
        if not 0 <= band < self.n_bands:
            raise ValueError(f"band {band} out of range [0, {self.n_bands})")
        value = int(self.grid[t, band])
        return Observation(detection=int(value > 0), class_id=value)

    def advance_nonstationary(self, t: int) -> "ScriptedEnvironment":
        return self


@dataclass
class StateDatabase:
    """Reconstructed/generated/lab full-state grids with provenance tags."""

    grids: List[np.ndarray] = field(default_factory=list)
    provenance: List[str] = field(default_factory=list)

    VALID_TAGS = ("reconstructed", "generated", "lab-simulated")

    def add(self, grid: np.ndarray, tag: str) -> None:
        grid = np.asarray(grid, dtype=np.int64)
        if tag not in self.VALID_TAGS:
            raise ValueError(f"unknown provenance tag {tag!r}")
        if not np.isin(grid, (0, 1)).all():
            raise ValueError("state grids must be binary")
        if self.grids and grid.shape != self.grids[0].shape:
            raise ValueError(
                f"grid shape {grid.shape} differs from database shape "
                f"{self.grids[0].shape}")
        self.grids.append(grid)
        self.provenance.append(tag)

    def __len__(self) -> int:
        return len(self.grids)

    def select(self, tag: Optional[str] = None) -> List[np.ndarray]:
        if tag is None:
            return list(self.grids)
        return [g for g, p in zip(self.grids, self.provenance) if p == tag]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = ["file,provenance"]
        for i, (grid, tag) in enumerate(zip(self.grids, self.provenance)):
            fname = f"episode_{i:04d}.csv"
            grid_to_csv(grid, directory / fname)
            rows.append(f"{fname},{tag}")
        (directory / "manifest.csv").write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, directory) -> "StateDatabase":
        directory = Path(directory)
        db = cls()
        lines = (directory / "manifest.csv").read_text().strip().splitlines()
        for line in lines[1:]:
            fname, tag = line.split(",")
            db.add(grid_from_csv(directory / fname), tag)
        return db


class ScriptedSource:
    """Training source cycling through stored grids."""

    def __init__(self, grids: Sequence[np.ndarray], n_classes: int = 1,
                 index_fn: Optional[Callable[[int], int]] = None):
        if not grids:
            raise ValueError("no grids to replay")
        self.grids = list(grids)
        self.n_classes = n_classes
        self.index_fn = index_fn or (lambda episode: episode % len(self.grids))

    def sample(self, episode: int, rng: np.random.Generator):
        idx = self.index_fn(episode) % len(self.grids)
        return ScriptedEnvironment(grid=self.grids[idx], n_classes=self.n_classes,
                                   seed=idx)


# ---------------------------------------------------------------------------
# State reconstruction (bidirectional recurrent, conv in frequency)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconstructorConfig:
    n_bands: int = 20
    feat_channels: int = 8
    hidden: int = 12
    feat_kernel: int = 5
    cell_kernel: int = 3
    lr: float = 2e-3
    epochs: int = 4
    batch: int = 8
    w_neg: float = 0.4
    seed: int = 0


class Reconstructor:
    """Fills full binary state grids from partially observed episodes.

    Input per step and band: (sampled?, observed value).  Conv features over
    frequency feed one recurrent pass forward in time and one backward; the
    concatenated hidden states decode to per-cell signal probabilities.
    """

    def __init__(self, config: ReconstructorConfig):
        self.config = config
        self.trained = False
        rng = np.random.default_rng(config.seed)
        cf, hid = config.feat_channels, config.hidden
        fk, ck = config.feat_kernel, config.cell_kernel

        def init(shape, fan_in):
            limit = float(np.sqrt(1.0 / fan_in))
            return rng.uniform(-limit, limit, size=shape).astype(np.float32)

        self.params = {
            "feat.w": init((fk, 2, cf), fk * 2),
            "feat.b": np.zeros(cf, dtype=np.float32),
            "fwd.w": init((ck, cf + hid, 4 * hid), ck * (cf + hid)),
            "fwd.b": np.zeros(4 * hid, dtype=np.float32),
            "bwd.w": init((ck, cf + hid, 4 * hid), ck * (cf + hid)),
            "bwd.b": np.zeros(4 * hid, dtype=np.float32),
            "out.w": init((1, 2 * hid, 1), 2 * hid),
            "out.b": np.zeros(1, dtype=np.float32),
        }
        for name in ("fwd.b", "bwd.b"):
            self.params[name][hid:2 * hid] = 1.0
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _forward(self, x: np.ndarray):
        """x: (B, T, nb, 2) -> per-cell probabilities (B, T, nb) plus caches."""
        p = self.params
        B, T, nb, _ = x.shape
        hid = self.config.hidden
        feat_pre, feat_cache = conv1d_apply(x.reshape(B * T, nb, 2),
                                            p["feat.w"], p["feat.b"])
        feat = np.maximum(feat_pre, 0.0).reshape(B, T, nb, -1)
        h = np.zeros((B, nb, hid), dtype=np.float32)
        c = np.zeros_like(h)
        fwd_h = np.zeros((B, T, nb, hid), dtype=np.float32)
        fwd_caches = []
        for t in range(T):
            (h, c), cache = convlstm_step(feat[:, t], (h, c), p["fwd.w"], p["fwd.b"])
            fwd_h[:, t] = h
            fwd_caches.append(cache)
        h = np.zeros((B, nb, hid), dtype=np.float32)
        c = np.zeros_like(h)
        bwd_h = np.zeros((B, T, nb, hid), dtype=np.float32)
        bwd_caches = []
        for t in reversed(range(T)):
            (h, c), cache = convlstm_step(feat[:, t], (h, c), p["bwd.w"], p["bwd.b"])
            bwd_h[:, t] = h
            bwd_caches.append(cache)        # stored in reverse-time order
        both = np.concatenate([fwd_h, bwd_h], axis=-1)
        logits, out_cache = conv1d_apply(both.reshape(B * T, nb, 2 * hid),
                                         p["out.w"], p["out.b"])
        probs = sigmoid(logits[..., 0]).reshape(B, T, nb)
        caches = (feat_cache, feat_pre, fwd_caches, bwd_caches, out_cache,
                  (B, T, nb, hid))
        return probs, caches

    def _backward(self, dlogits: np.ndarray, caches) -> None:
        feat_cache, feat_pre, fwd_caches, bwd_caches, out_cache, shape = caches
        B, T, nb, hid = shape
        dboth, dw, db = conv1d_backward(dlogits.reshape(B * T, nb, 1), out_cache)
        self.grads["out.w"] += dw
        self.grads["out.b"] += db
        dboth = dboth.reshape(B, T, nb, 2 * hid)
        dfeat = np.zeros((B, T, nb, self.config.feat_channels), dtype=np.float32)

        dh = np.zeros((B, nb, hid), dtype=np.float32)
        dc = np.zeros_like(dh)
        for t in reversed(range(T)):
            dx, (dh, dc), dw, db = convlstm_backward(
                dh + dboth[:, t, :, :hid], dc, fwd_caches[t])
            self.grads["fwd.w"] += dw
            self.grads["fwd.b"] += db
            dfeat[:, t] += dx
        dh = np.zeros((B, nb, hid), dtype=np.float32)
        dc = np.zeros_like(dh)
        # bwd_caches[i] holds the step executed at time T-1-i; unrolling the
        # reverse-time recurrence backward therefore walks i from the end.
        for i in range(T - 1, -1, -1):
            t = T - 1 - i
            dx, (dh, dc), dw, db = convlstm_backward(
                dh + dboth[:, t, :, hid:], dc, bwd_caches[i])
            self.grads["bwd.w"] += dw
            self.grads["bwd.b"] += db
            dfeat[:, t] += dx
        dfeat_flat = dfeat.reshape(-1, nb, self.config.feat_channels)
        dfeat_flat = dfeat_flat * (feat_pre > 0)
        _, dw, db = conv1d_backward(dfeat_flat, feat_cache)
        self.grads["feat.w"] += dw
        self.grads["feat.b"] += db

    def fit(self, inputs: np.ndarray, targets: np.ndarray,
            rng: Optional[np.random.Generator] = None) -> List[float]:
        """Train on (partial, full) pairs: inputs (N,T,nb,2), targets (N,T,nb)."""
        cfg = self.config
        rng = rng or np.random.default_rng(cfg.seed)
        opt = Adam(lr=cfg.lr)
        n = inputs.shape[0]
        losses = []
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, cfg.batch):
                idx = order[lo: lo + cfg.batch]
                x = inputs[idx].astype(np.float32)
                y = targets[idx].astype(np.float32)
                probs, caches = self._forward(x)
                w = np.where(y > 0, 1.0, cfg.w_neg).astype(np.float32)
                eps = 1e-7
                pc = np.clip(probs, eps, 1.0 - eps)
                loss = float(-(w * (y * np.log(pc)
                                    + (1 - y) * np.log(1 - pc))).mean())
                losses.append(loss)
                dlogits = (w * (probs - y) / probs.size).astype(np.float32)
                for g in self.grads.values():
                    g[...] = 0.0
                self._backward(dlogits, caches)
                opt.step(self.params, self.grads)
        self.trained = True
        return losses

    def predict_probs(self, partial: np.ndarray) -> np.ndarray:
        """(T, nb, 2) partial grid -> (T, nb) signal probabilities."""
        probs, _ = self._forward(partial[None].astype(np.float32))
        return probs[0]


def partial_grid(episode: FieldEpisode, n_bands: int) -> np.ndarray:
    """(T, nb, 2) input grid: channel 0 sampled mask, channel 1 observed value."""
    grid = np.zeros((episode.T, n_bands, 2), dtype=np.float32)
    ts = np.arange(episode.T)
    grid[ts, episode.actions, 0] = 1.0
    grid[ts, episode.actions, 1] = episode.detections.astype(np.float32)
    return grid


def persistent_fill(episode: FieldEpisode, n_bands: int) -> np.ndarray:
    """Forward-fill baseline: each band holds its last observed value."""
    out = np.zeros((episode.T, n_bands), dtype=np.int64)
    state = np.zeros(n_bands, dtype=np.int64)
    for t in range(episode.T):
        state[episode.actions[t]] = episode.detections[t]
        out[t] = state
    return out


def reconstructor_training_pairs(controller_factory, lab_spec: EnvSpec,
                                 n_episodes: int, T: int, seed: int = 0):
    """Lab-simulated (partial, full) pairs from the deployed policy."""
    rng = np.random.default_rng(seed)
    inputs = np.zeros((n_episodes, T, lab_spec.n_bands, 2), dtype=np.float32)
    targets = np.zeros((n_episodes, T, lab_spec.n_bands), dtype=np.float32)
    for i in range(n_episodes):
        env = sample_environment(lab_spec, int(rng.integers(2 ** 31)))
        controller = controller_factory(int(rng.integers(2 ** 31)))
        log = run_episode(controller, env, T)
        ep = FieldEpisode(actions=log.actions, detections=log.detections,
                          obs_classes=log.obs_classes)
        inputs[i] = partial_grid(ep, lab_spec.n_bands)
        targets[i] = (log.truths > 0).astype(np.float32)
    return inputs, targets


def train_reconstructor(controller_factory, lab_spec: EnvSpec, n_episodes: int,
                        T: int, config: Optional[ReconstructorConfig] = None,
                        seed: int = 0) -> Reconstructor:
    cfg = config or ReconstructorConfig(n_bands=lab_spec.n_bands)
    inputs, targets = reconstructor_training_pairs(
        controller_factory, lab_spec, n_episodes, T, seed)
    rec = Reconstructor(cfg)
    rec.fit(inputs, targets, rng=np.random.default_rng(cfg.seed + 1))
    return rec


def reconstruct_states(rec: Reconstructor, episode: FieldEpisode,
                       n_bands: int) -> np.ndarray:
    """Threshold per-cell probabilities at 0.5; observed cells are trusted."""
    if not rec.trained:
        raise RuntimeError("reconstructor has not been trained")
    probs = rec.predict_probs(partial_grid(episode, n_bands))
    grid = (probs > 0.5).astype(np.int64)
    ts = np.arange(episode.T)
    grid[ts, episode.actions] = episode.detections
    return grid


# ---------------------------------------------------------------------------
# Sequence generation (free-running recurrent next-row model)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    n_bands: int = 20
    feat_channels: int = 8
    hidden: int = 16
    feat_kernel: int = 5
    cell_kernel: int = 3
    lr: float = 3e-3
    steps: int = 600
    batch: int = 4
    seed: int = 0


class SequenceGenerator:
    """Next-row predictor over state grids, free-run sampled for generation."""

    def __init__(self, config: GeneratorConfig):
        self.config = config
        self.trained = False
        rng = np.random.default_rng(config.seed)
        cf, hid = config.feat_channels, config.hidden
        fk, ck = config.feat_kernel, config.cell_kernel

        def init(shape, fan_in):
            limit = float(np.sqrt(1.0 / fan_in))
            return rng.uniform(-limit, limit, size=shape).astype(np.float32)

        self.params = {
            "feat.w": init((fk, 1, cf), fk),
            "feat.b": np.zeros(cf, dtype=np.float32),
            "cell.w": init((ck, cf + hid, 4 * hid), ck * (cf + hid)),
            "cell.b": np.zeros(4 * hid, dtype=np.float32),
            "out.w": init((1, hid, 1), hid),
            "out.b": np.zeros(1, dtype=np.float32),
        }
        self.params["cell.b"][hid:2 * hid] = 1.0
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _step(self, rows: np.ndarray, state):
        """rows: (B, nb) current state row -> (probs for next row, new state)."""
        p = self.params
        x = rows[..., None].astype(np.float32)
        feat_pre, feat_cache = conv1d_apply(x, p["feat.w"], p["feat.b"])
        feat = np.maximum(feat_pre, 0.0)
        state, cell_cache = convlstm_step(feat, state, p["cell.w"], p["cell.b"])
        logits, out_cache = conv1d_apply(state[0], p["out.w"], p["out.b"])
        probs = sigmoid(logits[..., 0])
        return probs, state, (feat_cache, feat_pre, cell_cache, out_cache)

    def init_state(self, batch: int):
        hid = self.config.hidden
        shape = (batch, self.config.n_bands, hid)
        return (np.zeros(shape, dtype=np.float32), np.zeros(shape, dtype=np.float32))

    def fit(self, grids: Sequence[np.ndarray],
            rng: Optional[np.random.Generator] = None) -> List[float]:
        """Teacher-forced next-row training over whole grids."""
        cfg = self.config
        rng = rng or np.random.default_rng(cfg.seed)
        opt = Adam(lr=cfg.lr)
        grids = [np.asarray(g, dtype=np.float32) for g in grids]
        losses = []
        for _ in range(cfg.steps):
            batch_idx = rng.integers(0, len(grids), size=min(cfg.batch, len(grids)))
            batch = np.stack([grids[i] for i in batch_idx])   # (B, T, nb)
            B, T, nb = batch.shape
            state = self.init_state(B)
            caches = []
            step_probs = []
            for t in range(T - 1):
                probs, state, cache = self._step(batch[:, t], state)
                caches.append(cache)
                step_probs.append(probs)
            probs = np.stack(step_probs, axis=1)              # (B, T-1, nb)
            target = batch[:, 1:]
            eps = 1e-7
            pc = np.clip(probs, eps, 1.0 - eps)
            loss = float(-(target * np.log(pc)
                           + (1 - target) * np.log(1 - pc)).mean())
            losses.append(loss)
            dlogits_all = (probs - target) / probs.size
            for g in self.grads.values():
                g[...] = 0.0
            dh = np.zeros_like(state[0])
            dc = np.zeros_like(state[1])
            for t in reversed(range(T - 1)):
                feat_cache, feat_pre, cell_cache, out_cache = caches[t]
                dlog = dlogits_all[:, t][..., None].astype(np.float32)
                dstate_h, dw, db = conv1d_backward(dlog, out_cache)
                self.grads["out.w"] += dw
                self.grads["out.b"] += db
                dfeat, (dh, dc), dw, db = convlstm_backward(dh + dstate_h, dc,
                                                            cell_cache)
                self.grads["cell.w"] += dw
                self.grads["cell.b"] += db
                dfeat = dfeat * (feat_pre > 0)
                _, dw, db = conv1d_backward(dfeat, feat_cache)
                self.grads["feat.w"] += dw
                self.grads["feat.b"] += db
            opt.step(self.params, self.grads)
        self.trained = True
        return losses


def generate_episodes(gen: SequenceGenerator, db: StateDatabase,
                      seed_episode: Optional[np.ndarray], count: int, T_out: int,
                      prefix: int = 10,
                      rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Free-run the generator from a database episode prefix.

    The first `prefix` rows are teacher-forced from the seed episode; the
    rest are sampled cell-wise from the predicted Bernoulli probabilities
    (temperature 1), so every rollout is a distinct binary grid.
    """
    if count == 0:
        return []
    if not gen.trained:
        raise RuntimeError("generator has not been trained")
    if len(db) == 0 and seed_episode is None:
        raise ValueError("empty state database and no seed episode")
    rng = rng or np.random.default_rng(0)
    seed_grid = np.asarray(
        seed_episode if seed_episode is not None else db.grids[0],
        dtype=np.float32)
    prefix = min(prefix, seed_grid.shape[0], T_out)
    nb = seed_grid.shape[1]
    out = np.zeros((count, T_out, nb), dtype=np.int64)
    out[:, :prefix] = seed_grid[:prefix].astype(np.int64)
    state = gen.init_state(count)
    for t in range(T_out - 1):
        rows = out[:, t].astype(np.float32)
        probs, state, _ = gen._step(rows, state)
        if t + 1 >= prefix:
            out[:, t + 1] = (rng.random(probs.shape) < probs).astype(np.int64)
    return [out[i] for i in range(count)]


# ---------------------------------------------------------------------------
# Retraining on estimated states and partial fine-tuning
# ---------------------------------------------------------------------------

def retrain_on_states(agent: DanAgent, grids: Sequence[np.ndarray],
                      lab_spec: EnvSpec, config: TrainConfig,
                      eval_source=None) -> TrainingCurve:
    """Alternate stored full-state grids 1:1 with fresh lab episodes."""
    grids = list(grids)
    if not grids:
        raise ValueError("no stored state episodes to retrain on")
    if any(g.shape[0] != config.T for g in grids):
        raise ValueError("stored grids must match the configured episode length")
    scripted = ScriptedSource(grids, index_fn=lambda ep: (ep // 2) % len(grids))
    source = AlternatingSource(scripted, SpecSource(lab_spec))
    cfg = dataclasses.replace(config, episodes=2 * len(grids))
    return train(agent, source, cfg, eval_source=eval_source)


def finetune_partial(agent: DanAgent, exp: FieldExperience,
                     config: TrainConfig) -> List[dict]:
    """Fine-tune on raw partial episodes: losses restricted to sampled bands.

    Per step only the sampled band a_t carries supervision: the prediction
    head is penalized at that band against the observation, and the reward
    becomes 1 - |m_pred[a_t] - z_t| (recomputed from the current network
    each update).  No full-state information is used anywhere.
    """
    nb = agent.n_bands
    records = []
    masks = []
    for ep in exp.episodes:
        truths = np.zeros((ep.T, nb), dtype=np.int64)
        mask = np.zeros((ep.T, nb), dtype=np.float32)
        ts = np.arange(ep.T)
        truths[ts, ep.actions] = ep.detections
        mask[ts, ep.actions] = 1.0
        records.append(ReplayEpisode(
            actions=ep.actions.copy(), detections=ep.detections.copy(),
            obs_classes=ep.obs_classes.copy(), truths=truths,
            rewards=np.zeros(ep.T, dtype=np.float64)))
        masks.append(mask)

    rng = np.random.default_rng(config.seed)
    batch_n = min(config.batch_episodes, len(records))
    n_updates = max(len(records) * config.updates_per_episode // batch_n, 1)
    losses = []
    for _ in range(n_updates):
        idx = rng.choice(len(records), size=batch_n, replace=False)
        batch = [records[i] for i in idx]
        batch_masks = np.stack([masks[i] for i in idx])
        acts = np.stack([records[i].actions for i in idx])
        obs = np.stack([records[i].detections for i in idx]).astype(np.float64)

        def single_band_reward(m_act, t, acts=acts, obs=obs):
            picked = m_act[np.arange(len(acts)), t, acts[:, t]]
            return 1.0 - np.abs(picked - obs[:, t])

        losses.append(dqn_update(agent, batch, band_masks=batch_masks,
                                 reward_override=single_band_reward))
    return losses
