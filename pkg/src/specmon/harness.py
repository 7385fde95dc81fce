"""Controller-environment episode loop, history encoding, and episode logs.

A controller implements three methods::

    reset(n_bands, n_classes)       # called before every episode
    select_band(history) -> int     # choose the band to sample this step
    predict(history) -> BandVector  # state estimate after the observation

Each step is act-then-observe-then-predict: the controller picks a band,
receives the detection for it, and only then reports its per-band estimate,
which is scored against the hidden truth.  Causality is enforced by the
interface: controllers see only the History object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .env import BandVector, EnvironmentInstance, Observation
from .metrics import iou_block, iou_instant


class EpisodeAbort(RuntimeError):
    """Raised when a controller violates the action contract mid-episode."""


def history_channels(n_classes: int) -> int:
    """Channel 0: one-hot sampled band; channel 1: detection value at that
    band; multi-class adds one one-hot channel per class."""
    return 2 + (n_classes if n_classes > 1 else 0)


def encode_step(action: int, obs: Observation, n_bands: int,
                n_classes: int) -> np.ndarray:
    row = np.zeros((n_bands, history_channels(n_classes)), dtype=np.float32)
    row[action, 0] = 1.0
    row[action, 1] = float(obs.detection)
    if n_classes > 1 and obs.class_id > 0:
        row[action, 1 + obs.class_id] = 1.0
    return row


@dataclass
class History:
    """Ordered (action, observation) record with a lazily built input grid."""

    n_bands: int
    n_classes: int = 1
    steps: List = field(default_factory=list)
    _rows: List = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def append(self, action: int, obs: Observation) -> None:
        self.steps.append((action, obs))
        self._rows.append(encode_step(action, obs, self.n_bands, self.n_classes))

    @property
    def last(self):
        return self.steps[-1] if self.steps else None

    def encoded(self) -> np.ndarray:
        """(steps, n_bands, channels) frequency-time input grid."""
        if not self._rows:
            return np.zeros((0, self.n_bands, history_channels(self.n_classes)),
                            dtype=np.float32)
        return np.stack(self._rows)


def encode_history(history: History, n_bands: Optional[int] = None,
                   n_classes: Optional[int] = None) -> np.ndarray:
    if n_bands is not None and n_bands != history.n_bands:
        raise ValueError("n_bands does not match history")
    if n_classes is not None and n_classes != history.n_classes:
        raise ValueError("n_classes does not match history")
    return history.encoded()


def decode_history(grid: np.ndarray, n_classes: int = 1) -> List:
    """Invert encode_history back to (action, Observation) steps."""
    steps = []
    for row in grid:
        action = int(np.argmax(row[:, 0]))
        detection = int(round(float(row[action, 1])))
        class_id = 0
        if n_classes > 1:
            class_cols = row[action, 2:2 + n_classes]
            if class_cols.max() > 0:
                class_id = int(np.argmax(class_cols)) + 1
        steps.append((action, Observation(detection=detection, class_id=class_id)))
    return steps


# ---------------------------------------------------------------------------
# Episode log
# ---------------------------------------------------------------------------

@dataclass
class EpisodeLog:
    """Time-indexed record of one episode, rewards recomputable from rows."""

    seed: int
    spec_id: str
    controller_id: str
    reward_kind: str
    n_bands: int
    n_classes: int
    actions: np.ndarray        # (T,) int
    detections: np.ndarray     # (T,) int
    obs_classes: np.ndarray    # (T,) int
    rewards: np.ndarray        # (T,) float
    preds: np.ndarray          # (T, n_bands) activity probabilities
    truths: np.ndarray         # (T, n_bands) int class ids (0 = none)
    reward_bonus: Optional[np.ndarray] = None  # e.g. infogain share of reward
    q_values: Optional[np.ndarray] = None      # (T, n_bands) when available

    @property
    def T(self) -> int:
        return len(self.actions)

    def pred_masks(self, threshold: float = 0.5) -> np.ndarray:
        return self.preds > threshold

    def truth_masks(self) -> np.ndarray:
        return self.truths > 0

    def to_csv(self, path) -> None:
        n = self.n_bands
        header = (["t", "action", "obs", "reward"]
                  + [f"pred_{b}" for b in range(n)]
                  + [f"truth_{b}" for b in range(n)])
        lines = [",".join(header)]
        for t in range(self.T):
            cells = [str(t), str(int(self.actions[t])), str(int(self.detections[t])),
                     f"{self.rewards[t]:.10g}"]
            cells += [f"{p:.10g}" for p in self.preds[t]]
            cells += [str(int(v)) for v in self.truths[t]]
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")


def _base_reward(kind: str, pred_masks, truth_masks, t: int, block_n: int) -> float:
    if kind == "in_iou":
        return iou_instant(pred_masks[t], truth_masks[t])
    if kind == "db_iou":
        if t < block_n:
            return 0.0
        upto_p, upto_t = pred_masks[: t + 1], truth_masks[: t + 1]
        return (iou_block(upto_p, upto_t, block_n + 1)
                - iou_block(upto_p, upto_t, block_n))
    raise ValueError(f"unknown reward kind {kind!r}")


def run_episode(controller, env: EnvironmentInstance, T: int,
                reward_kind: str = "in_iou", block_n: int = 5,
                prob_threshold: float = 0.5, bonus_fn=None,
                spec_id: str = "", controller_id: str = "") -> EpisodeLog:
    """Run one episode and return its full log.

    bonus_fn(controller, t) -> float adds an auxiliary reward term (recorded
    separately); used by agents with prediction-change bonuses.
    """
    history = History(n_bands=env.n_bands, n_classes=env.n_classes)
    controller.reset(env.n_bands, env.n_classes)

    actions = np.zeros(T, dtype=np.int64)
    detections = np.zeros(T, dtype=np.int64)
    obs_classes = np.zeros(T, dtype=np.int64)
    rewards = np.zeros(T, dtype=np.float64)
    bonuses = np.zeros(T, dtype=np.float64)
    preds = np.zeros((T, env.n_bands), dtype=np.float64)
    truths = np.zeros((T, env.n_bands), dtype=np.int64)
    q_rows = np.zeros((T, env.n_bands), dtype=np.float64)
    has_q = False

    pred_masks = np.zeros((T, env.n_bands), dtype=bool)

    for t in range(T):
        if env.change_prob > 0.0:
            env = env.advance_nonstationary(t)
        action = int(controller.select_band(history))
        if not 0 <= action < env.n_bands:
            raise EpisodeAbort(
                f"controller {controller_id or type(controller).__name__} returned "
                f"band {action} outside [0, {env.n_bands}) at t={t}")
        obs = env.observe(t, action)
        history.append(action, obs)
        pred = controller.predict(history)
        truth = env.state_at(t)

        actions[t] = action
        detections[t] = obs.detection
        obs_classes[t] = obs.class_id
        preds[t] = pred.activity_probs()
        truths[t] = truth.values
        pred_masks[t] = pred.active_mask(prob_threshold)

        rewards[t] = _base_reward(reward_kind, pred_masks, truths > 0, t, block_n)
        if bonus_fn is not None:
            bonuses[t] = float(bonus_fn(controller, t))
            rewards[t] += bonuses[t]
        q = getattr(controller, "last_q_values", None)
        if q is not None:
            q_rows[t] = q
            has_q = True

    return EpisodeLog(
        seed=env.seed,
        spec_id=spec_id or getattr(getattr(env, "spec", None), "name", ""),
        controller_id=controller_id or type(controller).__name__,
        reward_kind=reward_kind, n_bands=env.n_bands, n_classes=env.n_classes,
        actions=actions, detections=detections, obs_classes=obs_classes,
        rewards=rewards, preds=preds, truths=truths,
        reward_bonus=bonuses if bonus_fn is not None else None,
        q_values=q_rows if has_q else None,
    )
