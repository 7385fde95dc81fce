"""Anticipatory agents: shared Q/M(/P) networks trained with prediction rewards.

The action-value head Q is trained with temporal-difference targets on
rewards that score how well the state-prediction head M tracked the hidden
spectrum; M itself is supervised with weighted cross-entropy against the
truth available in simulation.  Variants:

* convlstm_dan   -- Q/M heads, instantaneous or differential-block IoU reward.
* predictive_dan -- adds a next-state head P; the reward gains a bonus of
                    infogain_weight * mean |P(before acting) - M(after)|.
* infomax_dan    -- same heads, but Q is regressed directly onto the vector
                    of per-band infogain labels (computed for every action
                    via counterfactual observations), single-step, no
                    discounting; a supervised variant of predictive_dan.

After training only Q drives band selection; M is still read out for state
reporting.  Training is single-threaded per agent; evaluation snapshots are
frozen copies.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .env import BandVector, EnvSpec, sample_environment
from .harness import History, encode_step, history_channels
from .metrics import iou_block, iou_instant
from .nn import Adam, NetworkConfig, NonFiniteGradient, SharedNet

AGENT_KINDS = ("convlstm_dan", "predictive_dan", "infomax_dan")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite during training."""


@dataclass
class TrainConfig:
    episodes: int = 2000
    T: int = 100
    batch_episodes: int = 8
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_final: float = 0.05
    target_sync: int = 100           # updates between target-network refreshes
    infogain_weight: float = 10.0
    updates_per_episode: int = 4
    lr: float = 1e-3
    replay_capacity: int = 300
    eval_every: int = 50
    eval_episodes: int = 20
    block_n: int = 5
    w_neg: float = 0.1
    seed: int = 0

    def epsilon_at(self, episode: int) -> float:
        """Linear decay over the first half of training, then flat."""
        half = max(self.episodes // 2, 1)
        frac = min(episode / half, 1.0)
        return self.epsilon_start + frac * (self.epsilon_final - self.epsilon_start)


@dataclass
class ReplayEpisode:
    """One complete episode as stored in the replay buffer."""

    actions: np.ndarray       # (T,)
    detections: np.ndarray    # (T,)
    obs_classes: np.ndarray   # (T,)
    truths: np.ndarray        # (T, n_bands) class labels, 0 = none
    rewards: np.ndarray       # (T,)
    pred_masks: Optional[np.ndarray] = None  # (T, n_bands) binarized M output
    q_labels: Optional[np.ndarray] = None    # (T, n_bands) infomax targets

    @property
    def T(self) -> int:
        return len(self.actions)


def activity_probs_from_head(m: np.ndarray) -> np.ndarray:
    """Per-band activity probability from an M/P head output row."""
    if m.ndim == 1:
        return m
    return 1.0 - m[:, 0]


def compute_infogain(p_next_given_ht: np.ndarray,
                     m_next_given_ht1: np.ndarray) -> float:
    """Mean absolute prediction change caused by acting and observing."""
    a = np.asarray(p_next_given_ht, dtype=np.float64)
    b = np.asarray(m_next_given_ht1, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prediction vectors differ in shape: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def compute_reward(reward_kind: str, pred_masks, truth_masks, t: int,
                   block_n: int = 5, infogain: float = 0.0,
                   infogain_weight: float = 10.0) -> float:
    """Per-step scalar reward for the configured kind."""
    if reward_kind == "in_iou":
        return iou_instant(pred_masks[t], truth_masks[t])
    if reward_kind == "db_iou":
        if t < block_n:
            return 0.0
        upto_p, upto_t = pred_masks[: t + 1], truth_masks[: t + 1]
        return (iou_block(upto_p, upto_t, block_n + 1)
                - iou_block(upto_p, upto_t, block_n))
    if reward_kind == "predictive":
        return (iou_instant(pred_masks[t], truth_masks[t])
                + infogain_weight * infogain)
    raise ValueError(f"unknown reward kind {reward_kind!r}")


class DanAgent:
    """Shared network plus target snapshot, replay store, and optimizer."""

    def __init__(self, kind: str, n_bands: int, n_classes: int = 1,
                 config: Optional[TrainConfig] = None, seed: int = 0,
                 arch: str = "convlstm", reward_kind: Optional[str] = None,
                 net_config: Optional[NetworkConfig] = None, dtype=np.float32):
        if kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")
        self.kind = kind
        self.config = config or TrainConfig()
        if reward_kind is None:
            reward_kind = "predictive" if kind == "predictive_dan" else "in_iou"
        if kind == "predictive_dan" and reward_kind != "predictive":
            raise ValueError("predictive_dan uses the predictive reward")
        self.reward_kind = reward_kind
        heads = ("q", "m") if kind == "convlstm_dan" else ("q", "m", "p")
        if net_config is None:
            net_config = NetworkConfig(
                arch=arch, n_bands=n_bands, n_classes=n_classes,
                in_channels=history_channels(n_classes), heads=heads)
        self.net = SharedNet(net_config, seed=seed, dtype=dtype)
        self.target = self.net.copy()
        self.optimizer = Adam(lr=self.config.lr)
        self.replay: deque = deque(maxlen=self.config.replay_capacity)
        self.rng = np.random.default_rng(seed)
        self.update_count = 0
        self.episode_count = 0

    # Convenience accessors -------------------------------------------------

    @property
    def n_bands(self) -> int:
        return self.net.config.n_bands

    @property
    def n_classes(self) -> int:
        return self.net.config.n_classes

    @property
    def has_p_head(self) -> bool:
        return "p" in self.net.config.heads

    def sync_target(self) -> None:
        self.target.load_params_from(self.net)


def q_select_action(agent: DanAgent, q_row: np.ndarray, epsilon: float,
                    rng: np.random.Generator) -> int:
    """Epsilon-greedy over per-band action values; ties go to the lowest band."""
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(agent.n_bands))
    return int(np.argmax(q_row))


def m_predict(agent: DanAgent, history: History) -> BandVector:
    """M-head prediction for an explicit history (reference path)."""
    state = agent.net.init_state(1)
    for row in history.encoded():
        state, _ = agent.net.step(row[None], state)
    m, _ = agent.net.m_head(state)
    if agent.n_classes == 1:
        return BandVector(values=m[0].astype(np.float64), mode="prob")
    return BandVector(values=m[0].astype(np.float64), mode="class_probs")


def _counterfactual_labels(agent: DanAgent, env, t: int, state) -> np.ndarray:
    """Infogain for every candidate band via simulator access.

    Label(b) = mean |P(h) - M(h + (b, observe(env, t, b)))|; training-time
    only, since it peeks at counterfactual observations.
    """
    nb = agent.n_bands
    p_cur, _ = agent.net.p_head(state)
    p_act = activity_probs_from_head(p_cur[0])
    rows = np.zeros((nb, nb, history_channels(agent.n_classes)),
                    dtype=agent.net.dtype)
    for b in range(nb):
        obs = env.observe(t, b)
        rows[b] = encode_step(b, obs, nb, agent.n_classes)
    h, c = state
    tiled = (np.repeat(h, nb, axis=0), np.repeat(c, nb, axis=0))
    new_state, _ = agent.net.step(rows, tiled)
    m_all, _ = agent.net.m_head(new_state)
    if agent.n_classes == 1:
        m_act = m_all
    else:
        m_act = 1.0 - m_all[..., 0]
    return np.abs(m_act - p_act[None, :]).mean(axis=1)


def infomax_targets(agent: DanAgent, env, history: History, t: int) -> np.ndarray:
    """Public label computation from an explicit history."""
    state = agent.net.init_state(1)
    for row in history.encoded():
        state, _ = agent.net.step(row[None], state)
    return _counterfactual_labels(agent, env, t, state)


def rollout(agent: DanAgent, env, T: int, epsilon: float,
            rng: np.random.Generator, collect_labels: bool = False) -> ReplayEpisode:
    """Run one episode with the current network; returns the replay record."""
    nb, nc = agent.n_bands, agent.n_classes
    net = agent.net
    state = net.init_state(1)
    p_prev: Optional[np.ndarray] = None

    actions = np.zeros(T, dtype=np.int64)
    detections = np.zeros(T, dtype=np.int64)
    obs_classes = np.zeros(T, dtype=np.int64)
    truths = np.zeros((T, nb), dtype=np.int64)
    rewards = np.zeros(T, dtype=np.float64)
    labels = np.zeros((T, nb), dtype=np.float64) if collect_labels else None
    pred_masks = np.zeros((T, nb), dtype=bool)
    truth_masks = np.zeros((T, nb), dtype=bool)

    for t in range(T):
        if env.change_prob > 0.0:
            env = env.advance_nonstationary(t)
        q, _ = net.q_head(state)
        action = q_select_action(agent, q[0], epsilon, rng)
        if collect_labels:
            labels[t] = _counterfactual_labels(agent, env, t, state)
        obs = env.observe(t, action)
        row = encode_step(action, obs, nb, nc)
        state, _ = net.step(row[None], state)
        m, _ = net.m_head(state)
        m_act = activity_probs_from_head(m[0])

        truth = env.state_at(t)
        actions[t] = action
        detections[t] = obs.detection
        obs_classes[t] = obs.class_id
        truths[t] = truth.values
        pred_masks[t] = m_act > 0.5
        truth_masks[t] = truth.values > 0

        gain = 0.0
        if agent.reward_kind == "predictive":
            gain = compute_infogain(p_prev, m_act) if p_prev is not None else 0.0
        rewards[t] = compute_reward(
            agent.reward_kind, pred_masks[: t + 1], truth_masks[: t + 1], t,
            block_n=agent.config.block_n, infogain=gain,
            infogain_weight=agent.config.infogain_weight)
        if agent.has_p_head:
            p, _ = net.p_head(state)
            p_prev = activity_probs_from_head(p[0])

    return ReplayEpisode(actions=actions, detections=detections,
                         obs_classes=obs_classes, truths=truths,
                         rewards=rewards, pred_masks=pred_masks, q_labels=labels)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

def _encode_batch(episodes: Sequence[ReplayEpisode], nb: int, nc: int,
                  dtype) -> np.ndarray:
    """(T, B, nb, channels) encoded inputs rebuilt from stored steps."""
    T = episodes[0].T
    B = len(episodes)
    X = np.zeros((T, B, nb, history_channels(nc)), dtype=dtype)
    for i, ep in enumerate(episodes):
        ts = np.arange(T)
        X[ts, i, ep.actions, 0] = 1.0
        X[ts, i, ep.actions, 1] = ep.detections.astype(dtype)
        if nc > 1:
            has_class = ep.obs_classes > 0
            X[ts[has_class], i, ep.actions[has_class],
              1 + ep.obs_classes[has_class]] = 1.0
    return X


def _pred_loss_and_dlogits(probs: np.ndarray, labels: np.ndarray, w_neg: float,
                           mask: Optional[np.ndarray] = None):
    """WBCE value and gradient wrt logits for sigmoid or per-band softmax heads.

    probs: (B, nb) sigmoid outputs or (B, nb, K+1) softmax rows; labels:
    (B, nb) int class ids.  mask optionally restricts the loss to chosen
    bands (partial-observation fine-tuning).  Returns unnormalized sums.
    """
    eps = 1e-7
    if probs.ndim == 2:
        y = (labels > 0).astype(probs.dtype)
        w = np.where(y > 0, 1.0, w_neg).astype(probs.dtype)
        if mask is not None:
            w = w * mask
        p = np.clip(probs, eps, 1.0 - eps)
        loss = float(-(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))).sum())
        dlogits = w * (probs - y)
        return loss, dlogits
    k1 = probs.shape[-1]
    onehot = np.eye(k1, dtype=probs.dtype)[labels]
    w = np.where(labels > 0, 1.0, w_neg).astype(probs.dtype)
    if mask is not None:
        w = w * mask
    p = np.clip(probs, eps, 1.0)
    loss = float(-(w * (onehot * np.log(p)).sum(axis=-1)).sum())
    dlogits = w[..., None] * (probs - onehot)
    return loss, dlogits


def compute_update_grads(agent: DanAgent, episodes: Sequence[ReplayEpisode],
                         band_masks: Optional[np.ndarray] = None,
                         reward_override=None) -> Dict[str, float]:
    """Forward/backward over whole-episode unrolls; accumulates net.grads.

    The recurrent trunk runs step by step; head applications and losses are
    stacked over (T, B) and hit each head exactly once.

    band_masks (B, T, nb): restrict prediction losses to those cells
    (partial fine-tuning).  reward_override(m_probs (B,T,nb), t) -> (B,)
    replaces stored rewards (used when rewards must be recomputed from the
    current network, e.g. single-band prediction rewards).
    """
    net = agent.net
    nb, nc = agent.n_bands, agent.n_classes
    B = len(episodes)
    T = episodes[0].T
    if any(ep.T != T for ep in episodes):
        raise ValueError("batched episodes must share the same length")
    X = _encode_batch(episodes, nb, nc, net.dtype)
    actions = np.stack([ep.actions for ep in episodes])          # (B, T)
    rewards = np.stack([ep.rewards for ep in episodes])          # (B, T)
    labels = np.stack([ep.truths for ep in episodes])            # (B, T, nb)
    infomax = agent.kind == "infomax_dan"

    # Trunk pass; hidden states collected for stacked head application.
    state = net.init_state(B)
    h_shape = state[0].shape
    pre_h = np.zeros((T,) + h_shape, dtype=net.dtype)   # state before step t
    post_h = np.zeros((T,) + h_shape, dtype=net.dtype)  # state after step t
    step_caches = []
    for t in range(T):
        pre_h[t] = state[0]
        state, sc = net.step(X[t], state)
        post_h[t] = state[0]
        step_caches.append(sc)

    def flat(h):
        return h.reshape((T * B,) + h_shape[1:])

    m_probs_flat, m_cache = net.m_head((flat(post_h), None))
    m_probs = m_probs_flat.reshape((T, B) + m_probs_flat.shape[1:])
    if agent.has_p_head:
        p_probs_flat, p_cache = net.p_head((flat(post_h), None))
        p_probs = p_probs_flat.reshape((T, B) + p_probs_flat.shape[1:])
    q_pre_flat, q_cache = net.q_head((flat(pre_h), None))
    q_pre = q_pre_flat.reshape(T, B, nb)

    m_act = m_probs if net.config.m_channels == 1 else 1.0 - m_probs[..., 0]
    m_act = np.moveaxis(m_act, 0, 1)                                 # (B, T, nb)
    if reward_override is not None:
        rewards = np.stack([reward_override(m_act, t) for t in range(T)], axis=1)

    # Frozen-target pass for TD targets.
    if not infomax:
        tstate = agent.target.init_state(B)
        t_post = np.zeros((T,) + h_shape, dtype=net.dtype)
        for t in range(T):
            tstate, _ = agent.target.step(X[t], tstate)
            t_post[t] = tstate[0]
        tq, _ = agent.target.q_head((flat(t_post), None))
        max_next = tq.reshape(T, B, nb).max(axis=-1)                # (T, B)
        targets = rewards.T.astype(np.float64).copy()               # (T, B)
        targets[:-1] += agent.config.gamma * max_next[1:]

    # Action-value loss.
    dq = np.zeros((T, B, nb), dtype=net.dtype)
    if infomax:
        q_labels = np.stack([ep.q_labels for ep in episodes], axis=1)  # (T,B,nb)
        err = q_pre.astype(np.float64) - q_labels
        loss_q = float((err * err).mean())
        dq[...] = (2.0 * err / err.size).astype(net.dtype)
    else:
        t_idx = np.repeat(np.arange(T), B)
        b_idx = np.tile(np.arange(B), T)
        a_idx = actions.T.reshape(-1)
        taken = q_pre[t_idx, b_idx, a_idx].astype(np.float64).reshape(T, B)
        err = taken - targets
        loss_q = float((err * err).mean())
        dq[t_idx, b_idx, a_idx] = (2.0 * err / err.size).reshape(-1).astype(net.dtype)

    # Prediction losses (stacked over T*B rows).
    labels_t_first = np.moveaxis(labels, 0, 1)                      # (T, B, nb)
    mask_m = None
    mask_p = None
    if band_masks is not None:
        mask_m = np.moveaxis(band_masks, 0, 1).reshape(T * B, nb)
        mask_p = np.moveaxis(band_masks, 0, 1)[1:].reshape((T - 1) * B, nb)
    m_norm = T * B * nb
    lm, dm = _pred_loss_and_dlogits(
        m_probs_flat, labels_t_first.reshape(T * B, nb),
        agent.config.w_neg, mask_m)
    loss_m = lm / m_norm
    dm = dm / m_norm
    loss_p = 0.0
    if agent.has_p_head:
        p_norm = max((T - 1) * B * nb, 1)
        p_flat_valid = p_probs[:-1].reshape(((T - 1) * B,) + p_probs.shape[2:])
        lp, dp_valid = _pred_loss_and_dlogits(
            p_flat_valid, labels_t_first[1:].reshape((T - 1) * B, nb),
            agent.config.w_neg, mask_p)
        loss_p = lp / p_norm
        dp = np.zeros_like(dm).reshape((T, B) + dm.shape[1:])
        dp[:-1] = (dp_valid / p_norm).reshape(((T - 1), B) + dm.shape[1:])
        dp = dp.reshape((T * B,) + dm.shape[1:])

    total = loss_q + loss_m + loss_p
    if not np.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss (q={loss_q}, m={loss_m}, p={loss_p})")

    # Stacked head backwards, then backward through time for the trunk.
    dh_all = net.m_head_backward(dm, m_cache)
    if agent.has_p_head:
        dh_all = dh_all + net.p_head_backward(dp, p_cache)
    dh_all = dh_all.reshape((T,) + h_shape)
    dh_q_all = net.q_head_backward(dq.reshape(T * B, nb), q_cache)
    dh_q_all = dh_q_all.reshape((T,) + h_shape)

    dh = np.zeros(h_shape, dtype=net.dtype)
    dc = np.zeros(h_shape, dtype=net.dtype)
    for t in reversed(range(T)):
        _, (dh, dc) = net.step_backward((dh + dh_all[t], dc), step_caches[t])
        dh = dh + dh_q_all[t]

    return {"loss": total, "loss_q": loss_q, "loss_m": loss_m, "loss_p": loss_p}


def dqn_update(agent: DanAgent, episodes: Sequence[ReplayEpisode],
               band_masks: Optional[np.ndarray] = None,
               reward_override=None) -> Dict[str, float]:
    """One optimizer step on the summed Q/M(/P) losses over the batch."""
    agent.net.zero_grads()
    losses = compute_update_grads(agent, episodes, band_masks, reward_override)
    try:
        agent.optimizer.step(agent.net.params, agent.net.grads)
    except NonFiniteGradient as exc:
        raise TrainingDiverged(str(exc)) from exc
    agent.update_count += 1
    if agent.update_count % agent.config.target_sync == 0:
        agent.sync_target()
    return losses


# ---------------------------------------------------------------------------
# Environment sources and the training loop
# ---------------------------------------------------------------------------

class SpecSource:
    """Fresh environment per episode drawn from one spec."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def sample(self, episode: int, rng: np.random.Generator):
        return sample_environment(self.spec, int(rng.integers(2 ** 31)))


class PoolSource:
    """Environments drawn from weighted specs (see feedback.SpecPool)."""

    def __init__(self, specs: Sequence[EnvSpec], weights: Sequence[float]):
        w = np.asarray(weights, dtype=np.float64)
        if (w < 0).any() or not np.isclose(w.sum(), 1.0):
            raise ValueError("pool weights must be non-negative and sum to 1")
        self.specs = list(specs)
        self.weights = w

    def sample(self, episode: int, rng: np.random.Generator):
        idx = int(rng.choice(len(self.specs), p=self.weights))
        return sample_environment(self.specs[idx], int(rng.integers(2 ** 31)))


class AlternatingSource:
    """Alternate two sources 1:1 (even episodes from the first)."""

    def __init__(self, first, second):
        self.first = first
        self.second = second

    def sample(self, episode: int, rng: np.random.Generator):
        src = self.first if episode % 2 == 0 else self.second
        return src.sample(episode, rng)


@dataclass
class TrainingCurve:
    episodes: List[int] = field(default_factory=list)
    eval_cum_iou: List[float] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    loss_q: List[float] = field(default_factory=list)
    loss_m: List[float] = field(default_factory=list)
    loss_p: List[float] = field(default_factory=list)

    def append(self, episode: int, eval_iou: float, losses: Dict[str, float]) -> None:
        self.episodes.append(episode)
        self.eval_cum_iou.append(eval_iou)
        self.loss.append(losses.get("loss", float("nan")))
        self.loss_q.append(losses.get("loss_q", float("nan")))
        self.loss_m.append(losses.get("loss_m", float("nan")))
        self.loss_p.append(losses.get("loss_p", float("nan")))


class DanController:
    """Harness adapter: greedy Q for actions, M for predictions."""

    def __init__(self, agent: DanAgent, epsilon: float = 0.0, seed: int = 0):
        self.agent = agent
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.last_q_values: Optional[np.ndarray] = None
        self._state = None
        self._processed = 0

    def reset(self, n_bands: int, n_classes: int = 1) -> None:
        if n_bands != self.agent.n_bands:
            raise ValueError(f"agent expects {self.agent.n_bands} bands, env has {n_bands}")
        self._state = self.agent.net.init_state(1)
        self._processed = 0
        self.last_q_values = None

    def _ingest(self, history: History) -> None:
        while self._processed < len(history):
            action, obs = history.steps[self._processed]
            row = encode_step(action, obs, self.agent.n_bands, self.agent.n_classes)
            self._state, _ = self.agent.net.step(row[None], self._state)
            self._processed += 1

    def select_band(self, history: History) -> int:
        self._ingest(history)
        q, _ = self.agent.net.q_head(self._state)
        self.last_q_values = np.asarray(q[0], dtype=np.float64).copy()
        return q_select_action(self.agent, q[0], self.epsilon, self.rng)

    def predict(self, history: History) -> BandVector:
        self._ingest(history)
        m, _ = self.agent.net.m_head(self._state)
        if self.agent.n_classes == 1:
            return BandVector(values=np.asarray(m[0], dtype=np.float64), mode="prob")
        return BandVector(values=np.asarray(m[0], dtype=np.float64), mode="class_probs")


def greedy_rollout_batch(agent: DanAgent, envs: Sequence, T: int):
    """Batched greedy evaluation pass; returns (pred_masks, truths) (B,T,nb)."""
    nb, nc = agent.n_bands, agent.n_classes
    net = agent.net
    B = len(envs)
    envs = list(envs)
    state = net.init_state(B)
    pred_masks = np.zeros((B, T, nb), dtype=bool)
    truths = np.zeros((B, T, nb), dtype=np.int64)
    rows = np.zeros((B, nb, history_channels(nc)), dtype=net.dtype)
    for t in range(T):
        q, _ = net.q_head(state)
        acts = np.argmax(q, axis=-1)
        rows[...] = 0.0
        for i, env in enumerate(envs):
            if env.change_prob > 0.0:
                envs[i] = env = env.advance_nonstationary(t)
            obs = env.observe(t, int(acts[i]))
            rows[i] = encode_step(int(acts[i]), obs, nb, nc)
            truths[i, t] = env.state_at(t).values
        state, _ = net.step(rows, state)
        m, _ = net.m_head(state)
        m_act = m if net.config.m_channels == 1 else 1.0 - m[..., 0]
        pred_masks[:, t] = m_act > 0.5
    return pred_masks, truths


def evaluate_agent(agent: DanAgent, source, n_episodes: int, T: int,
                   seed_base: int = 9_000_000) -> float:
    """Mean final cumulative IoU over held-out seeded episodes (greedy)."""
    from .metrics import cumulative_iou_curve

    envs = [source.sample(j, np.random.default_rng(seed_base + j))
            for j in range(n_episodes)]
    pred_masks, truths = greedy_rollout_batch(agent, envs, T)
    scores = [cumulative_iou_curve(pred_masks[i], truths[i] > 0)[-1]
              for i in range(n_episodes)]
    return float(np.mean(scores))


def train(agent: DanAgent, source, config: Optional[TrainConfig] = None,
          eval_source=None) -> TrainingCurve:
    """Episode loop: rollout, replay append, K update steps, periodic eval."""
    cfg = config or agent.config
    rng = np.random.default_rng(cfg.seed)
    eval_source = eval_source or source
    curve = TrainingCurve()
    last_losses: Dict[str, float] = {}
    collect_labels = agent.kind == "infomax_dan"

    for episode in range(cfg.episodes):
        epsilon = cfg.epsilon_at(episode)
        env = source.sample(episode, rng)
        record = rollout(agent, env, cfg.T, epsilon, rng,
                         collect_labels=collect_labels)
        agent.replay.append(record)
        agent.episode_count += 1
        if len(agent.replay) >= cfg.batch_episodes:
            for _ in range(cfg.updates_per_episode):
                idx = rng.choice(len(agent.replay), size=cfg.batch_episodes,
                                 replace=False)
                batch = [agent.replay[i] for i in idx]
                last_losses = dqn_update(agent, batch)
        if (episode + 1) % cfg.eval_every == 0 or episode == cfg.episodes - 1:
            score = evaluate_agent(agent, eval_source, cfg.eval_episodes, cfg.T)
            curve.append(episode + 1, score, last_losses)
    return curve
