import numpy as np
import pytest

from specmon.baselines import ScanController
from specmon.env import BandVector, Observation, sample_environment
from specmon.harness import (EpisodeAbort, History, decode_history,
                             encode_history, encode_step, run_episode)
from specmon.metrics import iou_block, iou_instant


class TruthOracle:
    """Test-only controller that cheats by reading the environment."""

    def __init__(self, env):
        self.env = env

    def reset(self, n_bands, n_classes=1):
        self.n_bands = n_bands

    def select_band(self, history):
        return len(history) % self.n_bands

    def predict(self, history):
        truth = self.env.state_at(len(history) - 1)
        return BandVector(values=(truth.values > 0).astype(np.int64), mode="binary")


class AlwaysEmpty:
    def reset(self, n_bands, n_classes=1):
        self.n_bands = n_bands

    def select_band(self, history):
        return 0

    def predict(self, history):
        return BandVector(values=np.zeros(self.n_bands, dtype=np.int64), mode="binary")


class OutOfRange(AlwaysEmpty):
    def select_band(self, history):
        return self.n_bands + 3


# ---------------------------------------------------------------------------
# History encoding
# ---------------------------------------------------------------------------

def test_empty_history_encodes_to_zero_grid():
    h = History(n_bands=20)
    assert h.encoded().shape == (0, 20, 2)


def test_single_step_encoding():
    row = encode_step(5, Observation(1, 1), 20, 1)
    assert row.shape == (20, 2)
    assert row[5, 0] == 1.0 and row[5, 1] == 1.0
    assert row.sum() == 2.0


def test_encoding_round_trip():
    h = History(n_bands=8, n_classes=3)
    steps = [(2, Observation(1, 2)), (5, Observation(0, 0)), (7, Observation(1, 3))]
    for a, o in steps:
        h.append(a, o)
    grid = encode_history(h)
    assert grid.shape == (3, 8, 5)
    assert decode_history(grid, n_classes=3) == steps


def test_encode_history_validates_dims():
    h = History(n_bands=8)
    with pytest.raises(ValueError):
        encode_history(h, n_bands=9)


# ---------------------------------------------------------------------------
# Episode loop
# ---------------------------------------------------------------------------

def test_perfect_oracle_scores_one(spec_a):
    env = sample_environment(spec_a, 3)
    log = run_episode(TruthOracle(env), env, T=30)
    assert np.all(log.rewards == 1.0)


def test_always_empty_on_spec_a_scores_zero(spec_a):
    env = sample_environment(spec_a, 3)
    log = run_episode(AlwaysEmpty(), env, T=30)
    # both pairs active from t=0, prediction empty
    assert np.all(log.rewards == 0.0)


def test_scan_episode_deterministic_replay(spec_a):
    logs = []
    for _ in range(2):
        env = sample_environment(spec_a, 11)
        logs.append(run_episode(ScanController(seed=5), env, T=50))
    a, b = logs
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.detections, b.detections)
    assert np.array_equal(a.preds, b.preds)
    assert np.array_equal(a.rewards, b.rewards)


def test_out_of_range_action_aborts(spec_a):
    env = sample_environment(spec_a, 3)
    with pytest.raises(EpisodeAbort) as err:
        run_episode(OutOfRange(), env, T=5)
    assert "band" in str(err.value)


def test_rewards_recomputable_from_log(spec_a):
    env = sample_environment(spec_a, 9)
    log = run_episode(ScanController(seed=1), env, T=40, reward_kind="in_iou")
    pred = log.pred_masks()
    truth = log.truth_masks()
    for t in range(40):
        assert log.rewards[t] == iou_instant(pred[t], truth[t])


def test_db_iou_rewards(spec_a):
    env = sample_environment(spec_a, 9)
    log = run_episode(ScanController(seed=1), env, T=40, reward_kind="db_iou",
                      block_n=5)
    pred = log.pred_masks()
    truth = log.truth_masks()
    assert np.all(log.rewards[:5] == 0.0)
    for t in range(5, 40):
        expected = (iou_block(pred[: t + 1], truth[: t + 1], 6)
                    - iou_block(pred[: t + 1], truth[: t + 1], 5))
        assert log.rewards[t] == pytest.approx(expected)


def test_nonstationary_env_advances_inside_episode(spec_a):
    import dataclasses
    from specmon.env import IntRange
    spec = dataclasses.replace(spec_a, number=IntRange(1, 1), change_prob=1.0)
    env = sample_environment(spec, 4)
    log = run_episode(ScanController(seed=0), env, T=30)
    active = np.flatnonzero(log.truths.sum(axis=0))
    # With a re-draw every step the active bands spread far beyond one pair.
    assert len(active) > 4


def test_episode_log_csv(tmp_path, spec_a):
    env = sample_environment(spec_a, 2)
    log = run_episode(ScanController(seed=0), env, T=10)
    path = tmp_path / "episode.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:4] == ["t", "action", "obs", "reward"]
    assert len(lines) == 11
    assert len(lines[1].split(",")) == 4 + 2 * env.n_bands
