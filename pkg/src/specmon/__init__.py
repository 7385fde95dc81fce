"""specmon: RF spectrum monitoring sandbox.

Simulated multi-signal spectrum environments, partially observing
controllers (hand-coded and learned), IoU-family scoring, and
experience-feedback retraining from budget-limited field deployments.
"""

__version__ = "0.1.0"

from .env import (BandVector, EnvSpec, EnvironmentInstance, IntRange,
                  Observation, SignalPair, SpecValidationError, load_spec,
                  parse_spec, sample_environment, validate_spec)
from .harness import EpisodeLog, History, run_episode
from .metrics import (IoUConfig, iou_block, iou_cumulative, iou_diff_block,
                      iou_instant, wbce_loss)

__all__ = [
    "__version__",
    "BandVector", "EnvSpec", "EnvironmentInstance", "IntRange", "Observation",
    "SignalPair", "SpecValidationError", "load_spec", "parse_spec",
    "sample_environment", "validate_spec",
    "EpisodeLog", "History", "run_episode",
    "IoUConfig", "iou_block", "iou_cumulative", "iou_diff_block", "iou_instant",
    "wbce_loss",
]
