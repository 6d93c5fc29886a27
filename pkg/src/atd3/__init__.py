"""Attention-based twin-delayed actor-critic modelling of car-following behaviour."""

from .agent import TrainConfig, train
from .baselines import GaConfig, IdmParams, calibrate_ga, idm_accel
from .env import FollowEpisode, StateWindow, kinematic_update, reset, reward, step
from .evaluation import attention_summary, compare, rmspe, rollout

__version__ = "0.1.0"
