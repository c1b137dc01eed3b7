"""Off-policy learning: reward assignment, replay, SAC, behavior cloning."""

from .bc import BcConfig, BcLearner
from .replay import ReplayBuffer
from .rewards import RewardConfig, Trajectory, assign_rewards
from .sac import SacConfig, SacLearner
from .driver import TrainResult, finetune_loop, finetune_should_stop, pretrain
from .service import LearnerService, OnlineConfig, OnlineResult

__all__ = [
    "BcConfig", "BcLearner", "LearnerService", "OnlineConfig", "OnlineResult",
    "ReplayBuffer", "RewardConfig", "Trajectory", "TrainResult",
    "assign_rewards", "SacConfig", "SacLearner",
    "finetune_loop", "finetune_should_stop", "pretrain",
]
