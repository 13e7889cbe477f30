"""Signal controllers: fixed baselines and trainable Q / actor-critic agents."""

from .actor_critic import ACNet, actor_critic_update, build_acnet
from .baselines import ActionMatrix, act_auction_nash, act_fixed, act_random, auction_scores
from .config import AgentConfig
from .dqn import QNet, build_qnet, epsilon_at, select_action, sync_target, td_update
from .networks import QNetworkSpec, count_parameters, forward as q_forward
from .replay import Batch, ReplayBuffer, Transition
from .training import TrainResult, make_controller, rollout, train

__all__ = [
    "ACNet", "ActionMatrix", "AgentConfig", "Batch", "QNet", "QNetworkSpec", "ReplayBuffer",
    "TrainResult", "Transition", "act_auction_nash", "act_fixed", "act_random",
    "actor_critic_update", "auction_scores", "build_acnet", "build_qnet", "count_parameters",
    "epsilon_at", "make_controller", "q_forward", "rollout", "select_action", "sync_target",
    "td_update", "train",
]
