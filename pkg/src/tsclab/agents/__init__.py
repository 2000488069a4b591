from .dqn import (AgentConfig, DQNAgent, DuelingQNet, SynQAgent, advantage_distribution,
                  double_q_target, select_action_dqn, syn_q_select)
from .ppo import PPOAgent, gae, surrogate_loss
from .replay import PrioritizedReplayBuffer, SumTree

__all__ = ["AgentConfig", "DQNAgent", "DuelingQNet", "SynQAgent", "advantage_distribution",
           "double_q_target", "select_action_dqn", "syn_q_select", "PPOAgent", "gae",
           "surrogate_loss", "PrioritizedReplayBuffer", "SumTree"]
