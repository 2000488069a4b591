"""Safety-integration variants and multi-objective baselines.

``Controller`` glues an agent, a variant config and the safety model into
the per-decision loop used by training and evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import safety
from .agents.dqn import DQNAgent, SynQAgent
from .agents.ppo import PPOAgent
from .env import SignalEnv, TickShield
from .nn import kl_to_softmax


# -- pure pieces ---------------------------------------------------------------

def act_filter(action: int, verdict: safety.SafetyVerdict) -> int:
    return safety.correct_action(action, verdict)


def safety_kl(flags, advantages, action: int) -> float:
    target = safety.desired_distribution(flags, advantages, action)
    value, _ = kl_to_softmax(target, advantages)
    return value


def shaped_reward(r: float, flags, advantages, action: int, lam_shaping: float) -> float:
    """r - lam * KL(A_hat || softmax(A)); equals r exactly for a safe action."""
    if lam_shaping == 0.0 or not bool(np.asarray(flags)[action]):
        return r
    return r - lam_shaping * safety_kl(flags, advantages, action)


def syn_r_reward(r_mobility: float, r_safety: float, w1: float, w2: float) -> float:
    return w1 * r_mobility + w2 * r_safety


def safety_reward(n_collisions: int, penalty: float = 1000.0) -> float:
    return -penalty * n_collisions


def augmented_state(base, flags, embedding) -> np.ndarray:
    """concat(base, relu(flags W_e + b_e)); ``embedding=None`` or m=0 leaves base as is."""
    base = np.asarray(base, dtype=np.float64)
    if embedding is None or embedding.output_dim == 0:
        return base
    return np.concatenate([base, embedding.forward(np.asarray(flags, dtype=np.float64))])


def loss_with_safety(net, states, actions, targets, weights, flags, lam1: float, lam2: float):
    """J = lam1 * mean(w * (y - Q(s,a))^2) + lam2 * mean KL(A_hat || softmax(A)).

    Returns (loss, mse, kl, grads) for a dueling network; A_hat is treated as
    a fixed target.
    """
    from .agents.dqn import kl_safety_term
    q, _, adv = net.forward(states, flags if net.embed is not None else None)
    n = len(actions)
    rows = np.arange(n)
    td = targets - q[rows, actions]
    mse = float(np.mean(weights * td * td))
    dq = np.zeros_like(q)
    dq[rows, actions] = -2.0 * lam1 * weights * td / n
    kl, da = 0.0, None
    if lam2 > 0.0:
        kls, g = kl_safety_term(adv, flags, actions)
        kl = float(kls.mean())
        da = lam2 * g / n
    grads = net.backward(dq, da)
    return lam1 * mse + lam2 * kl, mse, kl, grads


# -- episode driver -------------------------------------------------------------

def make_agent(run, state_len: int, n_actions: int, seed: int):
    v = run.variant
    if run.backbone == "ppo":
        return PPOAgent(state_len, n_actions, run.agent, seed)
    if v.variant == "syn_q":
        return SynQAgent(state_len, n_actions, run.agent, seed, v.u1, v.u2)
    return DQNAgent(state_len, n_actions, run.agent, seed,
                    embed_dim=v.embedding_dim if v.uses_embedding else 0)


@dataclass
class EpisodeLog:
    reward: float = 0.0
    decisions: int = 0
    corrected: int = 0
    intervened: int = 0
    shield_ticks: int = 0
    violations: int = 0
    kl_checks: list = None  # (all_safe, kl, n_safe, kl_safe_max) per learning batch
    losses: list = None


class Controller:
    """Runs decisions for one variant on one environment."""

    def __init__(self, run, env: SignalEnv, agent=None):
        self.run = run
        self.v = run.variant
        self.env = env
        self.agent = agent
        self.rules = safety.rules_from_config(self.v.rules)
        if self.v.filter_on and self.v.tick_shield:
            env.shield = TickShield(self.rules)
        else:
            env.shield = None

    def verdict(self):
        obs = self.env.safety_observation()
        return safety.evaluate(self.rules, obs, self.env.actions)

    def _flags(self, verdict):
        return verdict.unsafe_flags if verdict is not None else None

    def _reward(self, info) -> float:
        if self.run.reward == "lane":
            from .sim.encoders import encode_lanes
            return -float(encode_lanes(self.env.sim).sum())
        return -info.waiting_s

    def run_episode(self, seed: int, learn: bool, greedy: bool) -> EpisodeLog:
        env, agent, v = self.env, self.agent, self.v
        log = EpisodeLog(kl_checks=[], losses=[])
        obs = env.reset(seed)
        if v.variant == "fixed_time":
            while not env.done:
                env.step(0)
                log.decisions += 1
            log.violations = env.violations
            return log
        verdict = self.verdict() if v.needs_safety else None
        flags = self._flags(verdict)
        while not env.done:
            proposed = agent.act(obs, flags, greedy=greedy)
            executed = act_filter(proposed, verdict) if v.filter_on else proposed
            shaped_adv = agent.advantages(obs, flags) if (learn and v.uses_shaping) else None
            obs2, r, done, info = env.step(executed)
            r_env = self._reward(info)
            n_coll = len(info.collisions)
            log.decisions += 1
            log.corrected += int(executed != proposed)
            log.intervened += int(executed != proposed or info.shield_fired > 0)
            log.reward += r_env
            next_verdict = self.verdict() if (v.needs_safety and not done) else verdict
            next_flags = self._flags(next_verdict)
            if learn:
                r_train = r_env
                if v.uses_shaping:
                    r_train = shaped_reward(r_env, flags, shaped_adv, proposed, v.lam_shaping)
                elif v.variant == "syn_r":
                    r_train = syn_r_reward(r_env, safety_reward(n_coll, v.collision_penalty), v.w1, v.w2)
                if v.variant == "syn_q":
                    agent.remember(obs, executed, r_train, obs2, False,
                                   safety_reward=safety_reward(n_coll, v.collision_penalty))
                else:
                    agent.remember(obs, executed, r_train, obs2, False, flags, next_flags)
                if not isinstance(agent, PPOAgent):
                    for _ in range(self.run.agent.updates_per_step):
                        stats = agent.learn(v.lam1, v.lam2 if v.uses_loss else 0.0)
                        if stats is not None:
                            log.losses.append(stats.loss)
                            if v.uses_loss:
                                log.kl_checks.append((stats.all_safe, stats.kl, stats.n_safe,
                                                      stats.kl_safe_max))
            obs, verdict, flags = obs2, next_verdict, next_flags
        if learn and isinstance(agent, PPOAgent):
            agent.end_episode(obs, terminal=False)
            stats = agent.learn(v.lam1, v.lam2 if v.uses_loss else 0.0)
            if stats:
                log.losses.append(stats["policy_loss"])
        log.shield_ticks = env.shield_ticks
        log.violations = env.violations
        return log
