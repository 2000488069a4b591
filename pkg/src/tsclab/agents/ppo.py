"""PPO actor-critic (clipped surrogate, GAE, entropy bonus)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..nn import (AdamState, Mlp, adam_from_dict, adam_step, adam_to_dict, clip_grads, mlp_from_dict,
                  mlp_to_dict, softmax)
from .dqn import AgentConfig, default_hidden, kl_safety_term


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gae(rewards, values, last_value: float, terminals, gamma: float, lam: float):
    """Generalised advantage estimates and bootstrapped returns."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nxt = last_value if t == n - 1 else values[t + 1]
        nonterm = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * nxt * nonterm - values[t]
        running = delta + gamma * lam * nonterm * running
        adv[t] = running
    return adv, adv + np.asarray(values)


def surrogate_loss(logits, actions, old_logp, advantages, clip: float, entropy_coef: float):
    """Clipped-surrogate policy loss (to minimise) and its gradient w.r.t. logits."""
    n = len(actions)
    rows = np.arange(n)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    use_unclipped = unclipped_obj <= clipped_obj
    obj = np.where(use_unclipped, unclipped_obj, clipped_obj)
    ent = -(probs * logp_all).sum(axis=1)
    loss = -obj.mean() - entropy_coef * ent.mean()
    onehot = np.zeros_like(logits)
    onehot[rows, actions] = 1.0
    d_ratio = np.where(use_unclipped, -advantages / n, 0.0)
    g = (d_ratio * ratio)[:, None] * (onehot - probs)
    # d(-c * H)/dz_j = c * p_j (log p_j + H)
    g += entropy_coef / n * probs * (logp_all + ent[:, None])
    return float(loss), g


@dataclass
class Rollout:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    logps: list = field(default_factory=list)
    values: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    last_value: list = field(default_factory=list)  # per segment end
    ends: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


class PPOAgent:
    kind = "ppo"

    def __init__(self, state_len: int, n_actions: int, cfg: AgentConfig, seed: int, embed_dim: int = 0):
        if embed_dim:
            raise ValueError("the PPO agent does not take a safety embedding")
        self.cfg = cfg
        self.state_len = state_len
        self.n_actions = n_actions
        self.rng = np.random.default_rng([seed, 1])
        init = np.random.default_rng([seed, 2])
        hidden = list(cfg.hidden) if cfg.hidden else default_hidden(state_len)
        self.actor = Mlp.build([state_len] + hidden + [n_actions], init)
        self.critic = Mlp.build([state_len] + hidden + [1], init)
        self.opt_actor = AdamState.for_params(self.actor.params(), lr=cfg.ppo_lr)
        self.opt_critic = AdamState.for_params(self.critic.params(), lr=cfg.ppo_lr)
        self.rollout = Rollout()
        self.env_steps = 0
        self.updates = 0
        self.uses_flags = False

    def epsilon(self) -> float:
        return float("nan")

    def advantages(self, state, flags=None) -> np.ndarray:
        """Policy logits play the role of the advantage vector for the safety terms."""
        return self.actor.forward(np.atleast_2d(state))[0]

    def q_values(self, state, flags=None) -> np.ndarray:
        return self.advantages(state)

    def act(self, state, flags=None, greedy: bool = False) -> int:
        logits = self.advantages(state)
        if greedy:
            return int(np.argmax(logits))
        p = softmax(logits)
        a = int(min(np.searchsorted(np.cumsum(p), self.rng.random(), side="right"), len(p) - 1))
        self._pending = (float(log_softmax(logits[None])[0, a]),
                         float(self.critic.forward(np.atleast_2d(state))[0, 0]))
        return a

    def remember(self, state, action, reward, next_state, terminal, flags=None, next_flags=None):
        logp, value = self._pending
        r = self.rollout
        r.states.append(np.asarray(state, dtype=np.float64))
        r.actions.append(int(action))
        r.rewards.append(reward / self.cfg.reward_scale)
        r.terminals.append(bool(terminal))
        r.logps.append(logp)
        r.values.append(value)
        r.flags.append(np.zeros(self.n_actions, bool) if flags is None else np.asarray(flags, bool))
        self.env_steps += 1

    def end_episode(self, last_state, terminal: bool) -> None:
        last = 0.0 if terminal else float(self.critic.forward(np.atleast_2d(last_state))[0, 0])
        self.rollout.ends.append(len(self.rollout))
        self.rollout.last_value.append(last)

    def ready(self) -> bool:
        return len(self.rollout.ends) >= self.cfg.rollout_episodes

    def learn(self, lam1: float = 1.0, lam2: float = 0.0):
        if not self.ready() or not len(self.rollout):
            return None
        c = self.cfg
        r = self.rollout
        adv_parts, ret_parts = [], []
        start = 0
        for end, last in zip(r.ends, r.last_value):
            a, ret = gae(r.rewards[start:end], r.values[start:end], last, r.terminals[start:end],
                         c.gamma, c.gae_lambda)
            adv_parts.append(a)
            ret_parts.append(ret)
            start = end
        adv = np.concatenate(adv_parts)
        ret = np.concatenate(ret_parts)
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
        states = np.array(r.states)
        actions = np.array(r.actions)
        old_logp = np.array(r.logps)
        flags = np.array(r.flags)
        stats = self.update(states, actions, old_logp, adv, ret, flags, lam2)
        self.rollout = Rollout()
        return stats

    def update(self, states, actions, old_logp, adv, ret, flags=None, lam2: float = 0.0):
        c = self.cfg
        n = len(actions)
        if n == 0:
            raise ValueError("empty PPO batch")
        last = {}
        for _ in range(c.ppo_epochs):
            order = self.rng.permutation(n)
            for s in range(0, n, c.ppo_minibatch):
                idx = order[s:s + c.ppo_minibatch]
                logits = self.actor.forward(states[idx])
                loss, g = surrogate_loss(logits, actions[idx], old_logp[idx], adv[idx], c.clip_ratio,
                                         c.entropy_coef)
                kl = 0.0
                if lam2 > 0.0 and flags is not None:
                    kls, gk = kl_safety_term(logits, flags[idx], actions[idx])
                    kl = float(kls.mean())
                    g = g + lam2 * gk / len(idx)
                ga, _ = self.actor.backward(g)
                v = self.critic.forward(states[idx])[:, 0]
                dv = c.value_coef * 2.0 * (v - ret[idx]) / len(idx)
                gc, _ = self.critic.backward(dv[:, None])
                adam_step(self.actor.params(), clip_grads(ga, c.grad_clip), self.opt_actor)
                adam_step(self.critic.params(), clip_grads(gc, c.grad_clip), self.opt_critic)
                last = {"policy_loss": loss, "kl": kl,
                        "value_loss": float(np.mean((v - ret[idx]) ** 2))}
        self.updates += 1
        return last

    def state_dict(self) -> dict:
        return {"kind": self.kind, "config": asdict(self.cfg), "state_len": self.state_len,
                "n_actions": self.n_actions, "actor": mlp_to_dict(self.actor),
                "critic": mlp_to_dict(self.critic), "adam_actor": adam_to_dict(self.opt_actor),
                "adam_critic": adam_to_dict(self.opt_critic), "env_steps": self.env_steps,
                "updates": self.updates, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, blob: dict) -> None:
        if blob.get("kind") != self.kind:
            raise ValueError(f"checkpoint holds a {blob.get('kind')!r} agent, expected {self.kind!r}")
        actor = mlp_from_dict(blob["actor"])
        if actor.sizes != self.actor.sizes:
            raise ValueError("checkpoint architecture does not match the configured agent")
        self.actor = actor
        self.critic = mlp_from_dict(blob["critic"])
        self.opt_actor = adam_from_dict(blob["adam_actor"])
        self.opt_critic = adam_from_dict(blob["adam_critic"])
        self.env_steps = blob["env_steps"]
        self.updates = blob["updates"]
        self.rng.bit_generator.state = blob["rng"]
