"""Dueling double DQN with proportional prioritized replay (3DQN)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..nn import (AdamState, Mlp, adam_from_dict, adam_step, adam_to_dict, clip_grads,
                  kl_to_softmax, mlp_from_dict, mlp_to_dict, soft_sync, softmax)
from .replay import PrioritizedReplayBuffer


@dataclass
class AgentConfig:
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20000
    lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 20000
    target_sync: int = 500
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    beta_steps: int = 20000
    priority_eps: float = 1e-3
    reward_scale: float = 100.0
    learn_start: int = 64
    updates_per_step: int = 1
    grad_clip: float = 10.0
    hidden: list = field(default_factory=list)  # empty -> size-based default
    # PPO extras
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    ppo_epochs: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    ppo_lr: float = 3e-4
    ppo_minibatch: int = 64
    rollout_episodes: int = 1

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.gamma <= 1.0:
            errs.append("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0, 1]")
        for name in ("batch_size", "buffer_capacity", "target_sync", "eps_decay_steps", "ppo_epochs",
                     "ppo_minibatch", "rollout_episodes", "updates_per_step"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.batch_size > self.buffer_capacity:
            errs.append("batch_size exceeds buffer_capacity")
        for name in ("lr", "ppo_lr", "reward_scale", "priority_eps"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be positive")
        if not 0.0 < self.clip_ratio < 1.0:
            errs.append("clip_ratio must lie in (0, 1)")
        return errs


def default_hidden(state_len: int) -> list[int]:
    """Grid-sized inputs get a 256-unit layer before the two 128-unit layers."""
    return [256, 128, 128] if state_len > 200 else [128, 128]


def select_action_dqn(q, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def double_q_target(rewards, terminals, q_next_online, q_next_target, gamma: float) -> np.ndarray:
    """r + gamma * Q_target(s', argmax_a Q_online(s', a)); just r at terminals."""
    rewards = np.asarray(rewards, dtype=np.float64)
    a_star = np.argmax(q_next_online, axis=1)
    boot = q_next_target[np.arange(len(a_star)), a_star]
    return rewards + gamma * np.where(terminals, 0.0, boot)


class DuelingQNet:
    """Trunk MLP, value head V(s), advantage head A(s, .), Q = V + A - mean(A).

    With ``embed_dim > 0`` a one-layer ReLU embedding of the per-action
    unsafe flags is concatenated to the state before the trunk.
    """

    def __init__(self, trunk: Mlp, value: Mlp, adv: Mlp, embed: Mlp | None = None):
        self.trunk, self.value, self.adv, self.embed = trunk, value, adv, embed

    @classmethod
    def build(cls, state_len: int, n_actions: int, rng: np.random.Generator, hidden=None,
              embed_dim: int = 0) -> "DuelingQNet":
        hidden = list(hidden) if hidden else default_hidden(state_len)
        embed = Mlp.build([n_actions, embed_dim], rng, output="relu") if embed_dim > 0 else None
        trunk = Mlp.build([state_len + embed_dim] + hidden, rng, output="relu")
        value = Mlp.build([hidden[-1], 1], rng)
        adv = Mlp.build([hidden[-1], n_actions], rng)
        return cls(trunk, value, adv, embed)

    @property
    def n_actions(self) -> int:
        return self.adv.output_dim

    @property
    def embed_dim(self) -> int:
        return self.embed.output_dim if self.embed is not None else 0

    def parts(self) -> list[Mlp]:
        return ([self.embed] if self.embed is not None else []) + [self.trunk, self.value, self.adv]

    def params(self) -> list[np.ndarray]:
        return [p for part in self.parts() for p in part.params()]

    def copy(self) -> "DuelingQNet":
        return DuelingQNet(self.trunk.copy(), self.value.copy(), self.adv.copy(),
                           self.embed.copy() if self.embed is not None else None)

    def sync_into(self, target: "DuelingQNet", tau=None) -> None:
        for src, dst in zip(self.parts(), target.parts()):
            soft_sync(src, dst, tau)

    def forward(self, states, flags=None):
        """Returns (Q, V, A) for a batch (2-D) of states."""
        x = np.asarray(states, dtype=np.float64)
        if self.embed is not None:
            if flags is None:
                raise ValueError("this network needs safety flags")
            e = self.embed.forward(np.asarray(flags, dtype=np.float64))
            x = np.concatenate([x, e], axis=-1)
        h = self.trunk.forward(x)
        v = self.value.forward(h)
        a = self.adv.forward(h)
        q = v + a - a.mean(axis=-1, keepdims=True)
        return q, v[..., 0], a

    def backward(self, dq, da_extra=None) -> list[np.ndarray]:
        """Parameter gradients given dL/dQ (and optionally an extra dL/dA)."""
        dq = np.asarray(dq, dtype=np.float64)
        dv = dq.sum(axis=-1, keepdims=True)
        da = dq - dq.mean(axis=-1, keepdims=True)
        if da_extra is not None:
            da = da + da_extra
        gv, hv = self.value.backward(dv)
        ga, ha = self.adv.backward(da)
        gt, dx = self.trunk.backward(hv + ha)
        grads = []
        if self.embed is not None:
            ge, _ = self.embed.backward(dx[..., -self.embed_dim:])
            grads += ge
        return grads + gt + gv + ga

    def to_dict(self) -> dict:
        return {"trunk": mlp_to_dict(self.trunk), "value": mlp_to_dict(self.value),
                "adv": mlp_to_dict(self.adv),
                "embed": mlp_to_dict(self.embed) if self.embed is not None else None}

    @classmethod
    def from_dict(cls, blob) -> "DuelingQNet":
        emb = mlp_from_dict(blob["embed"]) if blob.get("embed") else None
        return cls(mlp_from_dict(blob["trunk"]), mlp_from_dict(blob["value"]), mlp_from_dict(blob["adv"]), emb)


def advantage_distribution(net: DuelingQNet, state, flags=None) -> np.ndarray:
    _, _, a = net.forward(np.atleast_2d(state), None if flags is None else np.atleast_2d(flags))
    return softmax(a[0])


@dataclass
class LearnStats:
    loss: float
    mse: float
    kl: float
    all_safe: bool
    td_abs_mean: float
    n_safe: int = 0  # samples whose action is safe
    kl_safe_max: float = 0.0  # largest per-sample KL among those samples


def kl_safety_term(advantages, flags, actions, floor: float = 1e-6):
    """Per-sample KL(A_hat || softmax(A)) and its gradient w.r.t. A (A_hat held fixed)."""
    from ..safety import desired_distribution
    n = len(actions)
    values = np.zeros(n)
    grads = np.zeros_like(advantages)
    for i in range(n):
        target = desired_distribution(flags[i], advantages[i], int(actions[i]), floor)
        values[i], grads[i] = kl_to_softmax(target, advantages[i], floor)
    return values, grads


class DQNAgent:
    """3DQN learner.  ``self.rng`` drives exploration and replay sampling."""

    kind = "dqn"

    def __init__(self, state_len: int, n_actions: int, cfg: AgentConfig, seed: int, embed_dim: int = 0):
        self.cfg = cfg
        self.state_len = state_len
        self.n_actions = n_actions
        self.rng = np.random.default_rng([seed, 1])
        init_rng = np.random.default_rng([seed, 2])
        self.online = DuelingQNet.build(state_len, n_actions, init_rng, cfg.hidden, embed_dim)
        self.target = self.online.copy()
        self.opt = AdamState.for_params(self.online.params(), lr=cfg.lr)
        self.buffer = PrioritizedReplayBuffer(
            cfg.buffer_capacity, state_len, cfg.alpha, cfg.priority_eps,
            extras={"flags": ((n_actions,), bool), "next_flags": ((n_actions,), bool)})
        self.env_steps = 0
        self.updates = 0

    @property
    def uses_flags(self) -> bool:
        return self.online.embed is not None

    def epsilon(self) -> float:
        c = self.cfg
        frac = min(1.0, self.env_steps / c.eps_decay_steps)
        return c.eps_start + frac * (c.eps_end - c.eps_start)

    def beta(self) -> float:
        c = self.cfg
        frac = min(1.0, self.updates / max(1, c.beta_steps))
        return c.beta_start + frac * (c.beta_end - c.beta_start)

    def q_values(self, state, flags=None) -> np.ndarray:
        q, _, _ = self.online.forward(np.atleast_2d(state),
                                      np.atleast_2d(flags) if self.uses_flags else None)
        return q[0]

    def advantages(self, state, flags=None) -> np.ndarray:
        _, _, a = self.online.forward(np.atleast_2d(state),
                                      np.atleast_2d(flags) if self.uses_flags else None)
        return a[0]

    def act(self, state, flags=None, greedy: bool = False) -> int:
        eps = 0.0 if greedy else self.epsilon()
        return select_action_dqn(self.q_values(state, flags), eps, self.rng)

    def remember(self, state, action, reward, next_state, terminal, flags=None, next_flags=None):
        n = self.n_actions
        self.buffer.add(state, action, reward / self.cfg.reward_scale, next_state, terminal,
                        flags=np.zeros(n, bool) if flags is None else flags,
                        next_flags=np.zeros(n, bool) if next_flags is None else next_flags)
        self.env_steps += 1

    def ready(self) -> bool:
        return len(self.buffer) >= max(self.cfg.batch_size, self.cfg.learn_start)

    def learn(self, lam1: float = 1.0, lam2: float = 0.0) -> LearnStats | None:
        """One prioritized, importance-weighted double-Q update (plus the
        optional KL safety term).  Returns None while the buffer is too small."""
        if not self.ready():
            return None
        c = self.cfg
        b = self.buffer.sample(c.batch_size, self.beta(), self.rng)
        flags = b.extras["flags"] if self.uses_flags else None
        nflags = b.extras["next_flags"] if self.uses_flags else None
        q_next_target, _, _ = self.target.forward(b.next_states, nflags)
        q_next_online, _, _ = self.online.forward(b.next_states, nflags)
        y = double_q_target(b.rewards, b.terminals, q_next_online, q_next_target, c.gamma)
        q, _, adv = self.online.forward(b.states, flags)
        n = len(b.actions)
        rows = np.arange(n)
        td = y - q[rows, b.actions]
        mse = float(np.mean(b.weights * td * td))
        dq = np.zeros_like(q)
        dq[rows, b.actions] = -2.0 * lam1 * b.weights * td / n
        kl = 0.0
        da = None
        safe = ~b.extras["flags"][rows, b.actions]
        all_safe = bool(safe.all())
        kl_safe_max = 0.0
        if lam2 > 0.0:
            kls, g = kl_safety_term(adv, b.extras["flags"], b.actions)
            kl = float(kls.mean())
            kl_safe_max = float(np.abs(kls[safe]).max()) if safe.any() else 0.0
            da = lam2 * g / n
        grads = self.online.backward(dq, da)
        if c.grad_clip > 0:
            grads = clip_grads(grads, c.grad_clip)
        adam_step(self.online.params(), grads, self.opt)
        self.buffer.update_priorities(b.idx, td)
        self.updates += 1
        if self.updates % c.target_sync == 0:
            self.online.sync_into(self.target)
        return LearnStats(lam1 * mse + lam2 * kl, mse, kl, all_safe, float(np.mean(np.abs(td))),
                          int(safe.sum()), kl_safe_max)

    # -- checkpoints ----------------------------------------------------------
    def state_dict(self) -> dict:
        return {"kind": self.kind, "config": asdict(self.cfg), "state_len": self.state_len,
                "n_actions": self.n_actions, "online": self.online.to_dict(),
                "target": self.target.to_dict(), "adam": adam_to_dict(self.opt),
                "env_steps": self.env_steps, "updates": self.updates,
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, blob: dict) -> None:
        if blob.get("kind") != self.kind:
            raise ValueError(f"checkpoint holds a {blob.get('kind')!r} agent, expected {self.kind!r}")
        online = DuelingQNet.from_dict(blob["online"])
        if [m.sizes for m in online.parts()] != [m.sizes for m in self.online.parts()]:
            raise ValueError("checkpoint architecture does not match the configured agent")
        self.online = online
        self.target = DuelingQNet.from_dict(blob["target"])
        self.opt = adam_from_dict(blob["adam"])
        self.env_steps = blob["env_steps"]
        self.updates = blob["updates"]
        self.rng.bit_generator.state = blob["rng"]


class SynQAgent:
    """Two independent dueling learners (mobility, safety); acts on u1*Qm + u2*Qs."""

    kind = "synq"

    def __init__(self, state_len: int, n_actions: int, cfg: AgentConfig, seed: int,
                 u1: float = 0.5, u2: float = 0.5):
        self.mobility = DQNAgent(state_len, n_actions, cfg, seed)
        self.safety = DQNAgent(state_len, n_actions, cfg, seed + 7919)
        self.u1, self.u2 = u1, u2
        self.rng = self.mobility.rng
        self.n_actions = n_actions
        self.uses_flags = False

    def epsilon(self) -> float:
        return self.mobility.epsilon()

    def q_values(self, state, flags=None) -> np.ndarray:
        return self.u1 * self.mobility.q_values(state) + self.u2 * self.safety.q_values(state)

    def advantages(self, state, flags=None) -> np.ndarray:
        return self.u1 * self.mobility.advantages(state) + self.u2 * self.safety.advantages(state)

    def act(self, state, flags=None, greedy: bool = False) -> int:
        return syn_q_select(self.mobility.q_values(state), self.safety.q_values(state), self.u1,
                            self.u2, 0.0 if greedy else self.epsilon(), self.rng)

    def remember(self, state, action, reward, next_state, terminal, safety_reward=0.0, **_):
        self.mobility.remember(state, action, reward, next_state, terminal)
        self.safety.remember(state, action, safety_reward, next_state, terminal)

    def learn(self, lam1: float = 1.0, lam2: float = 0.0):
        s1 = self.mobility.learn()
        self.safety.learn()
        return s1

    def state_dict(self) -> dict:
        return {"kind": self.kind, "u": [self.u1, self.u2], "mobility": self.mobility.state_dict(),
                "safety": self.safety.state_dict()}

    def load_state_dict(self, blob: dict) -> None:
        if blob.get("kind") != self.kind:
            raise ValueError(f"checkpoint holds a {blob.get('kind')!r} agent, expected {self.kind!r}")
        self.mobility.load_state_dict(blob["mobility"])
        self.safety.load_state_dict(blob["safety"])


def syn_q_select(q_mobility, q_safety, u1: float, u2: float, eps: float = 0.0,
                 rng: np.random.Generator | None = None) -> int:
    q = u1 * np.asarray(q_mobility, dtype=np.float64) + u2 * np.asarray(q_safety, dtype=np.float64)
    if eps > 0.0:
        return select_action_dqn(q, eps, rng)
    return int(np.argmax(q))
