import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsclab.agents import (AgentConfig, DQNAgent, DuelingQNet, PPOAgent, PrioritizedReplayBuffer,
                           SynQAgent, double_q_target, select_action_dqn, syn_q_select)
from tsclab.agents.dqn import kl_safety_term
from tsclab.agents.ppo import gae, log_softmax, surrogate_loss
from tsclab.agents.replay import SumTree
from tsclab.nn import kl_divergence, softmax
from tsclab.safety import desired_distribution


def chi2_sf(x, k):
    """Survival function of the chi-square distribution via the regularised gamma."""
    from math import exp, lgamma, log
    a, z = k / 2.0, x / 2.0
    # series for the lower incomplete gamma
    term = total = 1.0 / a
    n = 1
    while abs(term) > 1e-15 * abs(total):
        term *= z / (a + n)
        total += term
        n += 1
    lower = total * exp(-z + a * log(z) - lgamma(a))
    return max(0.0, 1.0 - lower)


# -- selection / targets -------------------------------------------------------------

def test_greedy_is_argmax_with_lowest_tie():
    rng = np.random.default_rng(0)
    assert select_action_dqn(np.array([1.0, 3.0, 3.0]), 0.0, rng) == 1


def test_epsilon_frequency():
    rng = np.random.default_rng(1)
    q = np.array([0.0, 1.0, 0.0, 0.0])
    n = 40_000
    picks = np.bincount([select_action_dqn(q, 0.2, rng) for _ in range(n)], minlength=4)
    # non-greedy actions each get eps/4
    for a in (0, 2, 3):
        assert abs(picks[a] / n - 0.05) < 0.006
    assert abs(picks[1] / n - 0.85) < 0.01


def test_double_q_hand_example():
    y = double_q_target([1.0], [False], np.array([[0.2, 0.5]]), np.array([[0.3, 0.1]]), 0.9)
    assert y[0] == 1 + 0.9 * 0.1
    y = double_q_target([1.0], [True], np.array([[0.2, 0.5]]), np.array([[0.3, 0.1]]), 0.9)
    assert y[0] == 1.0


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_double_q_per_element(seed):
    rng = np.random.default_rng(seed)
    n, k = 7, 5
    r, term = rng.normal(size=n), rng.random(n) < 0.3
    qo, qt = rng.normal(size=(n, k)), rng.normal(size=(n, k))
    y = double_q_target(r, term, qo, qt, 0.95)
    for i in range(n):
        want = r[i] if term[i] else r[i] + 0.95 * qt[i, int(np.argmax(qo[i]))]
        assert y[i] == want


# -- dueling network -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_dueling_identity(seed):
    rng = np.random.default_rng(seed)
    net = DuelingQNet.build(6, 5, rng, hidden=[8, 8])
    x = rng.normal(size=(4, 6))
    q, v, a = net.forward(x)
    assert np.max(np.abs(q - (v[:, None] + a - a.mean(axis=1, keepdims=True)))) <= 1e-9
    # argmax of Q equals argmax of A
    assert np.array_equal(q.argmax(axis=1), a.argmax(axis=1))


@pytest.mark.parametrize("seed", range(100))
def test_dueling_gradients_fd(seed):
    rng = np.random.default_rng(seed)
    embed = 3 if seed % 2 else 0
    net = DuelingQNet.build(4, 3, rng, hidden=[6, 5], embed_dim=embed)
    for p in net.params():
        p += rng.normal(scale=0.05, size=p.shape)
    x = rng.normal(size=(3, 4))
    f = (rng.random((3, 3)) < 0.5).astype(float) if embed else None
    up, upa = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    def loss():
        q, _, a = net.forward(x, f)
        return float(np.sum(q * up) + np.sum(a * upa))

    net.forward(x, f)
    grads = net.backward(up, upa)
    h = 1e-5
    for p, g in zip(net.params(), grads):
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = loss()
            p[i] = old - h
            fm = loss()
            p[i] = old
            num[i] = (fp - fm) / (2 * h)
        err = np.abs(g - num) / np.maximum(1e-8, np.abs(g) + np.abs(num))
        assert np.all((err <= 1e-4) | (np.abs(g - num) <= 1e-9))


def test_kl_term_zero_when_safe_and_grad_matches():
    rng = np.random.default_rng(3)
    adv = rng.normal(size=(5, 4))
    flags = np.zeros((5, 4), bool)
    vals, g = kl_safety_term(adv, flags, np.zeros(5, int))
    assert np.all(vals == 0.0) and np.allclose(g, 0.0, atol=1e-12)
    flags[:, 0] = True
    vals, _ = kl_safety_term(adv, flags, np.zeros(5, int))
    for i in range(5):
        target = desired_distribution(flags[i], adv[i], 0)
        assert vals[i] == pytest.approx(kl_divergence(target, softmax(adv[i]))[0], abs=1e-12)
        assert vals[i] > 0


# -- prioritized replay ----------------------------------------------------------------

def test_sumtree_total_and_find():
    t = SumTree(5)
    for i, m in enumerate([1.0, 2.0, 0.0, 3.0, 4.0]):
        t.set(i, m)
    assert t.total == 10.0
    assert [t.find(u) for u in (0.0, 0.99, 1.0, 2.99, 3.0, 5.99, 6.0, 9.99)] == [0, 0, 1, 1, 3, 3, 4, 4]


def test_replay_probabilities_follow_alpha():
    buf = PrioritizedReplayBuffer(8, 2, alpha=0.6)
    prios = [1.0, 2.0, 4.0, 0.5]
    for p in prios:
        buf.add(np.zeros(2), 0, 0.0, np.zeros(2), False, priority=p)
    want = np.array(prios) ** 0.6
    assert np.allclose(buf.probabilities(), want / want.sum(), atol=1e-12)


def test_replay_sampling_chi_square():
    rng = np.random.default_rng(7)
    buf = PrioritizedReplayBuffer(16, 1, alpha=0.6)
    prios = rng.uniform(0.1, 5.0, 10)
    for p in prios:
        buf.add(np.zeros(1), 0, 0.0, np.zeros(1), False, priority=p)
    expected = buf.probabilities()
    draws = 20_000
    counts = np.zeros(10)
    for _ in range(draws // 32):
        counts += np.bincount(buf.sample_indices(32, rng), minlength=10)
    n = counts.sum()
    stat = float(np.sum((counts - n * expected) ** 2 / (n * expected)))
    assert chi2_sf(stat, 9) > 0.01


def test_chi2_helper_against_table():
    # 95th percentile of chi-square(9) is 16.919
    assert chi2_sf(16.919, 9) == pytest.approx(0.05, abs=1e-3)


def test_replay_is_weights_and_updates():
    buf = PrioritizedReplayBuffer(4, 1, alpha=1.0, eps=0.01)
    for p in (1.0, 3.0):
        buf.add(np.zeros(1), 0, 0.0, np.zeros(1), False, priority=p)
    b = buf.sample(2, 1.0, np.random.default_rng(0))
    probs = np.array([[1.0, 3.0][i] for i in b.idx]) / 4.0
    w = (2 * probs) ** -1.0
    assert np.allclose(b.weights, w / w.max())
    buf.update_priorities([0], [-2.0])
    assert buf.tree.get(0) == pytest.approx(2.01)
    # new transitions get the running max priority
    buf.add(np.zeros(1), 0, 0.0, np.zeros(1), False)
    assert buf.tree.get(2) == pytest.approx(3.0)


def test_replay_ring_overwrites():
    buf = PrioritizedReplayBuffer(3, 1)
    for i in range(5):
        buf.add(np.array([i]), i, float(i), np.array([i]), False)
    assert len(buf) == 3 and sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        buf.sample(4, 0.4, np.random.default_rng(0))


# -- chain MDP -----------------------------------------------------------------------
# s0 -a0-> s0 (r 1.5), s0 -a1-> s1 (r 1.5), s1 -a0-> s0 (r 1.2), s1 -a1-> s1 (r 2.5), gamma 0.5
# Bellman fixed point by hand: Q(s1,1) = 2.5/(1-0.5) = 5, Q(s0,1) = 1.5 + 0.5*5 = 4,
# Q(s0,0) = 1.5 + 0.5*4 = 3.5, Q(s1,0) = 1.2 + 0.5*4 = 3.2.

NEXT = {(0, 0): 0, (0, 1): 1, (1, 0): 0, (1, 1): 1}
REWARD = {(0, 0): 1.5, (0, 1): 1.5, (1, 0): 1.2, (1, 1): 2.5}
Q_STAR = np.array([[3.5, 4.0], [3.2, 5.0]])
ONEHOT = np.eye(2)


def value_iteration():
    q = np.zeros((2, 2))
    for _ in range(200):
        q = np.array([[REWARD[s, a] + 0.5 * q[NEXT[s, a]].max() for a in (0, 1)] for s in (0, 1)])
    return q


def test_hand_fixed_point_matches_value_iteration():
    assert np.allclose(value_iteration(), Q_STAR, atol=1e-12)


def chain_cfg(**kw):
    base = dict(gamma=0.5, eps_start=1.0, eps_end=1.0, lr=1e-3, batch_size=32, buffer_capacity=2000,
                target_sync=50, reward_scale=1.0, learn_start=32, hidden=[16, 16])
    base.update(kw)
    return AgentConfig(**base)


def train_chain_dqn(agent, steps=10_000, reward_of=lambda s, a: REWARD[s, a]):
    s = 0
    for t in range(steps):
        a = agent.act(ONEHOT[s])
        s2 = NEXT[s, a]
        agent.remember(ONEHOT[s], a, reward_of(s, a), ONEHOT[s2], False)
        agent.learn()
        s = s2
        if t % 50 == 49:
            s = int(agent.rng.integers(2))  # restart so both states stay covered


def chain_q(agent):
    return np.array([agent.q_values(ONEHOT[s]) for s in (0, 1)])


def test_dqn_reaches_bellman_fixed_point():
    agent = DQNAgent(2, 2, chain_cfg(), seed=0)
    train_chain_dqn(agent)
    assert np.max(np.abs(chain_q(agent) - Q_STAR)) <= 1e-2


def test_synq_heads_each_reach_fixed_point():
    agent = SynQAgent(2, 2, chain_cfg(), seed=0)
    s = 0
    for t in range(10_000):
        a = agent.act(ONEHOT[s])
        s2 = NEXT[s, a]
        # the safety head sees a scaled copy of the same chain
        agent.remember(ONEHOT[s], a, REWARD[s, a], ONEHOT[s2], False, safety_reward=-REWARD[s, a])
        agent.learn()
        s = s2 if t % 50 != 49 else int(agent.rng.integers(2))
    qm = np.array([agent.mobility.q_values(ONEHOT[s]) for s in (0, 1)])
    assert np.max(np.abs(qm - Q_STAR)) <= 1e-2
    # negated rewards: the fixed point is the min-Bellman one, computed by value iteration
    q = np.zeros((2, 2))
    for _ in range(200):
        q = np.array([[-REWARD[s, a] + 0.5 * q[NEXT[s, a]].max() for a in (0, 1)] for s in (0, 1)])
    qs = np.array([agent.safety.q_values(ONEHOT[s]) for s in (0, 1)])
    assert np.max(np.abs(qs - q)) <= 1e-2


def test_ppo_finds_optimal_chain_policy():
    cfg = AgentConfig(gamma=0.5, reward_scale=1.0, ppo_lr=3e-3, ppo_epochs=4, ppo_minibatch=32,
                      entropy_coef=0.0, hidden=[16])
    agent = PPOAgent(2, 2, cfg, seed=0)
    for ep in range(150):
        s = ep % 2
        for _ in range(20):
            a = agent.act(ONEHOT[s])
            s2 = NEXT[s, a]
            agent.remember(ONEHOT[s], a, REWARD[s, a], ONEHOT[s2], False)
            s = s2
        agent.end_episode(ONEHOT[s], terminal=False)
        agent.learn()
    assert [agent.act(ONEHOT[s], greedy=True) for s in (0, 1)] == [1, 1]


# -- PPO pieces ----------------------------------------------------------------------------

def test_gae_special_cases():
    r, v = [1.0, 2.0, 3.0], [0.5, 0.2, 0.1]
    adv, ret = gae(r, v, 0.7, [False] * 3, 0.9, 0.0)
    assert np.allclose(adv, [1 + 0.9 * 0.2 - 0.5, 2 + 0.9 * 0.1 - 0.2, 3 + 0.9 * 0.7 - 0.1])
    adv, ret = gae(r, v, 0.7, [False] * 3, 0.9, 1.0)
    mc = [1 + 0.9 * 2 + 0.81 * 3 + 0.729 * 0.7, 2 + 0.9 * 3 + 0.81 * 0.7, 3 + 0.9 * 0.7]
    assert np.allclose(ret, mc)
    adv, _ = gae(r, v, 0.7, [False, True, False], 0.9, 1.0)
    assert adv[1] == pytest.approx(2 - 0.2)


def test_surrogate_unclipped_region_is_policy_gradient():
    logits = np.array([[0.1, 0.4, -0.2]])
    old = log_softmax(logits)[0, [1]]
    loss, g = surrogate_loss(logits, np.array([1]), old, np.array([2.0]), 0.2, 0.0)
    p = softmax(logits[0])
    assert loss == pytest.approx(-2.0)
    assert np.allclose(g[0], -2.0 * (np.eye(3)[1] - p))


def test_surrogate_clipped_has_zero_gradient():
    logits = np.array([[2.0, 0.0]])
    old = log_softmax(np.array([[0.0, 0.0]]))[0, [0]]  # ratio well above 1.2
    loss, g = surrogate_loss(logits, np.array([0]), old, np.array([1.0]), 0.2, 0.0)
    assert loss == pytest.approx(-1.2)
    assert np.all(g == 0)


@pytest.mark.parametrize("seed", range(100))
def test_surrogate_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    n, k = 6, 4
    logits = rng.normal(size=(n, k))
    acts = rng.integers(k, size=n)
    old = log_softmax(logits + rng.normal(scale=0.1, size=(n, k)))[np.arange(n), acts]
    adv = rng.normal(size=n)
    _, g = surrogate_loss(logits, acts, old, adv, 0.2, 0.01)
    h = 1e-6
    num = np.zeros_like(logits)
    for i in range(n):
        for j in range(k):
            z = logits.copy()
            z[i, j] += h
            fp = surrogate_loss(z, acts, old, adv, 0.2, 0.01)[0]
            z[i, j] -= 2 * h
            fm = surrogate_loss(z, acts, old, adv, 0.2, 0.01)[0]
            num[i, j] = (fp - fm) / (2 * h)
    # the clip switch is a kink; skip samples whose ratio sits within h of it
    ratio = np.exp(log_softmax(logits)[np.arange(n), acts] - old)
    ok = (np.abs(ratio - 0.8) > 1e-4) & (np.abs(ratio - 1.2) > 1e-4)
    err = np.abs(g - num)[ok]
    assert np.all(err <= 1e-4 * np.maximum(1.0, np.abs(num[ok])))


def test_ppo_rejects_embedding():
    with pytest.raises(ValueError):
        PPOAgent(3, 2, AgentConfig(), 0, embed_dim=4)


# -- Syn-Q, config, determinism, checkpoints --------------------------------------------------

def test_syn_q_select_combines_heads():
    assert syn_q_select([1.0, 0.0], [0.0, 3.0], 0.5, 0.5) == 1
    assert syn_q_select([1.0, 0.0], [0.0, 3.0], 1.0, 0.0) == 0


def test_agent_config_validation():
    assert AgentConfig().validate() == []
    errs = AgentConfig(gamma=1.5, batch_size=0, lr=-1).validate()
    assert len(errs) == 3


def test_epsilon_schedule():
    agent = DQNAgent(2, 2, AgentConfig(eps_decay_steps=100), 0)
    assert agent.epsilon() == 1.0
    agent.env_steps = 50
    assert agent.epsilon() == pytest.approx(0.525)
    agent.env_steps = 10_000
    assert agent.epsilon() == pytest.approx(0.05)


def test_dqn_training_deterministic_and_checkpoint_round_trip():
    def run():
        agent = DQNAgent(2, 2, chain_cfg(), seed=3)
        train_chain_dqn(agent, steps=300)
        return agent

    a, b = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(a.online.params(), b.online.params()))
    c = DQNAgent(2, 2, chain_cfg(), seed=99)
    c.load_state_dict(a.state_dict())
    assert np.array_equal(chain_q(a), chain_q(c))
    assert c.act(ONEHOT[0]) == a.act(ONEHOT[0])  # rng state restored too
    with pytest.raises(ValueError):
        DQNAgent(2, 3, chain_cfg(), 0).load_state_dict(a.state_dict())
    with pytest.raises(ValueError):
        PPOAgent(2, 2, chain_cfg(), 0).load_state_dict(a.state_dict())
