import numpy as np
import pytest

from effectrl.errors import UsageError
from effectrl.gridworld import FORWARD, N_ACTIONS, EnvConfig, GridWorld
from effectrl.policies import (
    EPSILON_SET,
    BaselineQNet,
    EffectQNet,
    FixedEpsilonSet,
    LinearDecay,
    TaskQNet,
    uniform_goal,
)
from effectrl.replay import SharedReplay, TaskExperience, Transition
from tests.test_gridworld import build_snapshot

GRID = 5
P = 20


def make_qe(seed=0, **kw):
    kw.setdefault("target_interval", 100)
    return EffectQNet(GRID, 4, np.random.default_rng(seed), **kw)


def make_qt(seed=0, **kw):
    kw.setdefault("target_interval", 100)
    return TaskQNet(GRID, 4, np.random.default_rng(seed), **kw)


def make_qb(seed=0, **kw):
    kw.setdefault("target_interval", 100)
    return BaselineQNet(GRID, 4, np.random.default_rng(seed), **kw)


def some_state(seed=0):
    env = GridWorld(EnvConfig(grid_size=GRID))
    return env.reset(seed).flatten()


def zero_heads(net):
    for name, value in net.online.params.items():
        if name.startswith(("value.", "adv.", "qhead.")):
            value[:] = 0
    net.target = net.online.copy()


# -- epsilon schemes -----------------------------------------------------------


def test_fixed_epsilon_set_draws_members():
    scheme = FixedEpsilonSet()
    rng = np.random.default_rng(0)
    draws = {scheme.draw(rng) for _ in range(1000)}
    assert draws == set(EPSILON_SET)


def test_linear_decay_monotone_and_exact_end():
    decay = LinearDecay(1.0, 0.0, 50_000)
    values = [decay.value(s) for s in range(0, 60_001, 5000)]
    assert values[0] == 1.0
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert decay.value(50_000) == 0.0
    assert decay.value(59_999) == 0.0


# -- action selection ------------------------------------------------------------


def test_select_uniform_at_eps_one():
    net = make_qe()
    s = some_state()
    goal = np.zeros(P, dtype=np.int32)
    rng = np.random.default_rng(1)
    counts = np.bincount(
        [net.select(s, goal, 1.0, rng) for _ in range(60_000)], minlength=N_ACTIONS
    ) / 60_000
    assert np.all(np.abs(counts - 1 / 6) < 0.03)


def test_select_greedy_with_hand_set_weights():
    net = make_qe(seed=2)
    zero_heads(net)
    net.online.params["adv.l0.b"][2] = 5.0
    rng = np.random.default_rng(3)
    s = some_state()
    goal = np.zeros(P, dtype=np.int32)
    assert all(net.select(s, goal, 0.0, rng) == 2 for _ in range(10))


def test_greedy_choice_invariant_to_positive_scaling():
    net = make_qe(seed=4)
    s = some_state(1)
    goal = np.ones(P, dtype=np.int32)
    rng = np.random.default_rng(5)
    before = net.select(s, goal, 0.0, rng)
    for name in list(net.online.params):
        if name.startswith(("value.", "adv.")):
            net.online.params[name] *= 7.5
    assert net.select(s, goal, 0.0, rng) == before


def test_select_rejects_bad_epsilon():
    net = make_qe()
    with pytest.raises(UsageError):
        net.select(some_state(), np.zeros(P, dtype=np.int32), 1.5, np.random.default_rng(0))


# -- dueling identity --------------------------------------------------------------


def test_dueling_zero_mean_identity():
    net = make_qe(seed=6)
    rng = np.random.default_rng(7)
    states = np.stack([some_state(i) for i in range(8)])
    effects = rng.integers(-2, 3, size=(8, P))
    q = net.q_values(states, effects)
    v = net.state_value(states, effects)
    assert np.allclose(q.mean(axis=1), v, atol=1e-5)


def test_baseline_dueling_identity():
    net = make_qb(seed=8)
    states = np.stack([some_state(i) for i in range(8)])
    q = net.q_values(states)
    v = net.state_value(states)
    assert np.allclose(q.mean(axis=1), v, atol=1e-5)


# -- dqn train step -----------------------------------------------------------------


def test_terminal_target_is_reward_exactly():
    net = make_qe(seed=9)
    zero_heads(net)
    s = some_state()
    goal = np.zeros(P, dtype=np.int32)
    td, applied = net.train_step(
        states=[s], e_goals=[goal], actions=[3], next_states=[s],
        rewards=[0.91], dones=[1.0], weights=[1.0], gamma=0.85, lr=0.0,
    )
    assert applied
    # q was zero everywhere, so |td| = |0 - 0.91|
    assert td[0] == pytest.approx(0.91, abs=1e-6)


def test_double_q_uses_online_argmax_target_value():
    net = make_qe(seed=10)
    zero_heads(net)
    # online prefers action 1; target values action 2 higher
    net.online.params["adv.l0.b"][1] = 1.0
    net.target.params["adv.l0.b"][2] = 3.0
    net.target.params["adv.l0.b"][1] = 2.0
    s = some_state()
    goal = np.zeros(P, dtype=np.int32)

    # expected target value: dueling Q of the TARGET net at the online argmax
    bias = net.target.params["adv.l0.b"]
    expected_bootstrap = bias[1] - bias.mean()
    gamma = 0.85
    td, _ = net.train_step(
        states=[s], e_goals=[goal], actions=[0], next_states=[s],
        rewards=[0.0], dones=[0.0], weights=[1.0], gamma=gamma, lr=0.0,
    )
    # online q of taken action 0: -(1/6) * 1.0 bias mean correction
    own = net.online.params["adv.l0.b"][0] - net.online.params["adv.l0.b"].mean()
    assert td[0] == pytest.approx(abs(own - gamma * expected_bootstrap), abs=1e-6)


def chain_states():
    a = build_snapshot(GRID, agent=(2, 3), ball=(1, 1), chest=(5, 5), target=(4, 3),
                       agent_dir=0).entities.ravel()
    b = build_snapshot(GRID, agent=(3, 3), ball=(1, 1), chest=(5, 5), target=(4, 3),
                       agent_dir=0).entities.ravel()
    return a.astype(np.int32), b.astype(np.int32)


def value_iteration_chain(gamma, punish, reward, sweeps=200):
    # states 0,1; action FORWARD advances, everything else self-loops
    q = np.zeros((2, N_ACTIONS))
    for _ in range(sweeps):
        nxt = q.copy()
        for a in range(N_ACTIONS):
            nxt[0, a] = (punish + gamma * q[1].max()) if a == FORWARD else (punish + gamma * q[0].max())
            nxt[1, a] = reward if a == FORWARD else punish + gamma * q[1].max()
        q = nxt
    return q


def test_chain_convergence_to_tabular_ladder():
    gamma, punish = 0.85, -0.02
    s0, s1 = chain_states()
    goal = np.zeros(P, dtype=np.int32)
    goal[1] = 1  # agent x +1

    oracle = value_iteration_chain(gamma, punish, 1.0)
    net = make_qe(seed=11, target_interval=250)
    rng = np.random.default_rng(12)

    transitions = []
    for a in range(N_ACTIONS):
        if a == FORWARD:
            transitions.append((s0, a, s1, punish, 0.0))
            transitions.append((s1, a, s1, 1.0, 1.0))
        else:
            transitions.append((s0, a, s0, punish, 0.0))
            transitions.append((s1, a, s1, punish, 0.0))

    for _ in range(5000):
        idx = rng.integers(0, len(transitions), size=32)
        batch = [transitions[i] for i in idx]
        net.train_step(
            states=[b[0] for b in batch],
            e_goals=[goal] * len(batch),
            actions=[b[1] for b in batch],
            next_states=[b[2] for b in batch],
            rewards=[b[3] for b in batch],
            dones=[b[4] for b in batch],
            weights=[1.0] * len(batch),
            gamma=gamma, lr=1e-3,
        )
    q0 = net.q_values(s0[None, :], goal[None, :])[0]
    q1 = net.q_values(s1[None, :], goal[None, :])[0]
    assert abs(q0[FORWARD] - oracle[0, FORWARD]) < 1e-2
    assert abs(q1[FORWARD] - oracle[1, FORWARD]) < 1e-2
    assert int(np.argmax(q0)) == FORWARD and int(np.argmax(q1)) == FORWARD


# -- goal selection -----------------------------------------------------------------


def test_single_candidate_selected_in_both_modes():
    net = make_qt(seed=13)
    s = some_state()
    cands = np.ones((1, P), dtype=np.int32)
    rng = np.random.default_rng(14)
    assert uniform_goal(cands, rng) == 0
    assert net.select(s, cands, 0.0, rng) == 0
    assert net.select(s, cands, 1.0, rng) == 0


def test_uniform_goal_distribution():
    cands = np.zeros((20, P), dtype=np.int32)
    rng = np.random.default_rng(15)
    counts = np.bincount([uniform_goal(cands, rng) for _ in range(100_000)],
                         minlength=20) / 100_000
    assert np.all(np.abs(counts - 0.05) < 0.01)


def test_greedy_goal_with_stub_scores():
    net = make_qt(seed=16)
    net.q_values = lambda s, c: -np.abs(np.arange(len(c)) - 7).astype(float)
    s = some_state()
    cands = np.zeros((20, P), dtype=np.int32)
    assert net.select(s, cands, 0.0, np.random.default_rng(17)) == 7


def test_empty_candidates_rejected():
    net = make_qt()
    with pytest.raises(UsageError):
        net.select(some_state(), np.zeros((0, P), dtype=np.int32), 0.0,
                   np.random.default_rng(0))


# -- task q training -----------------------------------------------------------------


def test_task_terminal_target_is_reward():
    net = make_qt(seed=18)
    zero_heads(net)
    s0, _ = chain_states()
    goal = np.zeros(P, dtype=np.int32)
    exp = TaskExperience(s_goal=s0, e_goal=goal, s_next=s0,
                         next_candidates=np.zeros((0, P), dtype=np.int32),
                         r_prime=0.7, done=True)
    td, applied = net.train_step([exp], gamma=0.85, lr=0.0, weights=[1.0])
    assert applied
    assert td[0] == pytest.approx(0.7, abs=1e-6)


def test_task_single_step_value_converges():
    net = make_qt(seed=19)
    s0, _ = chain_states()
    goal = np.zeros(P, dtype=np.int32)
    goal[1] = 1
    exp = TaskExperience(s_goal=s0, e_goal=goal, s_next=s0,
                         next_candidates=np.zeros((0, P), dtype=np.int32),
                         r_prime=0.91, done=True)
    for _ in range(2000):
        net.train_step([exp] * 16, gamma=0.85, lr=1e-3, weights=[1.0] * 16)
    q = net.q_values(s0, goal[None, :])[0]
    assert q == pytest.approx(0.91, abs=1e-2)


def test_task_two_step_chain_ladder():
    gamma = 0.85
    net = make_qt(seed=20, target_interval=200)
    s0, s1 = chain_states()
    e0 = np.zeros(P, dtype=np.int32)
    e0[1] = 1
    e1 = np.zeros(P, dtype=np.int32)
    e1[3] = 1
    first = TaskExperience(s_goal=s0, e_goal=e0, s_next=s1,
                           next_candidates=e1[None, :], r_prime=0.0, done=False)
    second = TaskExperience(s_goal=s1, e_goal=e1, s_next=s1,
                            next_candidates=np.zeros((0, P), dtype=np.int32),
                            r_prime=1.0, done=True)
    rng = np.random.default_rng(21)
    for _ in range(4000):
        batch = [first if rng.random() < 0.5 else second for _ in range(16)]
        net.train_step(batch, gamma=gamma, lr=1e-3, weights=[1.0] * 16)
    q1 = net.q_values(s1, e1[None, :])[0]
    q0 = net.q_values(s0, e0[None, :])[0]
    assert q1 == pytest.approx(1.0, abs=1e-2)
    assert q0 == pytest.approx(gamma * 1.0, abs=1e-2)


def test_task_nonterminal_without_candidates_rejected():
    net = make_qt()
    s0, _ = chain_states()
    exp = TaskExperience(s_goal=s0, e_goal=np.zeros(P, dtype=np.int32), s_next=s0,
                         next_candidates=np.zeros((0, P), dtype=np.int32),
                         r_prime=0.0, done=False)
    with pytest.raises(UsageError):
        net.train_step([exp], gamma=0.85, lr=1e-3, weights=[1.0])


# -- baseline -----------------------------------------------------------------------


def test_baseline_terminal_target():
    net = make_qb(seed=22)
    zero_heads(net)
    s = some_state()
    td, _ = net.train_step(
        states=[s], actions=[1], rewards=[0.5], next_states=[s], dones=[1.0],
        weights=[1.0], gamma=0.85, lr=0.0,
    )
    assert td[0] == pytest.approx(0.5, abs=1e-6)


def test_baseline_learns_corridor_task():
    # flat DQN on a 5x5 go-to-target task; greedy evaluation must clear 0.8
    # mean reward well inside a 200K env-step budget
    env = GridWorld(EnvConfig(grid_size=GRID, task="T", max_episode_steps=100))
    net = make_qb(seed=23, target_interval=500)
    buf = SharedReplay(50_000, ("policy",))
    scheme = FixedEpsilonSet()
    rng = np.random.default_rng(24)
    gamma, lr = 0.85, 5e-4

    def greedy_eval(episodes=20):
        rewards = []
        for e in range(episodes):
            s = env.reset(10_000 + e).flatten()
            total = 0.0
            while True:
                res = env.step(net.select(s, 0.0, rng))
                total += res.reward
                s = res.next_state.flatten()
                if res.done:
                    break
            rewards.append(total)
        return float(np.mean(rewards))

    env_steps = 0
    solved = False
    for episode in range(4000):
        s = env.reset(int(rng.integers(1_000_000))).flatten()
        eps = scheme.draw(rng)
        while True:
            a = net.select(s, eps, rng)
            res = env.step(a)
            nxt = res.next_state.flatten()
            buf.push(Transition(s.astype(np.int8), a, res.reward, nxt.astype(np.int8),
                                res.done), 1.0)
            s = nxt
            env_steps += 1
            if env_steps % 5 == 0 and len(buf) >= 256:
                batch, weights, ids = buf.sample("policy", 64, rng)
                td, _ = net.train_step(
                    states=[np.asarray(t.s, dtype=np.int64) for t in batch],
                    actions=[t.a for t in batch],
                    rewards=[t.r for t in batch],
                    next_states=[np.asarray(t.s_next, dtype=np.int64) for t in batch],
                    dones=[float(t.done) for t in batch],
                    weights=weights, gamma=gamma, lr=lr,
                )
                buf.update_priorities("policy", ids, td)
            if res.done:
                break
        if episode % 50 == 49 and greedy_eval() > 0.8:
            solved = True
            break
        if env_steps > 200_000:
            break
    assert solved, f"baseline failed to learn within {env_steps} env steps"
