import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repbm import oracle as orc
from repbm import policies as P
from repbm.environments import EnvSpec, Environment, TabularMdp


class TabularEnv(Environment):
    """Deterministic tabular MDP exposed through the stepping contract (obs = [state])."""

    def __init__(self, mdp: TabularMdp, start: int = 0):
        self.mdp, self.start = mdp, start
        self.spec = EnvSpec("tabular", 1, mdp.n_actions, mdp.horizon)

    def initial_observation(self, rng):
        return np.array([float(self.start)])

    def dynamics(self, obs, action):
        s = int(obs[0])
        nxt = int(np.argmax(self.mdp.T[s, action]))
        return np.array([float(nxt)]), float(self.mdp.r[s, action]), False


def chain_mdp():
    # state 0 pays 0, state 1 pays 1 for staying; action 1 toggles the state
    T = np.zeros((2, 2, 2))
    T[0, 0, 0] = T[0, 1, 1] = T[1, 0, 1] = T[1, 1, 0] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 0.0]])
    return TabularMdp(2, 2, 4, np.array([1.0, 0.0]), T, r)


def optimal_actions(mdp, H):
    V = np.zeros(mdp.n_states)
    acts = []
    for _ in range(H):
        Q = mdp.r + mdp.T @ V
        acts.append(np.argmax(Q, axis=1))
        V = Q.max(axis=1)
    return acts[::-1]


SMALL = P.QBudget(episodes=150, batch_size=32, lr=5e-3, target_update=50, gamma=1.0, hidden=16,
                  warmup=50, eps_decay_episodes=80, eval_every=10, eval_rollouts=1)


def test_fqi_chain_matches_dynamic_programming():
    mdp = chain_mdp()
    env = TabularEnv(mdp)
    # from state 0 the optimum toggles once and then stays: return H - 1
    dp_first = optimal_actions(mdp, mdp.horizon)[0]
    budget = P.QBudget(**{**SMALL.__dict__, "return_threshold": 3.0})
    q = P.fit_q_iteration(env, budget, rng_seed=0)
    pi = P.greedy(q)
    assert pi.greedy_actions(np.array([[0.0]]))[0] == dp_first[0] == 1
    assert P.greedy_return(env, q, 1, np.random.default_rng(0)) == 3.0


def test_fqi_bandit_picks_paying_arm():
    T = np.zeros((1, 2, 1))
    T[0, :, 0] = 1.0
    env = TabularEnv(TabularMdp(1, 2, 1, np.array([1.0]), T, np.array([[0.0, 1.0]])))
    budget = P.QBudget(**{**SMALL.__dict__, "return_threshold": 1.0})
    q = P.fit_q_iteration(env, budget, rng_seed=3)
    assert P.greedy(q).greedy_actions(np.array([[0.0]]))[0] == 1


def test_fqi_unreachable_threshold_reports_achieved():
    T = np.zeros((1, 2, 1))
    T[0, :, 0] = 1.0
    env = TabularEnv(TabularMdp(1, 2, 1, np.array([1.0]), T, np.array([[0.0, 1.0]])))
    budget = P.QBudget(**{**SMALL.__dict__, "episodes": 80, "return_threshold": 5.0})
    with pytest.raises(P.PolicyTrainingError) as info:
        P.fit_q_iteration(env, budget, rng_seed=0)
    assert info.value.achieved <= 1.0


def _qnet(seed=0):
    return P.QNetwork(4, 2, 8, np.random.default_rng(seed))


def test_action_prob_examples():
    q = _qnet()
    s = np.zeros(4)
    g = int(P.greedy(q).greedy_actions(s[None])[0])
    assert P.epsilon_greedy(q, 0.2).action_prob(s, g) == pytest.approx(0.9, abs=1e-12)
    assert P.soften(P.greedy(q), 0.01).action_prob(s, 1 - g) == pytest.approx(0.005, abs=1e-15)
    assert P.greedy(q).action_prob(s, 1 - g) == 0.0


def test_sampling_frequencies():
    q = _qnet()
    s = np.zeros(4)
    g = int(P.greedy(q).greedy_actions(s[None])[0])
    rng = np.random.default_rng(5)
    mu = P.epsilon_greedy(q, 0.2)
    draws = np.array([mu.sample_action(s, rng) for _ in range(10_000)])
    assert abs(np.mean(draws == g) - 0.9) < 0.01
    u = P.uniform(2)
    draws = np.array([u.sample_action(s, rng) for _ in range(10_000)])
    assert abs(np.mean(draws == 0) - 0.5) < 0.02
    assert all(P.greedy(q).sample_action(s, rng) == g for _ in range(20))


def test_sampling_deterministic_given_rng():
    mu = P.epsilon_greedy(_qnet(), 0.3)
    s = np.ones(4) * 0.01
    a = [mu.sample_action(s, np.random.default_rng(9)) for _ in range(5)]
    assert len(set(a)) == 1


def test_tie_break_lowest_index():
    pi = P.tabular([[0.5, 0.5]])
    assert pi.greedy_actions(np.zeros((3, 1))).tolist() == [0, 0, 0]
    assert P.argmax_lowest(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])).tolist() == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 0.99), st.sampled_from(["greedy", "eps", "soft", "tab"]))
def test_probabilities_sum_to_one(seed, eps, kind):
    rng = np.random.default_rng(seed)
    q = _qnet(seed)
    pol = {"greedy": lambda: P.greedy(q), "eps": lambda: P.epsilon_greedy(q, eps),
           "soft": lambda: P.soften(P.greedy(q), eps),
           "tab": lambda: P.tabular(rng.dirichlet(np.ones(2), size=1))}[kind]()
    states = rng.normal(size=(20, 4))
    np.testing.assert_allclose(pol.probs(states).sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 0.99))
def test_epsilon_greedy_supports_its_greedy_policy(seed, eps):
    q = _qnet(seed)
    states = np.random.default_rng(seed).normal(size=(30, 4))
    assert P.check_support(P.epsilon_greedy(q, eps), P.greedy(q), states)
    assert not P.check_support(P.greedy(q), P.soften(P.greedy(q), eps), states)


def test_policy_round_trip(tmp_path):
    q = _qnet(2)
    for pol in (P.greedy(q), P.epsilon_greedy(q, 0.2), P.soften(P.greedy(q), 0.05), P.tabular([[0.2, 0.8]])):
        back = P.Policy.load(pol.save(tmp_path / "p.json"))
        states = np.random.default_rng(0).normal(size=(10, 4))
        if pol.kind == "tabular":
            states = np.zeros((10, 1))
        assert np.array_equal(back.probs(states), pol.probs(states))
        assert back.digest() == pol.digest()


def test_invalid_policies():
    with pytest.raises(ValueError):
        P.Policy("boltzmann", 2)
    with pytest.raises(ValueError):
        P.epsilon_greedy(_qnet(), 1.0)
    with pytest.raises(ValueError):
        P.tabular([[0.3, 0.3]])


def test_qnetwork_output_width():
    assert _qnet().predict(np.zeros((3, 4))).shape == (3, 2)


def test_oracle_policy_table_is_consistent():
    pol = P.tabular([[1.0, 0.0], [0.25, 0.75]])
    np.testing.assert_array_equal(orc.policy_table(pol, 2), [[1.0, 0.0], [0.25, 0.75]])
