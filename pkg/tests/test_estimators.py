import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repbm import dataset as D
from repbm import estimators as est
from repbm import oracle as orc
from repbm import policies as P
from repbm.dataset import Dataset, Trajectory
from repbm.environments import make, rollout_return
from repbm.estimators import EstimatorError, ValueProvider, ZeroProvider
from toys import LEFT, perfect_drift_model


def tree_dataset(action_seqs, mu=None, depth=2):
    env = make(f"tree:{depth}")
    mu = mu or P.uniform(2)
    trajs = []
    for acts in action_seqs:
        s = env.reset(0)
        states, rews, probs = [s.observation], [], []
        for a in acts:
            probs.append(mu.action_prob(s.observation, a))
            s, r = env.step(s, a)
            states.append(s.observation)
            rews.append(r)
        trajs.append(Trajectory(np.array(states), list(acts), rews, probs))
    return Dataset(trajs, depth, env.name)


def drift_dataset(n, seed, mu):
    return D.collect(make("drift"), mu, n, seed)


def test_matching_eps_greedy_weight():
    q = P.QNetwork(1, 2, 4, np.random.default_rng(0))
    pi, mu = P.greedy(q), P.epsilon_greedy(q, 0.2)
    env = make("drift:3")
    s = env.reset(0)
    states, acts, probs = [s.observation], [], []
    for _ in range(3):
        a = int(pi.greedy_actions(s.observation[None])[0])
        probs.append(mu.action_prob(s.observation, a))
        s, _ = env.step(s, a)
        states.append(s.observation)
        acts.append(a)
    ds = Dataset([Trajectory(np.array(states), acts, [1.0] * 3, probs)], 3, env.name)
    w = est.step_arrays(ds, pi).weights[0, -1]
    assert w == pytest.approx((1 / 0.9) ** 3, abs=1e-12)
    assert est.is_estimate(ds, pi).mean == pytest.approx(3 * (1 / 0.9) ** 3)


def test_no_match_is_zero_and_wis_undefined():
    ds = tree_dataset([(1, 1), (1, 0), (0, 1)])
    assert est.is_estimate(ds, LEFT, "is").mean == 0.0
    wis = est.is_estimate(ds, LEFT, "wis")
    assert not wis.defined and np.isnan(wis.mean) and "undefined" in wis.flags[0]


def _exact_expectation(estimator):
    seqs = list(itertools.product([0, 1], repeat=2))
    per = estimator(tree_dataset(seqs)).per_state
    # each sequence has probability 1/4 under uniform mu
    return float(np.sum(per) / 4)


def test_tree_exact_expectations_are_unbiased():
    v = orc.exact_value(make("tree:2").mdp, P.tabular(np.tile([1.0, 0.0], (7, 1))), 2)
    assert v == 1.0
    assert _exact_expectation(lambda ds: est.is_estimate(ds, LEFT)) == pytest.approx(v, abs=1e-15)
    assert _exact_expectation(lambda ds: est.pdis_estimate(ds, LEFT)) == pytest.approx(v, abs=1e-15)


def test_pdis_equals_is_for_one_step():
    ds = drift_dataset(30, 0, P.tabular([[0.4, 0.6]]))
    ds = Dataset([Trajectory(tr.states[:2], tr.actions[:1], tr.rewards[:1], tr.behavior_probs[:1])
                  for tr in ds.trajectories], 1, "drift:1")
    assert est.pdis_estimate(ds, LEFT).mean == est.is_estimate(ds, LEFT).mean


def test_pdis_truncates_after_deviation():
    tr = Trajectory([[0.0]] * 4, [0, 0, 1], [1.0, 2.0, 4.0], [0.5, 0.5, 0.5])
    ds = Dataset([tr], 3, "drift:3")
    assert est.pdis_estimate(ds, LEFT).mean == 1.0 * 2 + 2.0 * 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 0.9))
def test_weights_zero_or_inverse_product(seed, p):
    mu = P.tabular([[p, 1 - p]])
    ds = D.annotate(drift_dataset(20, seed, mu), LEFT)
    arr = est.step_arrays(ds, LEFT)
    for i, tr in enumerate(ds.trajectories):
        for t in range(len(tr)):
            direct = np.prod(1.0 / tr.behavior_probs[:t + 1]) if ds.factual_mask[i, t] else 0.0
            assert arr.weights[i, t] in (0.0, pytest.approx(direct, rel=1e-14))
            assert (arr.weights[i, t] == 0.0) == (not ds.factual_mask[i, t])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.3, 0.9))
def test_wis_is_convex_combination(seed, p):
    ds = drift_dataset(25, seed, P.tabular([[p, 1 - p]]))
    res = est.is_estimate(ds, LEFT, "wis")
    w = est.step_arrays(ds, LEFT).weights[:, -1]
    if not res.defined:
        assert np.all(w == 0)
        return
    R = np.array([tr.ret for tr in ds.trajectories])[w > 0]
    assert R.min() - 1e-12 <= res.mean <= R.max() + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.2, 0.8))
def test_unweighted_per_state_means(seed, p):
    ds = drift_dataset(15, seed, P.tabular([[p, 1 - p]]))
    for res in (est.is_estimate(ds, LEFT), est.pdis_estimate(ds, LEFT),
                est.dr_estimate(ds, LEFT, ZeroProvider())):
        assert res.per_state.mean() == pytest.approx(res.mean, rel=1e-12, abs=1e-12)
        assert not res.per_state_meaningful


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.2, 0.8), st.sampled_from(["cartpole", "drift"]))
def test_dr_zero_model_is_pdis(seed, p, env):
    ds = D.collect(make(env), P.tabular([[p, 1 - p]]), 20, seed)
    assert est.dr_estimate(ds, LEFT, ZeroProvider()).mean == est.pdis_estimate(ds, LEFT).mean
    assert est.dr_estimate(ds, LEFT, ZeroProvider(), "wdr").mean == est.pdis_estimate(ds, LEFT, "wpdis").mean


def test_soft_variants_approach_hard():
    q = P.QNetwork(1, 2, 4, np.random.default_rng(1))
    pi, mu = P.greedy(q), P.epsilon_greedy(q, 0.3)
    ds = D.annotate(drift_dataset(200, 0, mu), pi)
    keep = [tr for i, tr in enumerate(ds.trajectories) if ds.factual_mask[i, -1]]
    ds = Dataset(keep, ds.horizon, ds.env)
    assert len(ds) > 0
    for hard, soft in [("is", "soft_is"), ("wis", "soft_wis"), ("pdis", "soft_pdis"), ("wpdis", "soft_wpdis")]:
        fn = est.is_estimate if "is" in hard and "pdis" not in hard else est.pdis_estimate
        h = fn(ds, pi, hard).mean
        gaps = [abs(fn(ds, pi, soft, e).mean - h) for e in (0.1, 0.01, 0.001)]
        # weighted variants can be exactly invariant when every soft weight shrinks alike
        if hard.startswith("w"):
            assert gaps[0] + 1e-12 >= gaps[1] and gaps[1] + 1e-12 >= gaps[2], (hard, gaps)
        else:
            assert gaps[0] > gaps[1] > gaps[2], (hard, gaps)


def test_wpdis_flags_zero_steps():
    ds = tree_dataset([(1, 1), (0, 1)])
    res = est.pdis_estimate(ds, LEFT, "wpdis")
    assert res.flags and res.metadata["zero_weight_steps"] == [1]


# -- doubly robust -----------------------------------------------------------

class ConstProvider(ValueProvider):
    def __init__(self, qv, vv, name="const"):
        self.qv, self.vv, self.name = qv, vv, name

    def q(self, states, actions, steps):
        return np.full(len(np.atleast_2d(states)), self.qv)

    def v(self, states, steps):
        return np.full(len(np.atleast_2d(states)), self.vv)


def test_dr_hand_arithmetic():
    tr = Trajectory([[0.0], [0.0]], [0], [1.0], [0.5])
    ds = Dataset([tr], 1, "drift:1")
    assert est.dr_estimate(ds, LEFT, ConstProvider(1.0, 1.0)).mean == 1.0
    assert est.dr_estimate(ds, LEFT, ConstProvider(0.5, 1.0)).mean == 1.0 + 2 * (1.0 - 0.5)


def test_dr_zero_weights_reduce_to_model():
    ds = tree_dataset([(1, 1), (1, 0)])
    assert est.dr_estimate(ds, LEFT, ConstProvider(3.0, 0.7)).mean == pytest.approx(0.7)


def test_dr_perfect_model_recovers_truth():
    model = perfect_drift_model()
    ds = drift_dataset(20, 2, P.tabular([[0.3, 0.7]]))
    env = make("drift")
    truth = np.mean([rollout_return(env, s0, lambda o: 0) for s0 in ds.initial_states])
    for variant in ("dr", "wdr", "soft_dr"):
        res = est.dr_estimate(ds, LEFT, est.ModelProvider(model, LEFT), variant)
        assert res.mean == pytest.approx(truth, abs=1e-10)
    res = est.model_estimate(ds, model, LEFT)
    assert len(res.per_state) == 20 and res.per_state_meaningful
    assert res.mean == pytest.approx(res.per_state.mean(), abs=1e-15)
    assert res.mean == pytest.approx(truth, abs=1e-10)


def test_provider_failure_names_provider():
    class Broken(ValueProvider):
        name = "broken-model"

        def q(self, states, actions, steps):
            raise RuntimeError("boom")

    ds = drift_dataset(3, 0, P.uniform(2))
    with pytest.raises(EstimatorError, match="broken-model"):
        est.dr_estimate(ds, LEFT, Broken())


# -- MRDR ------------------------------------------------------------------------

class TableQ:
    """Stand-in MRDR Q that returns fixed values per (trajectory state, step)."""

    def __init__(self, ds, values, variant="mrdr"):
        self.variant = variant
        self.lookup = {}
        for i, tr in enumerate(ds.trajectories):
            for t in range(len(tr)):
                self.lookup[(tr.states[t].tobytes(), t)] = values[i, t]
        self.H = ds.horizon

    def q(self, states, actions, steps):
        return np.array([self.lookup[(s.tobytes(), self.H - k)] for s, k in zip(states, steps)])


def test_mrdr_perfect_regression_has_zero_loss():
    ds = drift_dataset(10, 0, P.tabular([[0.6, 0.4]]))
    arr = est.step_arrays(ds, LEFT)
    for variant in ("mrdr", "mrdr_wis"):
        tgt = est.mrdr_targets(arr, variant)
        assert est.mrdr_loss(ds, LEFT, TableQ(ds, tgt, variant)) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_mrdr_loss_nonnegative(seed):
    ds = drift_dataset(8, seed, P.tabular([[0.6, 0.4]]))
    vals = np.random.default_rng(seed).normal(size=(8, ds.horizon))
    assert est.mrdr_loss(ds, LEFT, TableQ(ds, vals)) >= 0.0


def test_mrdr_loss_hand_evaluation():
    # one factual trajectory, H = 2, mu(a_t) = 0.8 then 0.6, rewards 1 and 2
    tr = Trajectory([[0.0], [0.5], [1.0]], [0, 0], [1.0, 2.0], [0.8, 0.6])
    ds = Dataset([tr], 2, "drift:2")
    q = TableQ(ds, np.array([[0.5, 1.5]]))
    w0, w1 = 1 / 0.8, 1 / (0.8 * 0.6)
    target0 = 1.0 + (1 / 0.6) * 2.0
    target1 = 2.0
    hand = w0 ** 2 * (0.2 / 0.8) * (target0 - 0.5) ** 2 + w1 ** 2 * (0.4 / 0.6) * (target1 - 1.5) ** 2
    assert abs(est.mrdr_loss(ds, LEFT, q) - hand) < 1e-10


def test_mrdr_training_reduces_loss():
    ds = drift_dataset(60, 1, P.tabular([[0.7, 0.3]]))
    q = est.mrdr_train(ds, LEFT, est.MrdrConfig(hidden=16, lr=1e-2, epochs=150))
    assert q.history[-1] < q.history[0]
    assert q.all_q(ds.initial_states, np.full(60, 10)).shape == (60, 2)
    res = est.mrdr_q_estimate(ds, q)
    assert res.per_state_meaningful and len(res.per_state) == 60


# -- registry ------------------------------------------------------------------------

@pytest.mark.parametrize("text,kind,provider", [
    ("repbm", "model", "repbm@0.01"), ("repbm@0.1", "model", "repbm@0.1"), ("am", "model", "am"),
    ("am_pi", "model", "am_pi"), ("wis", "is", None), ("soft_wpdis", "pdis", None),
    ("dr(repbm)", "dr", "repbm@0.01"), ("soft_wdr(am)", "dr", "am"), ("mrdr", "dr", "mrdr"),
    ("mrdr_wis", "dr", "mrdr_wis"), ("mrdr_q", "mrdr_q", "mrdr"), ("wdr(mrdr)", "dr", "mrdr"),
])
def test_parse_estimator(text, kind, provider):
    name = est.parse_estimator(text)
    assert name.kind == kind and name.provider == provider and est.is_registered(text)


def test_unknown_estimator():
    assert not est.is_registered("magic")
    with pytest.raises(ValueError):
        est.parse_estimator("dr(nothing)")


def test_evaluate_missing_model():
    ds = drift_dataset(3, 0, P.uniform(2))
    with pytest.raises(EstimatorError, match="repbm@0.01"):
        est.evaluate(est.parse_estimator("repbm"), ds, LEFT, {})


def test_evaluate_dispatch_matches_direct():
    ds = drift_dataset(12, 4, P.tabular([[0.6, 0.4]]))
    model = perfect_drift_model()
    models = {"am": model}
    assert est.evaluate(est.parse_estimator("wpdis"), ds, LEFT, models).mean == est.pdis_estimate(ds, LEFT, "wpdis").mean
    a = est.evaluate(est.parse_estimator("wdr(am)"), ds, LEFT, models, grid_cache={})
    b = est.dr_estimate(ds, LEFT, est.ModelProvider(model, LEFT, "am"), "wdr")
    assert a.mean == b.mean and a.name == "wdr(am)"
