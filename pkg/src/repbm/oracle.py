"""Exact enumeration over finite MDPs.

Everything here is computed exactly (dynamic programming or full enumeration
of trajectories); nothing is sampled. Policies are queried on observations
``[[s]]`` so tabular policies index rows by state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environments import TabularMdp, build_tree_mdp
from .policies import Policy, tabular

MAX_ACTION_SEQUENCES = 2 ** 16
MAX_TRAJECTORIES = 2 ** 20


class EnumerationError(ValueError):
    pass


class SupportError(ValueError):
    pass


def policy_table(policy: Policy, n_states: int) -> np.ndarray:
    """(S, A) matrix of action probabilities."""
    return policy.probs(np.arange(n_states, dtype=float)[:, None])


def state_values(mdp: TabularMdp, policy: Policy, H: int) -> np.ndarray:
    """V^pi_H(s) for every state by backward induction."""
    if H < 0:
        raise ValueError("H must be >= 0")
    if H > mdp.horizon:
        raise ValueError(f"H = {H} exceeds the MDP horizon {mdp.horizon}")
    P = policy_table(policy, mdp.n_states)
    V = np.zeros(mdp.n_states)
    for _ in range(H):
        Q = mdp.r + mdp.T @ V
        V = np.sum(P * Q, axis=1)
    return V


def exact_value(mdp: TabularMdp, policy: Policy, H: int) -> float:
    return float(mdp.p0 @ state_values(mdp, policy, H))


# ---------------------------------------------------------------------------
# trajectory enumeration


@dataclass
class TrajectoryTable:
    """All positive-probability trajectories under the behavior policy."""
    states: np.ndarray     # (K, H) visited states s_0..s_{H-1}
    actions: np.ndarray    # (K, H)
    prob_mu: np.ndarray    # (K,) path probability under mu
    prob_pi: np.ndarray    # (K,) path probability under pi
    is_weight: np.ndarray  # (K,) prod pi / mu
    ret: np.ndarray        # (K,) sum of mean rewards

    @property
    def action_codes(self) -> np.ndarray:
        A = int(self.actions.max()) + 1 if self.actions.size else 1
        A = max(A, 2)
        return (self.actions * (A ** np.arange(self.actions.shape[1])[::-1])).sum(axis=1) \
            if self.actions.size else np.zeros(len(self.prob_mu), dtype=np.int64)


def enumerate_trajectories(mdp: TabularMdp, mu: Policy, pi: Policy, H: int) -> TrajectoryTable:
    if H > mdp.horizon:
        raise ValueError(f"H = {H} exceeds the MDP horizon {mdp.horizon}")
    if mdp.n_actions ** H > MAX_ACTION_SEQUENCES:
        raise EnumerationError(f"{mdp.n_actions}^{H} action sequences exceed the enumeration cap")
    Pm, Pp = policy_table(mu, mdp.n_states), policy_table(pi, mdp.n_states)
    # forward expansion of (states, actions, p_mu, p_pi, w, ret) prefixes
    s0 = np.flatnonzero(mdp.p0 > 0)
    Acts = np.zeros((len(s0), 0), dtype=np.int64)
    pm = mdp.p0[s0].copy()
    pp = mdp.p0[s0].copy()
    w = np.ones(len(s0))
    ret = np.zeros(len(s0))
    states_hist = np.zeros((len(s0), 0), dtype=np.int64)
    cur = s0
    for t in range(H):
        rows_s, rows_a = [], []
        for k, s in enumerate(cur):
            for a in range(mdp.n_actions):
                if Pm[s, a] > 0:
                    rows_s.append(k)
                    rows_a.append(a)
                elif Pp[s, a] > 0:
                    raise SupportError(f"pi takes action {a} in state {s}, where mu has no mass")
        k_idx = np.array(rows_s, dtype=np.int64)
        a_idx = np.array(rows_a, dtype=np.int64)
        s_idx = cur[k_idx]
        pm, pp = pm[k_idx] * Pm[s_idx, a_idx], pp[k_idx] * Pp[s_idx, a_idx]
        w = w[k_idx] * Pp[s_idx, a_idx] / Pm[s_idx, a_idx]
        ret = ret[k_idx] + mdp.r[s_idx, a_idx]
        states_hist = np.column_stack([states_hist[k_idx], s_idx])
        Acts = np.column_stack([Acts[k_idx], a_idx])
        if t == H - 1:
            break
        # branch over next states
        nk, ns = [], []
        for k in range(len(s_idx)):
            nxt = np.flatnonzero(mdp.T[s_idx[k], a_idx[k]] > 0)
            nk.extend([k] * len(nxt))
            ns.extend(nxt.tolist())
        if len(nk) > MAX_TRAJECTORIES:
            raise EnumerationError("trajectory count exceeds the enumeration cap")
        nk = np.array(nk, dtype=np.int64)
        ns = np.array(ns, dtype=np.int64)
        tp = mdp.T[s_idx[nk], a_idx[nk], ns]
        pm, pp, w, ret = pm[nk] * tp, pp[nk] * tp, w[nk], ret[nk]
        states_hist, Acts = states_hist[nk], Acts[nk]
        cur = ns
    if H == 0:
        return TrajectoryTable(np.zeros((len(s0), 0), dtype=np.int64), Acts, pm, pp, w, ret)
    return TrajectoryTable(states_hist, Acts, pm, pp, w, ret)


def action_sequence_table(mdp: TabularMdp, policy: Policy, H: int):
    """(sequences (K, H), probabilities (K,)) over all A^H action sequences."""
    if mdp.n_actions ** H > MAX_ACTION_SEQUENCES:
        raise EnumerationError(f"{mdp.n_actions}^{H} action sequences exceed the enumeration cap")
    tab = enumerate_trajectories(mdp, policy, policy, H)
    seqs = np.array(np.unravel_index(np.arange(mdp.n_actions ** H), (mdp.n_actions,) * H)).T \
        if H else np.zeros((1, 0), dtype=np.int64)
    probs = np.zeros(len(seqs))
    codes = _codes(tab.actions, mdp.n_actions)
    np.add.at(probs, codes, tab.prob_mu)
    return seqs, probs


def _codes(actions: np.ndarray, A: int) -> np.ndarray:
    if actions.shape[1] == 0:
        return np.zeros(len(actions), dtype=np.int64)
    return np.ravel_multi_index(actions.T, (A,) * actions.shape[1])


@dataclass
class Distribution:
    values: np.ndarray
    probs: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.sum(self.values * self.probs))

    @property
    def second_moment(self) -> float:
        return float(np.sum(self.values ** 2 * self.probs))

    @property
    def var(self) -> float:
        return self.second_moment - self.mean ** 2


def _distribution(values, probs) -> Distribution:
    vals, inv = np.unique(values, return_inverse=True)
    p = np.zeros(len(vals))
    np.add.at(p, inv, probs)
    return Distribution(vals, p)


def weight_distributions(mdp: TabularMdp, mu: Policy, pi: Policy, H: int):
    """Exact laws, under mu, of the IS weight and the marginal action-sequence ratio."""
    tab = enumerate_trajectories(mdp, mu, pi, H)
    codes = _codes(tab.actions, mdp.n_actions)
    K = mdp.n_actions ** H
    p_mu_seq = np.zeros(K)
    p_pi_seq = np.zeros(K)
    np.add.at(p_mu_seq, codes, tab.prob_mu)
    np.add.at(p_pi_seq, codes, tab.prob_pi)
    ratio = p_pi_seq[codes] / p_mu_seq[codes]
    return _distribution(tab.is_weight, tab.prob_mu), _distribution(ratio, tab.prob_mu)


def is_expectation(mdp: TabularMdp, mu: Policy, pi: Policy, H: int,
                   mu_hat: Policy | None = None) -> float:
    """E_mu[prod pi / mu_hat * return]; mu_hat defaults to the true mu."""
    tab = enumerate_trajectories(mdp, mu, pi, H)
    if mu_hat is None:
        w = tab.is_weight
    else:
        Ph, Pp = policy_table(mu_hat, mdp.n_states), policy_table(pi, mdp.n_states)
        w = np.prod(Pp[tab.states, tab.actions] / Ph[tab.states, tab.actions], axis=1)
    return float(np.sum(tab.prob_mu * w * tab.ret))


# ---------------------------------------------------------------------------
# model-error decomposition: value gap = on-policy sum of one-step errors


def simulation_identity_gap(mdp: TabularMdp, model: TabularMdp, pi: Policy, H: int) -> float:
    """max_s |(V_model - V_true)(s) - E_{pi,true} sum_t [dr + dT . V_model,H-t-1]|."""
    if mdp.shape != model.shape:
        raise ValueError(f"MDP shapes {mdp.shape} and {model.shape} differ")
    if H == 0:
        return 0.0
    S = mdp.n_states
    lhs = state_values(model, pi, H) - state_values(mdp, pi, H)
    P = policy_table(pi, S)
    # model values for every remaining horizon 0..H-1
    v_model = [np.zeros(S)]
    for _ in range(H - 1):
        v_model.append(np.sum(P * (model.r + model.T @ v_model[-1]), axis=1))
    dr = model.r - mdp.r
    dT = model.T - mdp.T
    # d[s0, s] = P(s_t = s | s_0) under pi in the true MDP
    d = np.eye(S)
    P_pi = np.einsum("sa,sat->st", P, mdp.T)
    rhs = np.zeros(S)
    for t in range(H):
        err = np.sum(P * (dr + dT @ v_model[H - t - 1]), axis=1)
        rhs += d @ err
        d = d @ P_pi
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------------------
# estimated behavior policy on the tree


def tree_path_nodes(depth: int) -> list[int]:
    """Nodes on the always-a=0 path from the root (exclusive of the leaf)."""
    return [2 ** k - 1 for k in range(depth)]


def bias_with_estimated_mu(H: int, delta: float):
    """(exact E_mu[V_IS(mu_hat)], (1 - delta)^-H) on the tree of depth H.

    mu is uniform; mu_hat takes 1/2 - delta/2 for every state-action pair on
    the path to the rewarding leaf.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    mdp = build_tree_mdp(H)
    mu = tabular(np.full((mdp.n_states, 2), 0.5))
    table = np.full((mdp.n_states, 2), 0.5)
    for node in tree_path_nodes(H):
        table[node] = [0.5 - delta / 2, 0.5 + delta / 2]
    mu_hat = tabular(table)
    pi = tabular(np.tile([1.0, 0.0], (mdp.n_states, 1)))
    return is_expectation(mdp, mu, pi, H, mu_hat), (1.0 - delta) ** (-H)


# ---------------------------------------------------------------------------
# random instances


def random_tabular_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
                       horizon: int) -> TabularMdp:
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p0 = rng.dirichlet(np.ones(n_states))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(n_states, n_actions, horizon, p0, T, r)


def perturbed_model(rng: np.random.Generator, mdp: TabularMdp, scale: float = 0.3) -> TabularMdp:
    """Same shape, rows re-normalised after multiplicative noise."""
    T = mdp.T * rng.uniform(1.0 - scale, 1.0 + scale, size=mdp.T.shape)
    T = T / T.sum(axis=2, keepdims=True)
    r = mdp.r + rng.normal(0.0, scale, size=mdp.r.shape)
    return TabularMdp(mdp.n_states, mdp.n_actions, mdp.horizon, mdp.p0, T, r)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                  deterministic: bool = False, floor: float = 0.0) -> Policy:
    if deterministic:
        table = np.eye(n_actions)[rng.integers(n_actions, size=n_states)]
    else:
        table = rng.dirichlet(np.ones(n_actions), size=n_states)
        if floor > 0:
            table = (1 - n_actions * floor) * table + floor
        table = table / table.sum(axis=1, keepdims=True)
    return tabular(table)


def two_state_bandit():
    """(mdp, mu, pi) where Var(IS) = 2 and Var(marginal ratio) = 5/3."""
    T = np.zeros((2, 2, 2))
    T[:, :, :] = 0.5
    mdp = TabularMdp(2, 2, 1, np.array([0.5, 0.5]), T, np.zeros((2, 2)))
    mu = tabular([[0.5, 0.5], [0.25, 0.75]])
    pi = tabular([[1.0, 0.0], [1.0, 0.0]])
    return mdp, mu, pi
