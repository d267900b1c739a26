"""Q-learning of evaluation policies and exact action probabilities.

Policy kinds:

* ``greedy`` -- argmax of a Q-network, ties broken by the lowest action index;
* ``epsilon_greedy`` -- greedy with probability 1-eps, uniform otherwise;
* ``softened_greedy`` -- any deterministic policy mixed with eps-uniform noise;
* ``tabular`` -- an explicit (S, A) probability table indexed by ``int(state[0])``
  (a single-row table applies to every state).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .environments import Environment, EnvState
from .nn import MLP

logger = logging.getLogger(__name__)

POLICY_SCHEMA_VERSION = 1


class QNetwork:
    """State -> per-action values; one hidden ReLU layer by default."""

    def __init__(self, state_dim: int, n_actions: int, hidden: int | tuple = 64,
                 rng: np.random.Generator | None = None, center=None, scale=None):
        hidden = (hidden,) if isinstance(hidden, int) else tuple(hidden)
        self.n_actions = int(n_actions)
        self.net = MLP((state_dim, *hidden, n_actions), rng, center, scale)

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def forward(self, states: np.ndarray) -> Tensor:
        return self.net.forward(states)

    def predict(self, states: np.ndarray) -> np.ndarray:
        return self.net.predict(states)

    def to_dict(self) -> dict:
        return {"n_actions": self.n_actions, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "QNetwork":
        q = cls.__new__(cls)
        q.n_actions = int(d["n_actions"])
        q.net = MLP.from_dict(d["net"])
        return q


def argmax_lowest(values: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the first maximal index."""
    return np.argmax(values, axis=-1)


@dataclass
class Policy:
    kind: str
    n_actions: int
    q: object | None = None
    table: np.ndarray | None = None
    eps: float = 0.0
    base: "Policy | None" = None

    def __post_init__(self):
        if self.kind not in ("greedy", "epsilon_greedy", "softened_greedy", "tabular"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.eps < 1.0:
            raise ValueError("eps must lie in [0, 1)")
        if self.kind == "tabular":
            self.table = np.atleast_2d(np.asarray(self.table, dtype=float))
            if self.table.shape[1] != self.n_actions:
                raise ValueError("tabular policy width must equal the action count")
            if np.any(np.abs(self.table.sum(axis=1) - 1.0) > 1e-12) or np.any(self.table < 0):
                raise ValueError("tabular policy rows must be probability vectors")
        if self.kind == "softened_greedy" and (self.base is None or not self.base.is_deterministic):
            raise ValueError("softened_greedy needs a deterministic base policy")

    @property
    def is_deterministic(self) -> bool:
        if self.kind == "greedy":
            return True
        if self.kind == "tabular":
            return bool(np.all((self.table == 0.0) | (self.table == 1.0)))
        return False

    def _rows(self, states: np.ndarray) -> np.ndarray:
        if self.table.shape[0] == 1:
            return np.zeros(len(states), dtype=np.int64)
        return np.rint(states[:, 0]).astype(np.int64)

    def greedy_actions(self, states) -> np.ndarray:
        """Most probable action per state (lowest index on ties)."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.kind in ("greedy", "epsilon_greedy"):
            return argmax_lowest(self.q.predict(states))
        if self.kind == "softened_greedy":
            return self.base.greedy_actions(states)
        return argmax_lowest(self.table[self._rows(states)])

    def probs(self, states) -> np.ndarray:
        """(N, A) action probabilities for a batch of states."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        A = self.n_actions
        if self.kind == "tabular":
            return self.table[self._rows(states)].copy()
        onehot = np.eye(A)[self.greedy_actions(states)]
        if self.kind == "greedy":
            return onehot
        return (1.0 - self.eps) * onehot + self.eps / A

    def action_prob(self, state, action: int) -> float:
        return float(self.probs(np.asarray(state, dtype=float)[None, :])[0, int(action)])

    def sample_action(self, state, rng: np.random.Generator) -> int:
        p = self.probs(np.asarray(state, dtype=float)[None, :])[0]
        if self.is_deterministic:
            return int(np.argmax(p))
        # inverse-CDF on one uniform draw keeps the rng stream length fixed
        u = rng.random()
        return int(min(np.searchsorted(np.cumsum(p), u, side="right"), self.n_actions - 1))

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {"schema_version": POLICY_SCHEMA_VERSION, "kind": self.kind,
             "n_actions": self.n_actions, "eps": self.eps}
        if self.q is not None:
            if not isinstance(self.q, QNetwork):
                raise TypeError("only QNetwork-backed policies serialise")
            d["q"] = self.q.to_dict()
        if self.table is not None:
            d["table"] = self.table.tolist()
        if self.base is not None:
            d["base"] = self.base.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        if d.get("schema_version") != POLICY_SCHEMA_VERSION:
            raise ValueError(f"unsupported policy schema {d.get('schema_version')!r}")
        return cls(kind=d["kind"], n_actions=int(d["n_actions"]),
                   q=QNetwork.from_dict(d["q"]) if "q" in d else None,
                   table=np.asarray(d["table"]) if "table" in d else None,
                   eps=float(d["eps"]),
                   base=cls.from_dict(d["base"]) if "base" in d else None)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "Policy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def greedy(q, n_actions: int | None = None) -> Policy:
    return Policy("greedy", n_actions or q.n_actions, q=q)


def epsilon_greedy(q, eps: float, n_actions: int | None = None) -> Policy:
    return Policy("epsilon_greedy", n_actions or q.n_actions, q=q, eps=eps)


def soften(pi: Policy, eps: float) -> Policy:
    return Policy("softened_greedy", pi.n_actions, eps=eps, base=pi)


def tabular(table) -> Policy:
    table = np.atleast_2d(np.asarray(table, dtype=float))
    return Policy("tabular", table.shape[1], table=table)


def uniform(n_actions: int) -> Policy:
    return tabular(np.full((1, n_actions), 1.0 / n_actions))


def check_support(mu: Policy, pi: Policy, states) -> bool:
    """True when mu puts positive mass wherever pi does, on every given state."""
    pm, pp = mu.probs(states), pi.probs(states)
    return bool(np.all((pp <= 0.0) | (pm > 0.0)))


# ---------------------------------------------------------------------------
# fitted Q iteration (replay buffer + periodic target copy)


class PolicyTrainingError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


@dataclass
class QBudget:
    episodes: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    target_update: int = 250
    gamma: float = 0.99
    hidden: int = 64
    buffer_size: int = 50_000
    warmup: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_episodes: int = 150
    updates_per_step: int = 1
    exploring_starts: float = 0.0
    eval_every: int = 10
    eval_rollouts: int = 20
    return_threshold: float = -np.inf
    # when set, training stops at the first evaluation inside [threshold, ceiling]
    return_ceiling: float | None = None
    stop_at_threshold: bool = True
    grad_clip: float = 10.0

    @classmethod
    def from_dict(cls, d: dict) -> "QBudget":
        return cls(**d)


def greedy_return(env: Environment, q, rollouts: int, rng: np.random.Generator) -> float:
    total = 0.0
    for _ in range(rollouts):
        state = env.reset(rng)
        while not state.terminal:
            a = int(argmax_lowest(q.predict(state.observation[None, :]))[0])
            state, r = env.step(state, a)
            total += r
    return total / rollouts


def _td_loss(qnet: QNetwork, target: QNetwork, batch, gamma: float) -> Tensor:
    s, a, r, s2, done = batch
    n, A = len(a), qnet.n_actions
    # double-DQN target: online argmax, target evaluation
    a2 = argmax_lowest(qnet.predict(s2))
    q2 = target.predict(s2)[np.arange(n), a2]
    y = r + gamma * (1.0 - done) * q2
    onehot = np.eye(A)[a]
    pred = ad.sum(ad.multiply(qnet.forward(s), Tensor(onehot)), axis=1)
    return ad.mean(ad.square(ad.sub(pred, Tensor(y))))


def fit_q_iteration(env: Environment, budget: QBudget | None = None, rng_seed: int = 0,
                    q_init: QNetwork | None = None) -> QNetwork:
    """Train a Q-network until its greedy policy meets ``budget.return_threshold``.

    Raises :class:`PolicyTrainingError` (carrying the best evaluated return)
    if no evaluation meets the threshold (and ceiling, if any) within budget.
    """
    budget = budget or QBudget()
    rng = np.random.default_rng(rng_seed)
    eval_rng_seed = int(rng.integers(2**31))
    spec = env.spec
    qnet = q_init or QNetwork(spec.state_dim, spec.n_actions, budget.hidden, rng,
                              env.obs_center, env.obs_scale)
    target = QNetwork.from_dict(qnet.to_dict())
    opt = ad.AdamState.for_params(qnet.params, lr=budget.lr)

    cap = budget.buffer_size
    S = np.zeros((cap, spec.state_dim))
    S2 = np.zeros((cap, spec.state_dim))
    Aa = np.zeros(cap, dtype=np.int64)
    R = np.zeros(cap)
    D = np.zeros(cap)
    size = ptr = 0
    updates = 0
    best, best_params = -np.inf, None

    for episode in range(budget.episodes):
        frac = min(1.0, episode / max(1, budget.eps_decay_episodes))
        eps = budget.eps_start + frac * (budget.eps_end - budget.eps_start)
        if rng.random() < budget.exploring_starts:
            state = EnvState(env.name, env.exploring_observation(rng))
        else:
            state = env.reset(rng)
        while not state.terminal:
            if rng.random() < eps:
                a = int(rng.integers(spec.n_actions))
            else:
                a = int(argmax_lowest(qnet.predict(state.observation[None, :]))[0])
            nxt, r = env.step(state, a)
            S[ptr], Aa[ptr], R[ptr], S2[ptr] = state.observation, a, r, nxt.observation
            D[ptr] = float(nxt.terminal and not nxt.truncated)
            ptr = (ptr + 1) % cap
            size = min(size + 1, cap)
            state = nxt
            if size < budget.warmup:
                continue
            for _ in range(budget.updates_per_step):
                idx = rng.integers(size, size=budget.batch_size)
                loss = _td_loss(qnet, target, (S[idx], Aa[idx], R[idx], S2[idx], D[idx]),
                                budget.gamma)
                ad.zero_grad(qnet.params)
                ad.backward(loss)
                _clip_grads(qnet.params, budget.grad_clip)
                ad.adam_step(qnet.params, opt)
                updates += 1
                if updates % budget.target_update == 0:
                    target.net.copy_from(qnet.net)

        if (episode + 1) % budget.eval_every == 0 and size >= budget.warmup:
            score = greedy_return(env, qnet, budget.eval_rollouts,
                                  np.random.default_rng(eval_rng_seed))
            logger.debug("episode %d: greedy return %.2f", episode + 1, score)
            in_band = score >= budget.return_threshold and (
                budget.return_ceiling is None or score <= budget.return_ceiling)
            if budget.return_ceiling is not None:
                if in_band:
                    return qnet
                # report the evaluation closest to the band on failure
                if abs(score - budget.return_threshold) < abs(best - budget.return_threshold):
                    best = score
                continue
            if score > best:
                best, best_params = score, qnet.to_dict()
            if in_band and budget.stop_at_threshold:
                return qnet

    if budget.return_ceiling is None and best_params is not None and best >= budget.return_threshold:
        return QNetwork.from_dict(best_params)
    raise PolicyTrainingError(
        f"greedy return threshold {budget.return_threshold} not reached on {env.name}; "
        f"best evaluated return {best:.2f}", best)


def _clip_grads(params, max_norm: float) -> None:
    total = np.sqrt(np.sum([np.sum(p.grad ** 2) for p in params]))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total
