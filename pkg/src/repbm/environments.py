"""Benchmark environments behind one stepping contract.

CartPole and MountainCar follow the classic-control dynamics (Euler
integration, standard constants, two actions each). The binary tree MDP and
the small ``drift`` domain are exactly enumerable / exactly realizable and are
used by the oracle and consistency checks.

Registry names: ``cartpole``, ``mountaincar``, ``tree:<depth>``,
``drift`` (optionally ``drift:<horizon>``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    n_actions: int
    horizon: int

    def __post_init__(self):
        if self.n_actions < 2:
            raise ValueError("an environment needs at least two actions")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class EnvState:
    env: str
    observation: np.ndarray
    t: int = 0
    terminal: bool = False
    # set when the episode stopped only because t reached the horizon
    truncated: bool = False

    def __eq__(self, other):
        if not isinstance(other, EnvState):
            return NotImplemented
        return (self.env == other.env and self.t == other.t and self.terminal == other.terminal
                and self.truncated == other.truncated
                and np.array_equal(self.observation, other.observation))

    __hash__ = None


class TerminalStateError(RuntimeError):
    pass


@dataclass
class TabularMdp:
    """Finite MDP: ``T[s, a, s']`` row-stochastic and mean rewards ``r[s, a]``."""

    n_states: int
    n_actions: int
    horizon: int
    p0: np.ndarray
    T: np.ndarray
    r: np.ndarray
    reward_noise: float = 0.0

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        S, A = self.n_states, self.n_actions
        if self.p0.shape != (S,) or self.T.shape != (S, A, S) or self.r.shape != (S, A):
            raise ValueError("TabularMdp arrays have inconsistent shapes")
        if abs(self.p0.sum() - 1.0) > 1e-12 or np.any(self.p0 < 0):
            raise ValueError("p0 must be a probability vector")
        if np.any(np.abs(self.T.sum(axis=2) - 1.0) > 1e-12) or np.any(self.T < 0):
            raise ValueError("every T[s, a] must sum to one")

    @property
    def shape(self) -> tuple:
        return (self.n_states, self.n_actions)


class Environment:
    spec: EnvSpec
    # affine input normalisation hints for networks: (obs - obs_center) / obs_scale
    obs_center: np.ndarray | None = None
    obs_scale: np.ndarray | None = None

    @property
    def name(self) -> str:
        return self.spec.name

    def initial_observation(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, obs: np.ndarray, action: int) -> tuple[np.ndarray, float, bool]:
        """One deterministic step: (next observation, reward, environment-terminal)."""
        raise NotImplementedError

    def exploring_observation(self, rng: np.random.Generator) -> np.ndarray:
        """Broad start-state sampler used only for policy training."""
        return self.initial_observation(rng)

    def reset(self, rng: np.random.Generator | int | None = None) -> EnvState:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return EnvState(self.name, self.initial_observation(rng))

    def step(self, state: EnvState, action: int) -> tuple[EnvState, float]:
        if state.terminal:
            raise TerminalStateError(f"{self.name}: cannot step a terminal state (t={state.t})")
        if not 0 <= int(action) < self.spec.n_actions:
            raise ValueError(f"{self.name}: action {action} outside [0, {self.spec.n_actions})")
        obs, reward, done = self.dynamics(state.observation, int(action))
        t = state.t + 1
        truncated = (not done) and t >= self.spec.horizon
        return EnvState(self.name, obs, t, done or truncated, truncated), reward


class CartPole(Environment):
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    total_mass = masscart + masspole
    length = 0.5  # half the pole length
    polemass_length = masspole * length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4
    obs_center = np.zeros(4)
    obs_scale = np.array([2.4, 2.0, 0.21, 2.0])

    def __init__(self, horizon: int = 200):
        self.spec = EnvSpec("cartpole", 4, 2, horizon)

    def initial_observation(self, rng):
        return rng.uniform(-0.05, 0.05, size=4)

    def exploring_observation(self, rng):
        return rng.uniform([-2.0, -1.5, -0.18, -1.5], [2.0, 1.5, 0.18, 1.5])

    def dynamics(self, obs, action):
        x, x_dot, theta, theta_dot = (float(v) for v in obs)
        force = self.force_mag if action == 1 else -self.force_mag
        costheta, sintheta = math.cos(theta), math.sin(theta)
        temp = (force + self.polemass_length * theta_dot ** 2 * sintheta) / self.total_mass
        thetaacc = (self.gravity * sintheta - costheta * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * costheta ** 2 / self.total_mass))
        xacc = temp - self.polemass_length * thetaacc * costheta / self.total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * xacc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * thetaacc
        done = abs(x) > self.x_threshold or abs(theta) > self.theta_threshold
        return np.array([x, x_dot, theta, theta_dot]), 1.0, done


class MountainCar(Environment):
    """Two-action MountainCar: 0 pushes left, 1 pushes right; reward -1 per step."""

    min_position = -1.2
    max_position = 0.6
    max_speed = 0.07
    goal_position = 0.5
    force = 0.001
    gravity = 0.0025
    obs_center = np.array([-0.3, 0.0])
    obs_scale = np.array([0.9, 0.07])

    def __init__(self, horizon: int = 200):
        self.spec = EnvSpec("mountaincar", 2, 2, horizon)

    def initial_observation(self, rng):
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def exploring_observation(self, rng):
        return np.array([rng.uniform(self.min_position, self.goal_position),
                         rng.uniform(-self.max_speed, self.max_speed)])

    def dynamics(self, obs, action):
        position, velocity = float(obs[0]), float(obs[1])
        push = self.force if action == 1 else -self.force
        velocity += push - self.gravity * math.cos(3 * position)
        velocity = min(max(velocity, -self.max_speed), self.max_speed)
        position += velocity
        position = min(max(position, self.min_position), self.max_position)
        if position == self.min_position and velocity < 0:
            velocity = 0.0
        done = position >= self.goal_position
        return np.array([position, velocity]), -1.0, done


class TreeEnv(Environment):
    """Binary tree of the given depth; node ``i`` has children ``2i+1`` (a=0), ``2i+2`` (a=1).

    The observation is the one-element vector ``[node index]``. Reward 1 is
    paid only on the transition into the leftmost leaf.
    """

    def __init__(self, depth: int):
        if depth < 1:
            raise ValueError("tree depth must be >= 1")
        self.depth = depth
        self.spec = EnvSpec(f"tree:{depth}", 1, 2, depth)
        self.mdp = build_tree_mdp(depth)

    def initial_observation(self, rng):
        return np.array([0.0])

    def dynamics(self, obs, action):
        s = int(obs[0])
        nxt = 2 * s + 1 + action
        return np.array([float(nxt)]), float(self.mdp.r[s, action]), False


class DriftEnv(Environment):
    """1-D drift: x' = x + 0.1 (a=1) or x - 0.1 (a=0); reward x + 0.5 a; fixed horizon.

    Dynamics, reward and the (never-firing) terminal condition are all exactly
    representable by the RepBM model class.
    """

    step_size = 0.1

    def __init__(self, horizon: int = 10):
        self.spec = EnvSpec("drift" if horizon == 10 else f"drift:{horizon}", 1, 2, horizon)

    def initial_observation(self, rng):
        return np.array([rng.uniform(-1.0, 1.0)])

    def dynamics(self, obs, action):
        x = float(obs[0])
        reward = x + 0.5 * action
        return np.array([x + (self.step_size if action == 1 else -self.step_size)]), reward, False


def node_depth(index: int) -> int:
    return int(math.floor(math.log2(index + 1)))


def build_tree_mdp(depth: int) -> TabularMdp:
    if depth < 1:
        raise ValueError("tree depth must be >= 1")
    n = 2 ** (depth + 1) - 1
    T = np.zeros((n, 2, n))
    r = np.zeros((n, 2))
    first_leaf = 2 ** depth - 1
    for s in range(n):
        for a in range(2):
            if s < first_leaf:
                T[s, a, 2 * s + 1 + a] = 1.0
            else:
                T[s, a, s] = 1.0  # leaves absorb; never reached within the horizon
    # leftmost node one level above the leaves
    r[2 ** (depth - 1) - 1, 0] = 1.0
    p0 = np.zeros(n)
    p0[0] = 1.0
    return TabularMdp(n, 2, depth, p0, T, r)


def make(name: str, horizon: int | None = None) -> Environment:
    kind, _, arg = name.partition(":")
    if kind == "cartpole":
        return CartPole(horizon or 200)
    if kind == "mountaincar":
        return MountainCar(horizon or 200)
    if kind == "tree":
        if not arg:
            raise ValueError("tree environment needs a depth, e.g. 'tree:4'")
        return TreeEnv(int(arg))
    if kind == "drift":
        return DriftEnv(int(arg) if arg else (horizon or 10))
    raise KeyError(f"unknown environment {name!r}")


def env_reset(name: str, rng_seed: int) -> EnvState:
    return make(name).reset(np.random.default_rng(rng_seed))


def env_step(state: EnvState, action: int) -> tuple[EnvState, float]:
    return make(state.env).step(state, action)


def rollout_return(env: Environment, obs0: np.ndarray, act, horizon: int | None = None) -> float:
    """Return of the deterministic action rule ``act(obs)`` from ``obs0``."""
    horizon = env.spec.horizon if horizon is None else horizon
    state = EnvState(env.name, np.asarray(obs0, dtype=float))
    total = 0.0
    while not state.terminal and state.t < horizon:
        state, r = env.step(state, int(act(state.observation)))
        total += r
    return total
