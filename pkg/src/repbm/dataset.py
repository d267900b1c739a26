"""Logged trajectories, factual masks, marginal match fractions, splits, JSONL I/O.

Variable-length trajectories are padded logically: once a trajectory ends it
sits in an absorbing state where every policy's action "matches", so its
factual mask stays frozen at its last value for the remaining steps up to the
horizon. Per-step losses and MMD groups only ever use real steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .environments import Environment, make
from .policies import Policy

SCHEMA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class NotAnnotatedError(RuntimeError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray          # (L+1, d)
    actions: np.ndarray         # (L,)
    rewards: np.ndarray         # (L,)
    behavior_probs: np.ndarray  # (L,)
    # True when the environment ended the episode (not a horizon cut-off)
    terminal: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.states), -1)
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        self.behavior_probs = np.asarray(self.behavior_probs, dtype=float).reshape(-1)
        L = len(self.actions)
        if len(self.states) != L + 1 or len(self.rewards) != L or len(self.behavior_probs) != L:
            raise ValueError("trajectory field lengths are inconsistent")
        if L and (np.any(self.behavior_probs <= 0) or np.any(self.behavior_probs > 1)):
            raise ValueError("behavior probabilities must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def done_flags(self) -> np.ndarray:
        """Per-step label: did this step end the episode by the environment rule."""
        d = np.zeros(len(self), dtype=float)
        if len(self) and self.terminal:
            d[-1] = 1.0
        return d

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.terminal == other.terminal
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards)
                and np.array_equal(self.behavior_probs, other.behavior_probs))


@dataclass
class Dataset:
    trajectories: list
    horizon: int
    env: str
    # (n, H) boolean, None until annotated
    factual_mask: np.ndarray | None = None
    u_hat: np.ndarray | None = None
    # per trajectory: "train" | "validation"; None until split
    split: list | None = None
    uhat_scope: str = "all"
    behavior_policy_hash: str = ""
    eval_policy_hash: str = ""
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def annotated(self) -> bool:
        return self.factual_mask is not None

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(tr) for tr in self.trajectories], dtype=np.int64)

    @property
    def initial_states(self) -> np.ndarray:
        return np.array([tr.states[0] for tr in self.trajectories])

    def require_annotation(self) -> None:
        if not self.annotated:
            raise NotAnnotatedError("dataset has not been annotated against an evaluation policy")

    def subset(self, which: str) -> "Dataset":
        """Trajectories of one split; masks carried over, u_hat recomputed unless scope is 'all'."""
        if self.split is None:
            raise RuntimeError("dataset has not been split")
        idx = [i for i, s in enumerate(self.split) if s == which]
        sub = replace(self, trajectories=[self.trajectories[i] for i in idx],
                      split=[which] * len(idx))
        if self.factual_mask is not None:
            sub.factual_mask = self.factual_mask[idx]
            if self.uhat_scope != "all" or which != "train":
                sub.u_hat = match_fractions(sub.factual_mask)
        return sub

    def train(self) -> "Dataset":
        return self.subset("train")

    def validation(self) -> "Dataset":
        return self.subset("validation")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(np.asarray(a), np.asarray(b))

        return (self.horizon == other.horizon and self.env == other.env
                and self.trajectories == other.trajectories
                and same(self.factual_mask, other.factual_mask)
                and same(self.u_hat, other.u_hat)
                and self.split == other.split and self.uhat_scope == other.uhat_scope
                and self.behavior_policy_hash == other.behavior_policy_hash
                and self.eval_policy_hash == other.eval_policy_hash
                and self.seed == other.seed)


# ---------------------------------------------------------------------------


def rollout(env: Environment, policy: Policy, rng: np.random.Generator,
            horizon: int | None = None) -> Trajectory:
    horizon = env.spec.horizon if horizon is None else horizon
    state = env.reset(rng)
    states, actions, rewards, probs = [state.observation], [], [], []
    while not state.terminal and state.t < horizon:
        a = policy.sample_action(state.observation, rng)
        probs.append(policy.action_prob(state.observation, a))
        state, r = env.step(state, a)
        states.append(state.observation)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.array(states), actions, rewards, probs,
                      terminal=bool(state.terminal and not state.truncated))


def collect(env: str | Environment, policy: Policy, n: int, rng_seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    env = make(env) if isinstance(env, str) else env
    # one independent stream per trajectory
    streams = np.random.SeedSequence(rng_seed).spawn(n)
    trajs = [rollout(env, policy, np.random.default_rng(ss)) for ss in streams]
    return Dataset(trajs, env.spec.horizon, env.name,
                   behavior_policy_hash=_safe_digest(policy), seed=rng_seed)


def _safe_digest(policy: Policy) -> str:
    try:
        return policy.digest()
    except TypeError:
        return ""


def match_fractions(mask: np.ndarray) -> np.ndarray:
    n = mask.shape[0]
    if n == 0:
        return np.zeros(mask.shape[1])
    return mask.sum(axis=0) / n


def annotate(dataset: Dataset, pi: Policy) -> Dataset:
    if not pi.is_deterministic:
        raise ValueError("annotation needs a deterministic evaluation policy")
    H = dataset.horizon
    n = len(dataset)
    mask = np.zeros((n, H), dtype=bool)
    for i, tr in enumerate(dataset.trajectories):
        L = len(tr)
        if L == 0:
            mask[i] = True
            continue
        match = pi.greedy_actions(tr.states[:-1]) == tr.actions
        prefix = np.logical_and.accumulate(match)
        mask[i, :L] = prefix
        mask[i, L:] = prefix[-1]
    out = replace(dataset, factual_mask=mask, u_hat=match_fractions(mask),
                  eval_policy_hash=_safe_digest(pi))
    return out


def counterfactual_groups(dataset: Dataset, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of trajectories in the factual and counterfactual groups at step t.

    Factual: a_{0:t} matches pi. Counterfactual: a_{0:t-1} matches, a_t does not.
    Only trajectories that really have a step t are included.
    """
    dataset.require_annotation()
    m = dataset.factual_mask
    alive = dataset.lengths > t
    prev = m[:, t - 1] if t > 0 else np.ones(len(dataset), dtype=bool)
    fact = np.flatnonzero(alive & m[:, t])
    cf = np.flatnonzero(alive & prev & ~m[:, t])
    return fact, cf


def split(dataset: Dataset, train_fraction: float = 0.9, rng_seed: int = 0,
          uhat_scope: str = "train") -> Dataset:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if uhat_scope not in ("train", "all"):
        raise ValueError("uhat_scope must be 'train' or 'all'")
    n = len(dataset)
    n_val = max(1, n - int(round(train_fraction * n)))
    n_train = n - n_val
    if n_train < 1:
        raise ValueError(f"a split of {n} trajectories leaves an empty training set")
    order = np.random.default_rng(rng_seed).permutation(n)
    assign = ["train"] * n
    for i in order[n_train:]:
        assign[i] = "validation"
    out = replace(dataset, split=assign, uhat_scope=uhat_scope)
    if out.factual_mask is not None and uhat_scope == "train":
        out.u_hat = match_fractions(out.factual_mask[[s == "train" for s in assign]])
    return out


# ---------------------------------------------------------------------------
# JSONL persistence


def _header(ds: Dataset) -> dict:
    return {
        "record": "header",
        "schema_version": SCHEMA_VERSION,
        "env": ds.env,
        "horizon": ds.horizon,
        "behavior_policy_hash": ds.behavior_policy_hash,
        "eval_policy_hash": ds.eval_policy_hash,
        "seed": ds.seed,
        "n": len(ds),
        "u_hat": None if ds.u_hat is None else ds.u_hat.tolist(),
        "uhat_scope": ds.uhat_scope,
        "annotated": ds.annotated,
        "split": ds.split is not None,
    }


def save(dataset: Dataset, path) -> Path:
    path = Path(path)
    lines = [json.dumps(_header(dataset))]
    for i, tr in enumerate(dataset.trajectories):
        rec = {
            "record": "trajectory",
            "states": tr.states.tolist(),
            "actions": tr.actions.tolist(),
            "rewards": tr.rewards.tolist(),
            "behavior_probs": tr.behavior_probs.tolist(),
            "terminal": tr.terminal,
        }
        if dataset.factual_mask is not None:
            rec["mask"] = dataset.factual_mask[i].tolist()
        if dataset.split is not None:
            rec["split"] = dataset.split[i]
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")
    return path


def load(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: empty file, missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:1: header is not valid JSON ({e.msg})") from None
    if header.get("record") != "header" or header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"{path}:1: missing or unsupported header record")
    trajs, masks, splits = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            d = len(rec["states"][0]) if rec["states"] else 1
            trajs.append(Trajectory(np.asarray(rec["states"], dtype=float).reshape(-1, d),
                                    rec["actions"], rec["rewards"], rec["behavior_probs"],
                                    bool(rec["terminal"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
            raise DatasetFormatError(f"{path}:{lineno}: bad trajectory record ({e})") from None
        if header["annotated"]:
            if "mask" not in rec:
                raise DatasetFormatError(f"{path}:{lineno}: annotated file lacks a mask")
            masks.append(rec["mask"])
        if header["split"]:
            if "split" not in rec:
                raise DatasetFormatError(f"{path}:{lineno}: split file lacks an assignment")
            splits.append(rec["split"])
    if len(trajs) != header["n"]:
        raise DatasetFormatError(
            f"{path}:{len(lines)}: header announces {header['n']} trajectories, found {len(trajs)}")
    H = int(header["horizon"])
    return Dataset(
        trajs, H, header["env"],
        factual_mask=np.asarray(masks, dtype=bool).reshape(len(trajs), H) if header["annotated"] else None,
        u_hat=None if header["u_hat"] is None else np.asarray(header["u_hat"], dtype=float),
        split=splits if header["split"] else None,
        uhat_scope=header["uhat_scope"],
        behavior_policy_hash=header["behavior_policy_hash"],
        eval_policy_hash=header["eval_policy_hash"],
        seed=header["seed"],
    )
