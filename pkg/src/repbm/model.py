"""Representation-balancing MDP model.

A shared representation ``z = relu(W s + b)`` feeds three per-action linear
heads: reward, state delta and a terminal logit. Training minimises

    R_mu + R_pi_u + alpha * sum_t MMD(z | factual_t, z | counterfactual_t)
    + weight_decay * ||W||^2 / n^(3/8)

where R_mu sums per-step losses over all logged steps and R_pi_u reweights
the steps whose action prefix matches the evaluation policy by
``1 / u_hat[t]``. The AM baseline drops R_pi_u and the MMD penalty; AM(pi)
drops R_mu.

States are standardised with training-set statistics; the transition loss
``L * ||s' - s'_pred||^2`` is measured in those standardised units.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .balance import GroupPlan, KernelSpec, grouped_mmd, median_bandwidth
from .dataset import Dataset, counterfactual_groups
from .nn import glorot
from .policies import Policy

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
BCE_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int, terms: dict):
        super().__init__(f"{message} (epoch {epoch}, terms {terms})")
        self.epoch = epoch
        self.terms = terms


@dataclass
class RepBmConfig:
    alpha: float = 0.01
    lr: float = 3e-3
    # cosine decay from lr to lr * lr_final_scale over the run; 1.0 keeps it constant
    lr_final_scale: float = 1.0
    epochs: int = 600
    # None trains full-batch; otherwise minibatches of this many trajectories
    batch_size: int | None = None
    weight_decay: float = 1e-4
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seed: int = 0
    rep_dim: int = 32
    lipschitz: float = 1.0
    use_mu_risk: bool = True
    use_pi_risk: bool = True
    eval_every: int = 10
    normalize: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_final_scale <= 1:
            raise ValueError("lr_final_scale must be in (0, 1]")
        if not (self.use_mu_risk or self.use_pi_risk):
            raise ValueError("at least one risk term is required")
        if isinstance(self.kernel, dict):
            self.kernel = KernelSpec.from_dict(self.kernel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RepBmConfig":
        return cls(**d)


def am_config(base: RepBmConfig | None = None) -> RepBmConfig:
    return replace(base or RepBmConfig(), alpha=0.0, use_pi_risk=False, use_mu_risk=True)


def am_pi_config(base: RepBmConfig | None = None) -> RepBmConfig:
    return replace(base or RepBmConfig(), use_mu_risk=False, use_pi_risk=True)


class RepBmModel:
    def __init__(self, state_dim: int, n_actions: int, rep_dim: int = 32,
                 rng: np.random.Generator | None = None, lipschitz: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        d, A, k = int(state_dim), int(n_actions), int(rep_dim)
        self.state_dim, self.n_actions, self.rep_dim = d, A, k
        self.lipschitz = float(lipschitz)
        self.center = np.zeros(d)
        self.scale = np.ones(d)
        self.W_phi = Tensor(glorot(rng, d, k), requires_grad=True)
        self.b_phi = Tensor(np.full(k, 0.1), requires_grad=True)
        self.W_r = Tensor(glorot(rng, k, A), requires_grad=True)
        self.b_r = Tensor(np.zeros(A), requires_grad=True)
        self.W_T = Tensor(glorot(rng, k, A * d), requires_grad=True)
        self.b_T = Tensor(np.zeros(A * d), requires_grad=True)
        self.W_d = Tensor(glorot(rng, k, A), requires_grad=True)
        self.b_d = Tensor(np.zeros(A), requires_grad=True)
        self.kernel: KernelSpec = KernelSpec()
        self.config: RepBmConfig | None = None
        self.history: list[dict] = []
        # stacked identities summing the action-selected delta block into d outputs
        self._block_sum = np.tile(np.eye(d), (A, 1))

    @property
    def params(self) -> list[Tensor]:
        return [self.W_phi, self.b_phi, self.W_r, self.b_r,
                self.W_T, self.b_T, self.W_d, self.b_d]

    @property
    def weights(self) -> list[Tensor]:
        return [self.W_phi, self.W_r, self.W_T, self.W_d]

    def set_normalisation(self, center, scale) -> None:
        self.center = np.asarray(center, dtype=float).copy()
        scale = np.asarray(scale, dtype=float).copy()
        scale[~(scale > 1e-8)] = 1.0
        self.scale = scale

    # -- differentiable pieces ---------------------------------------------

    def represent(self, states: np.ndarray) -> Tensor:
        x = Tensor((np.atleast_2d(states) - self.center) / self.scale)
        return ad.relu(ad.bias_add(ad.matmul(x, self.W_phi), self.b_phi))

    def heads(self, z: Tensor, actions: np.ndarray):
        """Per-row reward, standardised delta and terminal logit at the given actions."""
        A, d = self.n_actions, self.state_dim
        onehot = np.eye(A)[np.asarray(actions, dtype=np.int64)]
        r_all = ad.bias_add(ad.matmul(z, self.W_r), self.b_r)
        r_hat = ad.sum(ad.multiply(r_all, Tensor(onehot)), axis=1)
        t_all = ad.bias_add(ad.matmul(z, self.W_T), self.b_T)
        block_mask = np.repeat(onehot, d, axis=1)
        delta = ad.matmul(ad.multiply(t_all, Tensor(block_mask)), Tensor(self._block_sum))
        d_all = ad.bias_add(ad.matmul(z, self.W_d), self.b_d)
        logit = ad.sum(ad.multiply(d_all, Tensor(onehot)), axis=1)
        return r_hat, delta, logit

    def step_losses(self, z: Tensor, actions, rewards, states, next_states, dones):
        """(reward loss, transition loss, terminal loss) tensors, one entry per row."""
        r_hat, delta, logit = self.heads(z, actions)
        l_r = ad.square(ad.sub(r_hat, Tensor(rewards)))
        target = (np.asarray(next_states) - np.asarray(states)) / self.scale
        l_T = ad.scalar_scale(ad.sum(ad.square(ad.sub(delta, Tensor(target))), axis=1),
                              self.lipschitz)
        # BCE with logits as softplus(x) - y x
        l_d = ad.sub(ad.softplus(logit), ad.multiply(Tensor(dones), logit))
        return l_r, l_T, l_d

    # -- numpy inference -----------------------------------------------------

    def _z(self, states):
        x = (np.atleast_2d(states) - self.center) / self.scale
        return np.maximum(x @ self.W_phi.data + self.b_phi.data, 0.0)

    def predict(self, states, actions):
        """(reward, next state, terminal probability) for each (state, action) row."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        n, d = states.shape
        z = self._z(states)
        rows = np.arange(n)
        r = (z @ self.W_r.data + self.b_r.data)[rows, actions]
        t_all = (z @ self.W_T.data + self.b_T.data).reshape(n, self.n_actions, d)
        nxt = states + t_all[rows, actions] * self.scale
        logit = (z @ self.W_d.data + self.b_d.data)[rows, actions]
        p = 0.5 * (1.0 + np.tanh(0.5 * logit))
        return r, nxt, p

    def predict_reward(self, s, a) -> float:
        return float(self.predict(s, [a])[0][0])

    def rollout_values(self, states, pi: Policy, steps) -> np.ndarray:
        """Deterministic in-model returns of pi from each state for ``steps`` steps."""
        states = np.atleast_2d(np.asarray(states, dtype=float)).copy()
        steps = np.broadcast_to(np.asarray(steps, dtype=np.int64), (len(states),))
        total = np.zeros(len(states))
        live = steps > 0
        t = 0
        while live.any():
            idx = np.flatnonzero(live)
            a = pi.greedy_actions(states[idx])
            r, nxt, p_end = self.predict(states[idx], a)
            total[idx] += r
            states[idx] = nxt
            t += 1
            live[idx] = (p_end <= 0.5) & (steps[idx] > t)
        return total

    def q_values(self, states, actions, pi: Policy, steps) -> np.ndarray:
        """r(s, a) plus the in-model value of pi from the predicted next state."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        steps = np.broadcast_to(np.asarray(steps, dtype=np.int64), (len(states),))
        r, nxt, p_end = self.predict(states, actions)
        cont = (p_end <= 0.5) & (steps > 1)
        out = r.copy()
        if cont.any():
            out[cont] += self.rollout_values(nxt[cont], pi, steps[cont] - 1)
        return out

    # -- snapshots -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "state_dim": self.state_dim, "n_actions": self.n_actions, "rep_dim": self.rep_dim,
            "lipschitz": self.lipschitz,
            "center": self.center.tolist(), "scale": self.scale.tolist(),
            "params": [p.data.tolist() for p in self.params],
            "kernel": self.kernel.to_dict(),
            "config": None if self.config is None else self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RepBmModel":
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema {d.get('schema_version')!r}")
        m = cls(d["state_dim"], d["n_actions"], d["rep_dim"], lipschitz=d["lipschitz"])
        m.set_normalisation(d["center"], d["scale"])
        for p, v in zip(m.params, d["params"]):
            p.data[...] = np.asarray(v, dtype=float)
        m.kernel = KernelSpec.from_dict(d["kernel"])
        m.config = None if d["config"] is None else RepBmConfig.from_dict(d["config"])
        return m

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "RepBmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def restore(self, snap) -> None:
        for p, v in zip(self.params, snap):
            p.data[...] = v


# ---------------------------------------------------------------------------
# single-step losses on raw values


def loss_reward(r_hat: float, r: float) -> float:
    return (float(r_hat) - float(r)) ** 2


def loss_transition(predicted_next, next_state, lipschitz: float = 1.0) -> float:
    diff = np.asarray(predicted_next, dtype=float) - np.asarray(next_state, dtype=float)
    return float(lipschitz * np.sum(diff ** 2))


def loss_terminal(p_end: float, done: bool) -> float:
    p = min(max(float(p_end), BCE_EPS), 1.0 - BCE_EPS)
    return -np.log(p) if done else -np.log(1.0 - p)


def model_loss_reward(model: RepBmModel, s, a, r) -> float:
    return loss_reward(model.predict(s, [a])[0][0], r)


def model_loss_transition(model: RepBmModel, s, a, s_next) -> float:
    """L * ||(s'_pred - s') / scale||^2, the per-step form the objective uses."""
    nxt = model.predict(s, [a])[1][0]
    return loss_transition(nxt / model.scale, np.asarray(s_next, dtype=float) / model.scale,
                           model.lipschitz)


def model_loss_terminal(model: RepBmModel, s, a, done: bool) -> float:
    return loss_terminal(model.predict(s, [a])[2][0], done)


# ---------------------------------------------------------------------------
# flattened training batches


@dataclass
class StepBatch:
    n_traj: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    # 1(a_{0:t} = pi) / u_hat[t] per row (0 where u_hat is 0)
    pi_weight: np.ndarray
    # per time step: (factual rows, counterfactual rows)
    groups: list = field(default_factory=list)
    _plan: GroupPlan | None = field(default=None, repr=False)

    @property
    def plan(self) -> GroupPlan:
        if self._plan is None:
            self._plan = GroupPlan.build(self.groups)
        return self._plan


def build_batch(ds: Dataset, traj_idx=None) -> StepBatch:
    ds.require_annotation()
    traj_idx = np.arange(len(ds)) if traj_idx is None else np.asarray(traj_idx)
    S, A, R, S2, D, W = [], [], [], [], [], []
    row_of: dict[tuple[int, int], int] = {}
    row = 0
    u = ds.u_hat
    for i in traj_idx:
        tr = ds.trajectories[i]
        L = len(tr)
        if L == 0:
            continue
        S.append(tr.states[:-1])
        S2.append(tr.states[1:])
        A.append(tr.actions)
        R.append(tr.rewards)
        D.append(tr.done_flags())
        m = ds.factual_mask[i, :L]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(m & (u[:L] > 0), 1.0 / np.where(u[:L] > 0, u[:L], 1.0), 0.0)
        W.append(w)
        for t in range(L):
            row_of[(int(i), t)] = row + t
        row += L
    d = ds.trajectories[0].states.shape[1] if ds.trajectories else 1
    cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
    batch = StepBatch(len(traj_idx), cat(S, (0, d)), cat(A, (0,)).astype(np.int64), cat(R, (0,)),
                      cat(S2, (0, d)), cat(D, (0,)), cat(W, (0,)))
    sub = set(int(i) for i in traj_idx)
    for t in range(ds.horizon):
        f, c = counterfactual_groups(ds, t)
        f = [row_of[(int(i), t)] for i in f if int(i) in sub]
        c = [row_of[(int(i), t)] for i in c if int(i) in sub]
        if not f and not c:
            if t > 0 and not (ds.lengths > t).any():
                break
        batch.groups.append((np.asarray(f, dtype=np.int64), np.asarray(c, dtype=np.int64)))
    return batch


def objective_terms(model: RepBmModel, batch: StepBatch, config: RepBmConfig,
                    n_total: int | None = None) -> dict:
    """Differentiable objective plus its component values.

    Returns a dict with the scalar tensor under ``"objective"`` and float
    values for ``r_mu``, ``r_pi``, ``ipm`` and ``reg``.
    """
    n = batch.n_traj
    n_reg = n if n_total is None else n_total
    z = model.represent(batch.states)
    l_r, l_T, l_d = model.step_losses(z, batch.actions, batch.rewards, batch.states,
                                      batch.next_states, batch.dones)
    per_step = ad.add(ad.add(l_r, l_T), l_d)
    coef = np.zeros(len(batch.actions))
    if config.use_mu_risk:
        coef += 1.0
    if config.use_pi_risk:
        coef += batch.pi_weight
    obj = ad.scalar_scale(ad.sum(ad.multiply(per_step, Tensor(coef))), 1.0 / n)
    vals = per_step.data
    terms = {
        "r_mu": float(vals.sum() / n),
        "r_pi": float((vals * batch.pi_weight).sum() / n),
        "ipm": 0.0,
        "reg": 0.0,
    }
    if config.alpha > 0:
        ipm, _ = grouped_mmd(model.kernel, z, batch.plan)
        if ipm is not None:
            terms["ipm"] = ipm.item()
            obj = ad.add(obj, ad.scalar_scale(ipm, config.alpha))
    if config.weight_decay > 0:
        sq = [ad.sum(ad.square(w)) for w in model.weights]
        reg = sq[0]
        for s in sq[1:]:
            reg = ad.add(reg, s)
        reg = ad.scalar_scale(reg, config.weight_decay / max(n_reg, 1) ** 0.375)
        terms["reg"] = reg.item()
        obj = ad.add(obj, reg)
    terms["objective"] = obj
    return terms


def objective(model: RepBmModel, train: Dataset, config: RepBmConfig) -> Tensor:
    train.require_annotation()
    if not model.kernel.resolved:
        model.kernel = resolve_kernel(model, build_batch(train), config.kernel)
    return objective_terms(model, build_batch(train), config)["objective"]


def empirical_risk(model: RepBmModel, batch: StepBatch, config: RepBmConfig) -> float:
    """R_mu + R_pi_u restricted to the risk terms the config trains on (no penalties)."""
    if batch.n_traj == 0 or len(batch.actions) == 0:
        return 0.0
    r, nxt, p = model.predict(batch.states, batch.actions)
    l_r = (r - batch.rewards) ** 2
    l_T = model.lipschitz * np.sum(((nxt - batch.next_states) / model.scale) ** 2, axis=1)
    logit_p = np.clip(p, 1e-300, 1.0)
    l_d = -(batch.dones * np.log(logit_p) + (1 - batch.dones) * np.log(np.clip(1 - p, 1e-300, 1.0)))
    per = l_r + l_T + l_d
    coef = np.zeros_like(per)
    if config.use_mu_risk:
        coef += 1.0
    if config.use_pi_risk:
        coef += batch.pi_weight
    return float((per * coef).sum() / batch.n_traj)


def resolve_kernel(model: RepBmModel, batch: StepBatch, spec: KernelSpec,
                   max_points: int = 600) -> KernelSpec:
    if spec.resolved:
        return spec
    rows = np.unique(np.concatenate([np.concatenate([f, c]) for f, c in batch.groups]
                                    or [np.zeros(0, dtype=np.int64)]))
    if len(rows) < 2:
        return KernelSpec(spec.kind, 1.0)
    if len(rows) > max_points:
        rows = rows[np.linspace(0, len(rows) - 1, max_points).astype(np.int64)]
    return KernelSpec(spec.kind, median_bandwidth(model._z(batch.states[rows])))


def init_model(train: Dataset, config: RepBmConfig, n_actions: int) -> RepBmModel:
    rng = np.random.default_rng(config.seed)
    d = train.trajectories[0].states.shape[1]
    model = RepBmModel(d, n_actions, config.rep_dim, rng, config.lipschitz)
    if config.normalize:
        allstates = np.concatenate([tr.states for tr in train.trajectories])
        model.set_normalisation(allstates.mean(axis=0), allstates.std(axis=0))
    # start the terminal head at the logged terminal rate so BCE does not dominate early epochs
    dones = np.concatenate([tr.done_flags() for tr in train.trajectories] or [np.zeros(0)])
    rate = float(np.clip(dones.mean() if dones.size else 0.0, 1e-5, 1 - 1e-5))
    model.b_d.data[...] = np.log(rate / (1.0 - rate))
    model.config = config
    return model


def learning_rate(config: RepBmConfig, epoch: int) -> float:
    frac = epoch / max(config.epochs - 1, 1)
    scale = config.lr_final_scale + (1 - config.lr_final_scale) * 0.5 * (1 + np.cos(np.pi * frac))
    return config.lr * scale


def train(dataset: Dataset, config: RepBmConfig | None = None, n_actions: int = 2) -> RepBmModel:
    """Adam on the objective; returns the epoch with the best validation risk.

    ``dataset`` must be annotated and split. Without a validation split the
    final epoch is returned.
    """
    config = config or RepBmConfig()
    dataset.require_annotation()
    if dataset.split is None:
        train_ds, val_ds = dataset, None
    else:
        train_ds, val_ds = dataset.train(), dataset.validation()
    if len(train_ds) == 0:
        raise ValueError("empty training split")
    model = init_model(train_ds, config, n_actions)
    full = build_batch(train_ds)
    model.kernel = resolve_kernel(model, full, config.kernel) if config.alpha > 0 else (
        config.kernel if config.kernel.resolved else KernelSpec(config.kernel.kind, 1.0))
    val_batch = build_batch(val_ds) if val_ds is not None and len(val_ds) else None

    opt = ad.AdamState.for_params(model.params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    n = len(train_ds)
    best_val, best_snap = np.inf, None
    model.history = []
    for epoch in range(config.epochs):
        opt.lr = learning_rate(config, epoch)
        if config.batch_size is None or config.batch_size >= n:
            batches = [full]
        else:
            order = rng.permutation(n)
            batches = [build_batch(train_ds, order[k:k + config.batch_size])
                       for k in range(0, n, config.batch_size)]
        epoch_loss = 0.0
        for batch in batches:
            terms = objective_terms(model, batch, config, n_total=n)
            loss = terms["objective"]
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    "non-finite training loss", epoch,
                    {k: v for k, v in terms.items() if k != "objective"})
            ad.zero_grad(model.params)
            ad.backward(loss)
            ad.adam_step(model.params, opt)
            epoch_loss += value * batch.n_traj / n
        record = {"epoch": epoch, "loss": epoch_loss}
        if val_batch is not None and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            v = empirical_risk(model, val_batch, config)
            record["val_risk"] = v
            if v < best_val:
                best_val, best_snap = v, model.snapshot()
        model.history.append(record)
    if best_snap is not None:
        model.restore(best_snap)
    return model


def model_value(model: RepBmModel, s0, pi: Policy, H: int) -> float:
    if H <= 0:
        return 0.0
    return float(model.rollout_values(np.asarray(s0, dtype=float)[None, :], pi, H)[0])
