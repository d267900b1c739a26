"""Experiment pipeline: collect, annotate, split, fit, estimate, score.

Each run draws its own seeds by hashing (base seed, run index, stage name),
so adding an estimator never changes the data a run collects. Runs are
independent and may execute in a process pool; results are gathered and
sorted by run index before aggregation, so reports do not depend on
scheduling.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import traceback
from importlib import resources
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as D
from . import estimators as est
from .balance import KernelSpec
from .environments import Environment, make, rollout_return
from .model import RepBmConfig, am_config, am_pi_config, train
from .policies import Policy, QBudget, epsilon_greedy, fit_q_iteration, greedy, soften, tabular

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

DEFAULT_ESTIMATORS = ["repbm", "am", "am_pi", "dr(repbm)", "wdr(repbm)", "dr(am)", "wdr(am)",
                      "mrdr_q", "mrdr", "is", "wis", "pdis", "wpdis"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str
    # evaluation policy: {"path": file} | {"budget": {...}, "seed": int} | {"table": [[...]]}
    policy: dict
    behavior_eps: float = 0.2
    # optional explicit behavior policy, same forms as ``policy``; default is eps-greedy of pi
    behavior: dict | None = None
    n: int = 256
    runs: int = 20
    alphas: list = field(default_factory=lambda: [0.01])
    estimators: list = field(default_factory=lambda: list(DEFAULT_ESTIMATORS))
    kernel: dict = field(default_factory=lambda: {"kind": "rbf", "bandwidth": "median"})
    base_seed: int = 0
    out_dir: str = "results"
    name: str = "experiment"
    horizon: int | None = None
    # RepBmConfig field overrides shared by RepBM, AM and AM(pi)
    model: dict = field(default_factory=dict)
    # MrdrConfig field overrides
    mrdr: dict = field(default_factory=dict)
    soft_eps: float = est.SOFT_EPS
    train_fraction: float = 0.9
    uhat_scope: str = "train"
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if not self.alphas:
            raise ConfigError("alphas must not be empty")
        if any(a < 0 for a in self.alphas):
            raise ConfigError("alphas must be >= 0")
        bad = [e for e in self.estimators if not est.is_registered(e)]
        if bad:
            raise ConfigError(f"unregistered estimators: {bad}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimator list has duplicates")
        if not any(k in self.policy for k in POLICY_SOURCES):
            raise ConfigError(f"policy needs one of {list(POLICY_SOURCES)}")
        unknown = set(self.model) - {f.name for f in dataclasses.fields(RepBmConfig)}
        if unknown:
            raise ConfigError(f"unknown model settings: {sorted(unknown)}")
        KernelSpec.from_dict(self.kernel)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        d = self.to_dict()
        # where results go and how many workers run them does not change the results
        for k in ("out_dir", "workers"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get("OPPE_OUT_DIR") or self.out_dir)


def stage_seed(base_seed: int, run: int, stage: str) -> int:
    h = hashlib.sha256(f"{base_seed}:{run}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


# ---------------------------------------------------------------------------
# policies and ground truth


POLICY_SOURCES = ("path", "bundled", "inline", "table", "budget")


def bundled_policy(name: str) -> Policy:
    """Load one of the evaluation policies shipped in ``repbm/data``."""
    res = resources.files("repbm") / "data" / f"{name}.json"
    if not res.is_file():
        raise ConfigError(f"no bundled policy named {name!r}")
    return Policy.from_dict(json.loads(res.read_text()))


def _policy_from_source(src: dict, env: Environment) -> Policy:
    if "path" in src:
        return Policy.load(src["path"])
    if "bundled" in src:
        return bundled_policy(src["bundled"])
    if "inline" in src:
        return Policy.from_dict(src["inline"])
    if "table" in src:
        return tabular(src["table"])
    budget = QBudget.from_dict(src["budget"])
    return greedy(fit_q_iteration(env, budget, int(src.get("seed", 0))))


def resolve_policies(config: ExperimentConfig) -> tuple[Policy, Policy]:
    """(evaluation policy pi, behavior policy mu)."""
    env = make(config.env, config.horizon)
    pi = _policy_from_source(config.policy, env)
    if not pi.is_deterministic:
        raise ConfigError("the evaluation policy must be deterministic")
    if config.behavior is not None:
        mu = _policy_from_source(config.behavior, env)
    elif pi.kind == "greedy":
        mu = epsilon_greedy(pi.q, config.behavior_eps)
    else:
        mu = soften(pi, config.behavior_eps)
    return pi, mu


@dataclass
class GroundTruth:
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def __len__(self) -> int:
        return len(self.values)


def ground_truth(env: Environment | str, pi: Policy, initial_states, H: int | None = None) -> GroundTruth:
    """True returns of pi from each initial state (one rollout: dynamics are deterministic)."""
    env = make(env) if isinstance(env, str) else env

    def act(obs):
        return int(pi.greedy_actions(obs[None, :])[0])

    vals = np.array([rollout_return(env, s, act, H) for s in np.atleast_2d(initial_states)])
    return GroundTruth(vals)


# ---------------------------------------------------------------------------
# one run


def required_models(config: ExperimentConfig) -> list[str]:
    default_alpha = float(config.alphas[0])
    keys = []
    for e in config.estimators:
        p = est.parse_estimator(e, default_alpha).provider
        if p is not None and p not in keys:
            keys.append(p)
    return keys


def model_config(config: ExperimentConfig, key: str, seed: int) -> RepBmConfig:
    base = RepBmConfig(**{**config.model, "kernel": KernelSpec.from_dict(config.kernel), "seed": seed})
    if key.startswith("repbm@"):
        return dataclasses.replace(base, alpha=float(key.split("@", 1)[1]))
    if key == "am":
        return am_config(base)
    if key == "am_pi":
        return am_pi_config(dataclasses.replace(base, alpha=float(config.alphas[0])))
    raise ValueError(f"not a RepBM-family model: {key!r}")


def fit_model(config: ExperimentConfig, key: str, ds: D.Dataset, pi: Policy, n_actions: int, seed: int):
    if key in est.MRDR_NAMES:
        mc = est.MrdrConfig(**{**config.mrdr, "seed": seed})
        return est.mrdr_train(ds, pi, mc, key, n_actions)
    return train(ds, model_config(config, key, seed), n_actions)


def run_one(config: ExperimentConfig, pi: Policy, mu: Policy, run: int) -> dict:
    """Execute one seeded run; failures are captured in the returned record."""
    out = {"run": run, "status": "ok", "error": None, "truth_mean": None, "estimates": {}}
    default_alpha = float(config.alphas[0])
    try:
        env = make(config.env, config.horizon)
        raw = D.collect(env, mu, config.n, stage_seed(config.base_seed, run, "collect"))
        ds = D.annotate(raw, pi)
        ds = D.split(ds, config.train_fraction, stage_seed(config.base_seed, run, "split"),
                     config.uhat_scope)
        truth = ground_truth(env, pi, ds.initial_states, env.spec.horizon)
        out["truth_mean"] = truth.mean
    except Exception as e:  # noqa: BLE001 - recorded, run excluded from aggregation
        out["status"] = "failed"
        out["error"] = f"data stage: {type(e).__name__}: {e}"
        for name in config.estimators:
            out["estimates"][name] = {"ok": False, "error": out["error"]}
        return out

    models, model_errors = {}, {}
    for key in required_models(config):
        try:
            seed = stage_seed(config.base_seed, run, f"model:{key}")
            # MRDR regresses on all logged data; RepBM-family models use the train split
            models[key] = fit_model(config, key, ds, pi, env.spec.n_actions, seed)
        except Exception as e:  # noqa: BLE001
            model_errors[key] = f"fitting {key}: {type(e).__name__}: {e}"
            logger.warning("run %d: %s", run, model_errors[key])

    cache: dict = {}
    for name in config.estimators:
        parsed = est.parse_estimator(name, default_alpha)
        if parsed.provider in model_errors:
            out["estimates"][name] = {"ok": False, "error": model_errors[parsed.provider]}
            continue
        try:
            res = est.evaluate(parsed, ds, pi, models, config.soft_eps, cache)
        except Exception as e:  # noqa: BLE001
            out["estimates"][name] = {"ok": False,
                                      "error": f"{type(e).__name__}: {e}",
                                      "trace": traceback.format_exc(limit=3)}
            continue
        if not res.defined or not np.isfinite(res.mean):
            out["estimates"][name] = {"ok": False, "error": "; ".join(res.flags) or "undefined"}
            continue
        rec = {"ok": True, "estimate": res.mean, "sq_err_mean": (res.mean - truth.mean) ** 2,
               "per_state_meaningful": res.per_state_meaningful, "flags": res.flags}
        if res.per_state is not None:
            rec["mse_individual"] = float(np.mean((res.per_state - truth.values) ** 2))
        out["estimates"][name] = rec
    if model_errors:
        out["error"] = "; ".join(model_errors.values())
    return out


def _run_star(args):
    cfg_dict, pi_dict, mu_dict, run = args
    return run_one(ExperimentConfig.from_dict(cfg_dict), Policy.from_dict(pi_dict),
                   Policy.from_dict(mu_dict), run)


# ---------------------------------------------------------------------------
# aggregation and reports


@dataclass
class EstimatorRow:
    estimator: str
    rmse_mean: float | None
    rmse_individual: float | None
    runs_ok: int
    runs_failed: int
    # per-trajectory RMSE for IS/DR-style estimators whose per-trajectory values are not state values
    rmse_per_trajectory: float | None = None


@dataclass
class RmseReport:
    rows: list
    runs: list
    config: dict
    config_hash: str
    schema_version: int = REPORT_SCHEMA_VERSION

    def row(self, estimator: str) -> EstimatorRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "config_hash": self.config_hash,
                "config": self.config, "rows": [dataclasses.asdict(r) for r in self.rows],
                "runs": self.runs}

    @classmethod
    def from_dict(cls, d: dict) -> "RmseReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls([EstimatorRow(**r) for r in d["rows"]], d["runs"], d["config"],
                   d["config_hash"], d["schema_version"])

    def per_run(self, estimator: str, metric: str = "sq_err_mean") -> dict:
        """run index -> metric value, for runs where the estimator succeeded."""
        out = {}
        for r in self.runs:
            rec = r["estimates"].get(estimator)
            if rec and rec.get("ok") and metric in rec:
                out[r["run"]] = rec[metric]
        return out


def aggregate(config: ExperimentConfig, runs: list) -> RmseReport:
    runs = sorted(runs, key=lambda r: r["run"])
    rows = []
    for name in config.estimators:
        ok = [r["estimates"][name] for r in runs if r["estimates"].get(name, {}).get("ok")]
        failed = len(runs) - len(ok)
        rmse_mean = float(np.sqrt(np.mean([o["sq_err_mean"] for o in ok]))) if ok else None
        ind = [o["mse_individual"] for o in ok if "mse_individual" in o]
        meaningful = bool(ok) and all(o["per_state_meaningful"] for o in ok)
        ind_rmse = float(np.sqrt(np.mean(ind))) if ind and len(ind) == len(ok) else None
        rows.append(EstimatorRow(name, rmse_mean, ind_rmse if meaningful else None,
                                 len(ok), failed, None if meaningful else ind_rmse))
    return RmseReport(rows, runs, config.to_dict(), config.digest())


def run_experiment(config: ExperimentConfig, pi: Policy | None = None,
                   mu: Policy | None = None) -> RmseReport:
    if pi is None or mu is None:
        rp, rm = resolve_policies(config)
        pi, mu = pi or rp, mu or rm
    if config.workers > 1 and config.runs > 1:
        jobs = [(config.to_dict(), pi.to_dict(), mu.to_dict(), r) for r in range(config.runs)]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(_run_star, jobs))
    else:
        runs = [run_one(config, pi, mu, r) for r in range(config.runs)]
    for r in runs:
        bad = [k for k, v in r["estimates"].items() if not v.get("ok")]
        if bad:
            logger.info("run %d: failed estimators %s", r["run"], bad)
    return aggregate(config, runs)


CSV_COLUMNS = ["estimator", "rmse_mean", "rmse_individual", "runs_ok", "runs_failed"]


def emit_report(report: RmseReport, fmt: str = "json", path=None) -> Path:
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    if path is None:
        out_dir = Path(os.environ.get("OPPE_OUT_DIR") or report.config.get("out_dir", "results"))
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{report.config.get('name', 'experiment')}.{fmt}"
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(_jsonable(report.to_dict()), sort_keys=True, indent=1) + "\n")
        return path
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([r.estimator, _fmt(r.rmse_mean), _fmt(r.rmse_individual),
                        r.runs_ok, r.runs_failed])
    return path


def load_report(path) -> RmseReport:
    return RmseReport.from_dict(json.loads(Path(path).read_text()))


def _fmt(v) -> str:
    return "n/a" if v is None else repr(float(v))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def paired_win_fraction(report: RmseReport, a: str, b: str, metric: str = "sq_err_mean") -> float:
    """Fraction of runs (where both succeeded) in which ``a`` has the smaller error."""
    ra, rb = report.per_run(a, metric), report.per_run(b, metric)
    common = sorted(set(ra) & set(rb))
    if not common:
        return float("nan")
    return float(np.mean([ra[k] < rb[k] for k in common]))
