"""Command-line entry point: ``repbm <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as D
from . import estimators as est
from . import harness as hs
from . import oracle as orc
from .environments import make
from .model import RepBmConfig, RepBmModel, am_config, am_pi_config, train
from .policies import Policy, QBudget, epsilon_greedy, fit_q_iteration, greedy


def _load_json_arg(text: str | None) -> dict:
    if not text:
        return {}
    p = Path(text)
    return json.loads(p.read_text()) if p.exists() else json.loads(text)


def cmd_train_policy(args) -> int:
    env = make(args.env, args.horizon)
    budget = QBudget.from_dict(_load_json_arg(args.budget))
    q = fit_q_iteration(env, budget, args.seed)
    pi = greedy(q)
    pi.save(args.out)
    if args.behavior_out:
        epsilon_greedy(q, args.eps).save(args.behavior_out)
    print(json.dumps({"policy": str(args.out), "digest": pi.digest()}))
    return 0


def cmd_collect(args) -> int:
    mu = Policy.load(args.behavior)
    ds = D.collect(make(args.env, args.horizon), mu, args.n, args.seed)
    if args.pi:
        ds = D.annotate(ds, Policy.load(args.pi))
        ds = D.split(ds, args.train_fraction, args.seed, args.uhat_scope)
    D.save(ds, args.out)
    print(json.dumps({"dataset": str(args.out), "n": len(ds),
                      "mean_length": float(ds.lengths.mean())}))
    return 0


def _annotated(args) -> tuple[D.Dataset, Policy]:
    pi = Policy.load(args.pi)
    ds = D.load(args.data)
    if not ds.annotated:
        ds = D.annotate(ds, pi)
    if ds.split is None:
        ds = D.split(ds, 0.9, 0)
    return ds, pi


def cmd_fit_model(args) -> int:
    ds, pi = _annotated(args)
    cfg = RepBmConfig(**_load_json_arg(args.config))
    if args.alpha is not None:
        cfg = dataclasses.replace(cfg, alpha=args.alpha)
    if args.kind == "am":
        cfg = am_config(cfg)
    elif args.kind == "am_pi":
        cfg = am_pi_config(cfg)
    model = train(ds, cfg, make(ds.env).spec.n_actions)
    model.save(args.out)
    print(json.dumps({"model": str(args.out), "final": model.history[-1]}))
    return 0


def cmd_evaluate(args) -> int:
    ds, pi = _annotated(args)
    models = {}
    for spec in args.model or []:
        key, _, path = spec.partition("=")
        models[est.model_key(key, args.alpha)] = RepBmModel.load(path)
    n_actions = make(ds.env).spec.n_actions
    needed = {est.parse_estimator(e, args.alpha).provider for e in args.estimators}
    for key in est.MRDR_NAMES:
        if key in needed:
            models[key] = est.mrdr_train(ds, pi, est.MrdrConfig(seed=args.seed), key, n_actions)
    out = []
    for name in args.estimators:
        res = est.evaluate(est.parse_estimator(name, args.alpha), ds, pi, models, args.soft_eps)
        d = res.to_dict()
        if not args.per_state:
            d.pop("per_state")
        out.append(d)
    print(json.dumps(hs._jsonable(out), indent=1))
    return 0


def _write_reports(report, formats) -> None:
    for fmt in formats:
        path = hs.emit_report(report, fmt)
        print(f"wrote {path}")


def cmd_experiment(args) -> int:
    cfg = hs.ExperimentConfig.load(args.config)
    if args.runs:
        cfg = dataclasses.replace(cfg, runs=args.runs)
    report = hs.run_experiment(cfg)
    _print_rows(report)
    _write_reports(report, args.format)
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = hs.ExperimentConfig.load(args.config)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(cfg.alphas)
    cfg = dataclasses.replace(cfg, alphas=alphas, name=f"{cfg.name}-alpha-sweep",
                              estimators=[f"repbm@{a:g}" for a in alphas])
    report = hs.run_experiment(cfg)
    _print_rows(report)
    _write_reports(report, args.format)
    return 0


def _print_rows(report) -> None:
    print(f"{'estimator':<22}{'rmse_mean':>14}{'rmse_individual':>18}{'ok':>5}{'failed':>8}")
    for r in report.rows:
        m = "n/a" if r.rmse_mean is None else f"{r.rmse_mean:.4g}"
        i = "n/a" if r.rmse_individual is None else f"{r.rmse_individual:.4g}"
        print(f"{r.estimator:<22}{m:>14}{i:>18}{r.runs_ok:>5}{r.runs_failed:>8}")


def oracle_report(seed: int = 0) -> dict:
    """Summary of the exact-enumeration checks."""
    rng = np.random.default_rng(seed)
    gaps, unbiased, violations = [], [], 0
    for k in range(100):
        S, H = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        mdp = orc.random_tabular_mdp(rng, S, 2, H)
        pi = orc.random_policy(rng, S, 2, deterministic=bool(k % 2))
        mu = orc.random_policy(rng, S, 2, floor=0.05)
        gaps.append(orc.simulation_identity_gap(mdp, orc.perturbed_model(rng, mdp), pi, H))
        unbiased.append(abs(orc.is_expectation(mdp, mu, pi, H) - orc.exact_value(mdp, pi, H)))
        w, m = orc.weight_distributions(mdp, mu, pi, H)
        violations += int(w.var < m.var - 1e-12 * max(1.0, abs(m.var)))
    bandit = orc.weight_distributions(*orc.two_state_bandit(), 1)
    bias = {f"delta={d:g},H={h}": list(orc.bias_with_estimated_mu(h, d))
            for d in (0.05, 0.1, 0.2) for h in (2, 4, 6)}
    return {
        "simulation_identity_max_gap": max(gaps),
        "is_unbiasedness_max_gap": max(unbiased),
        "variance_violations": violations,
        "bandit_var_is": bandit[0].var,
        "bandit_var_marginal": bandit[1].var,
        "estimated_mu_bias": bias,
    }


def cmd_oracle(args) -> int:
    print(json.dumps(oracle_report(args.seed), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repbm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-policy", help="fit a Q-network and save its greedy policy")
    s.add_argument("--env", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--budget", help="JSON string or file with QBudget fields")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.add_argument("--behavior-out", help="also save the eps-greedy behavior policy here")
    s.set_defaults(func=cmd_train_policy)

    s = sub.add_parser("collect", help="log trajectories under a behavior policy")
    s.add_argument("--env", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--behavior", required=True, help="behavior policy file")
    s.add_argument("--pi", help="evaluation policy file; annotates and splits the data")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-fraction", type=float, default=0.9)
    s.add_argument("--uhat-scope", choices=["train", "all"], default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("fit-model", help="train RepBM, AM or AM(pi) on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--pi", required=True)
    s.add_argument("--kind", choices=["repbm", "am", "am_pi"], default="repbm")
    s.add_argument("--alpha", type=float)
    s.add_argument("--config", help="JSON string or file with RepBmConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_model)

    s = sub.add_parser("evaluate", help="run estimators on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--pi", required=True)
    s.add_argument("--model", action="append", help="name=path, e.g. repbm=model.json")
    s.add_argument("--estimators", nargs="+", default=["is", "wis", "pdis", "wpdis"])
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--soft-eps", type=float, default=est.SOFT_EPS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-state", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    for name, fn, hlp in [("experiment", cmd_experiment, "run a configured experiment"),
                          ("sweep-alpha", cmd_sweep_alpha, "RepBM over a list of alphas")]:
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", required=True)
        s.add_argument("--format", nargs="+", choices=["csv", "json"], default=["csv", "json"])
        if name == "experiment":
            s.add_argument("--runs", type=int)
        else:
            s.add_argument("--alphas", help="comma-separated, e.g. 0,0.01,0.1")
        s.set_defaults(func=fn)

    s = sub.add_parser("oracle", help="print the exact-enumeration report")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
