import csv
import json

import numpy as np
import pytest

from repbm import harness as hs
from repbm import policies as P
from repbm.environments import EnvState, make

FAST_MODEL = {"epochs": 15, "eval_every": 5, "rep_dim": 8}


def drift_config(**kw):
    base = dict(env="drift", policy={"table": [[1.0, 0.0]]}, behavior={"table": [[0.6, 0.4]]},
                n=16, runs=2, alphas=[0.01], estimators=["repbm", "am", "is", "wis", "pdis", "dr(am)"],
                model=FAST_MODEL, base_seed=5, name="drift-test")
    base.update(kw)
    return hs.ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(hs.ConfigError):
        drift_config(runs=0)
    with pytest.raises(hs.ConfigError):
        drift_config(n=1)
    with pytest.raises(hs.ConfigError):
        drift_config(estimators=["repbm", "magic"])
    with pytest.raises(hs.ConfigError):
        drift_config(policy={})
    with pytest.raises(hs.ConfigError):
        drift_config(model={"learning_rate": 1.0})
    with pytest.raises(hs.ConfigError):
        hs.ExperimentConfig.from_dict({**drift_config().to_dict(), "colour": "red"})


def test_config_round_trip(tmp_path):
    cfg = drift_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = hs.ExperimentConfig.load(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert drift_config(out_dir="elsewhere").digest() == cfg.digest()
    assert drift_config(n=17).digest() != cfg.digest()


def test_stage_seeds_independent():
    seeds = {hs.stage_seed(0, r, s) for r in range(5) for s in ("collect", "split", "model:am")}
    assert len(seeds) == 15
    assert hs.stage_seed(3, 1, "collect") == hs.stage_seed(3, 1, "collect")


def test_ground_truth_examples():
    tree = hs.ground_truth("tree:3", P.tabular([[1.0, 0.0]]), [[0.0]])
    assert tree.values.tolist() == [1.0] and len(tree) == 1

    class Balancer:
        # a cart starting at rest upright stays balanced under bang-bang angle feedback
        n_actions = 2

        def greedy_actions(self, states):
            s = np.atleast_2d(states)
            return (s[:, 2] + 0.5 * s[:, 3] > 0).astype(np.int64)

    env = make("cartpole")
    s0 = np.zeros(4)
    g = hs.ground_truth(env, Balancer(), [s0, s0], 200)
    assert g.values.tolist() == [200.0, 200.0]


def test_same_seed_identical_reports(tmp_path):
    a = hs.run_experiment(drift_config())
    b = hs.run_experiment(drift_config())
    pa = hs.emit_report(a, "json", tmp_path / "a.json")
    pb = hs.emit_report(b, "json", tmp_path / "b.json")
    assert pa.read_bytes() == pb.read_bytes()


def test_single_estimator_report(tmp_path):
    rep = hs.run_experiment(drift_config(estimators=["am"], runs=1))
    assert [r.estimator for r in rep.rows] == ["am"]
    path = hs.emit_report(rep, "csv", tmp_path / "r.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == hs.CSV_COLUMNS and len(rows) == 2


def test_report_content_and_json_round_trip(tmp_path):
    cfg = drift_config()
    rep = hs.run_experiment(cfg)
    assert [r.estimator for r in rep.rows] == cfg.estimators
    for r in rep.rows:
        assert r.rmse_mean is None or r.rmse_mean >= 0
        if r.estimator in ("repbm", "am"):
            assert r.rmse_individual is not None and r.rmse_individual >= 0
        else:
            assert r.rmse_individual is None
    back = hs.load_report(hs.emit_report(rep, "json", tmp_path / "r.json"))
    assert back.rows == rep.rows and back.config_hash == rep.config_hash
    rows = list(csv.reader(hs.emit_report(rep, "csv", tmp_path / "r.csv").open()))
    assert len(rows) == len(cfg.estimators) + 1


def test_individual_error_dominates_mean_error():
    rep = hs.run_experiment(drift_config(estimators=["repbm", "am"]))
    for run in rep.runs:
        for name in ("repbm", "am"):
            rec = run["estimates"][name]
            assert rec["mse_individual"] >= rec["sq_err_mean"] - 1e-12


def test_failed_estimators_are_counted():
    # pi = always-left for 10 steps; mu rarely goes left, so no trajectory fully matches
    cfg = drift_config(behavior={"table": [[0.05, 0.95]]}, n=4, estimators=["is", "wis"], runs=2)
    rep = hs.run_experiment(cfg)
    assert rep.row("wis").runs_failed == 2 and rep.row("wis").runs_ok == 0
    assert rep.row("wis").rmse_mean is None
    assert rep.row("is").runs_ok == 2
    csv_rows = {r.estimator: r for r in rep.rows}
    assert csv_rows["wis"].runs_failed + csv_rows["wis"].runs_ok == cfg.runs


def test_model_failure_recorded_not_dropped(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(hs, "train", boom)
    rep = hs.run_experiment(drift_config(estimators=["am", "pdis"], runs=1))
    assert rep.row("am").runs_failed == 1 and "diverged" in rep.runs[0]["estimates"]["am"]["error"]
    assert rep.row("pdis").runs_ok == 1


def test_out_dir_env_override(tmp_path, monkeypatch):
    rep = hs.run_experiment(drift_config(estimators=["is"], runs=1))
    monkeypatch.setenv("OPPE_OUT_DIR", str(tmp_path / "override"))
    path = hs.emit_report(rep, "csv")
    assert path.parent == tmp_path / "override" and path.name == "drift-test.csv"


def test_emit_report_bad_path(tmp_path):
    rep = hs.run_experiment(drift_config(estimators=["is"], runs=1))
    with pytest.raises(OSError):
        hs.emit_report(rep, "json", tmp_path / "missing" / "dir" / "r.json")
    with pytest.raises(ValueError):
        hs.emit_report(rep, "xml", tmp_path / "r.xml")


def test_paired_win_fraction():
    rep = hs.run_experiment(drift_config(estimators=["pdis", "is"], runs=3))
    f = hs.paired_win_fraction(rep, "pdis", "is")
    assert 0.0 <= f <= 1.0
    assert hs.paired_win_fraction(rep, "pdis", "pdis") == 0.0


def test_behavior_defaults_to_softened_table_policy():
    pi, mu = hs.resolve_policies(drift_config(behavior=None, behavior_eps=0.2))
    assert mu.action_prob(np.zeros(1), 0) == pytest.approx(0.9)
    assert pi.is_deterministic
    with pytest.raises(hs.ConfigError):
        hs.resolve_policies(drift_config(policy={"table": [[0.5, 0.5]]}))


def test_adding_estimator_keeps_data():
    a = hs.run_experiment(drift_config(estimators=["is"], runs=1))
    b = hs.run_experiment(drift_config(estimators=["is", "pdis"], runs=1))
    assert a.runs[0]["truth_mean"] == b.runs[0]["truth_mean"]
    assert a.runs[0]["estimates"]["is"] == b.runs[0]["estimates"]["is"]


def test_tree_truth_matches_env_step():
    env = make("tree:2")
    s, _ = env.step(EnvState("tree:2", np.array([0.0])), 0)
    assert s.observation.tolist() == [1.0]


BUNDLED_BUDGETS = {
    "cartpole_short": ("cartpole", 2, dict(episodes=200, return_threshold=20, return_ceiling=30,
                                          eval_every=1, eval_rollouts=30)),
    "mountaincar": ("mountaincar", 0, dict(episodes=300, exploring_starts=0.5, eps_decay_episodes=100,
                                           return_threshold=-170, eval_every=5, eval_rollouts=20)),
}


@pytest.mark.parametrize("name", sorted(BUNDLED_BUDGETS))
def test_bundled_policy_regenerates_from_its_budget(name):
    env, seed, budget = BUNDLED_BUDGETS[name]
    q = P.fit_q_iteration(make(env), P.QBudget(**budget), seed)
    assert P.greedy(q).digest() == hs.bundled_policy(name).digest()


def test_unknown_bundled_policy():
    with pytest.raises(hs.ConfigError):
        hs.bundled_policy("nope")
