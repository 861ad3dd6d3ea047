import csv
import filecmp
import json
import math
import warnings

import numpy as np
import pytest

from gridhrl.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, eval_summary, main
from gridhrl.config import ExperimentConfig, load_config, parse_pairs, preset
from gridhrl.curves import aggregate, export_curves, forward_fill, trailing_mean
from gridhrl.envs import ConfigError
from gridhrl.nn import CheckpointVersionError, save_checkpoint
from gridhrl.train import converged_score, evaluate, load_agent, read_log, train_run


def tiny(name="doorkey8", **kw):
    base = dict(budget=1200, rollout=128, n_envs=4, eval_every=600, eval_episodes=2, bs=64, bs_abs=32, tf=2)
    base.update(kw)
    return preset(name).replace(**base)


# -- config -----------------------------------------------------------------------------


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_pairs(["learning_rate=0.1"])


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="lr"):
        parse_pairs(["lr=fast"])


def test_doorkey_is_pomdp_only():
    with pytest.raises(ConfigError):
        parse_pairs(["env=doorkey", "mode=mdp"]).validate()


def test_config_roundtrip(tmp_path):
    cfg = preset("multiitem8").replace(seeds="0,1,2", smdp_discount=True)
    path = tmp_path / "c.txt"
    path.write_text(cfg.dumps())
    assert load_config(path) == cfg


def test_config_file_preset_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("preset=doorkey8  # desk scale\nmethod=ppo\n")
    cfg = load_config(path, ["lr=0.001"])
    assert (cfg.grid_size, cfg.method, cfg.lr) == (8, "ppo", 0.001)


def test_table_defaults():
    cfg = ExperimentConfig()
    assert (cfg.lr, cfg.gamma, cfg.lambda_, cfg.epsilon, cfg.bs, cfg.l) == (1e-4, 0.997, 0.95, 0.2, 256, 15)
    assert (cfg.bs_abs, cfg.tf) == (384, 30)
    assert preset("multiitem12-mdp").dim_z == 25 and preset("multiitem12-pomdp").dim_z == 40
    assert preset("doorkey16").dim_z == 60


def test_converged_score_final_tenth():
    assert converged_score(range(100)) == np.mean(range(90, 100))
    assert converged_score([3.0]) == 3.0
    assert math.isnan(converged_score([]))


# -- training runs --------------------------------------------------------------------------


@pytest.mark.parametrize("method", ["ppo", "dchrl", "dchrl-sa"])
def test_same_seed_same_logs(tmp_path, method):
    cfg = tiny(method=method)
    train_run(cfg, 3, tmp_path / "a")
    train_run(cfg, 3, tmp_path / "b")
    for name in ("updates.csv", "episodes.csv", "eval.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name


def test_bisim_column_only_with_abstraction(tmp_path):
    train_run(tiny(method="dchrl-sa"), 0, tmp_path / "sa")
    train_run(tiny(method="dchrl"), 0, tmp_path / "plain")
    sa = read_log(tmp_path / "sa" / "updates.csv")
    plain = read_log(tmp_path / "plain" / "updates.csv")
    assert "bisim_loss" in sa[0] and "bisim_loss" not in plain[0]
    assert any(not math.isnan(r["bisim_loss"]) for r in sa)


def test_ppo_never_finishing_reports_step_limit(tmp_path):
    cfg = tiny("multiitem8", method="ppo", budget=4 * 512, rollout=256)
    res = train_run(cfg, 0, tmp_path)
    assert res.summary["converged_steps"] == cfg.max_steps
    rows = [r for r in res.updates if not math.isnan(r["mean_episode_steps"])]
    assert rows and all(r["mean_episode_steps"] == cfg.max_steps for r in rows)


def test_summary_recomputed_from_episode_log(tmp_path):
    res = train_run(tiny(method="dchrl"), 1, tmp_path)
    episodes = read_log(tmp_path / "episodes.csv")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged_score"] == converged_score([e["score"] for e in episodes])
    assert summary["converged_steps"] == converged_score([e["steps"] for e in episodes])
    assert summary["episodes"] == len(episodes) == len(res.episodes)


def test_manifest_lists_config_and_paths(tmp_path):
    cfg = tiny(method="ppo")
    train_run(cfg, 0, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"] == cfg.to_dict()
    assert parse_pairs(manifest["config_text"].splitlines()) == cfg
    for name in manifest["paths"].values():
        if name != "resume.pt":
            assert (tmp_path / name).exists()


@pytest.mark.parametrize("method,env", [("dchrl-sa", "doorkey8"), ("ppo", "multiitem8")])
def test_resume_reproduces_uninterrupted_run(tmp_path, method, env):
    cfg = tiny(env, method=method, budget=2000, checkpoint_every=2)
    train_run(cfg, 0, tmp_path / "a")
    train_run(cfg, 0, tmp_path / "b", stop_after=3)
    train_run(cfg, 0, tmp_path / "b", resume=True)
    for name in ("updates.csv", "episodes.csv", "eval.csv", "summary.json"):
        if name == "summary.json":
            a = json.loads((tmp_path / "a" / name).read_text())
            b = json.loads((tmp_path / "b" / name).read_text())
            a.pop("wall_seconds"), b.pop("wall_seconds")
            assert a == b
        else:
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name


def test_resume_rejects_changed_config(tmp_path):
    cfg = tiny(method="ppo", checkpoint_every=1)
    train_run(cfg, 0, tmp_path, stop_after=1)
    with pytest.raises(ValueError):
        train_run(cfg.replace(lr=0.5), 0, tmp_path, resume=True)


def test_checkpoint_reload_gives_same_evaluation(tmp_path):
    train_run(tiny(method="dchrl"), 0, tmp_path)
    agent, cfg, meta = load_agent(tmp_path / "checkpoint.bin")
    again, _, _ = load_agent(tmp_path / "checkpoint.bin")
    assert evaluate(agent, 5, 3) == evaluate(again, 5, 3)
    assert meta["seed"] == 0 and cfg.method == "dchrl"


def test_untrained_multiitem_eval_is_negative(tmp_path):
    res = train_run(tiny("multiitem8", method="dchrl", budget=0, eval_every=0), 0, tmp_path)
    assert res.episodes == []
    agent, _, _ = load_agent(tmp_path / "checkpoint.bin")
    summary = eval_summary(evaluate(agent, 0, 2))
    assert summary["score_mean"] < -10


# -- cli ----------------------------------------------------------------------------------------


def test_cli_eval_zero_episodes(tmp_path, capsys):
    train_run(tiny(method="ppo", budget=0, eval_every=0), 0, tmp_path)
    assert main(["eval", str(tmp_path / "checkpoint.bin"), "--episodes", "0"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["n_episodes"] == 0


def test_cli_eval_rejects_incompatible_checkpoint(tmp_path):
    path = tmp_path / "bad.bin"
    save_checkpoint(path, {}, {"seed": 0})
    with pytest.raises(CheckpointVersionError):
        load_agent(path)
    assert main(["eval", str(path)]) == EXIT_FAIL


def test_cli_usage_errors(tmp_path):
    assert main(["train", "--preset", "doorkey8", "--out", str(tmp_path), "bogus=1"]) == EXIT_USAGE
    assert main(["train", "--preset", "nonexistent"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_cli_train_multi_seed_summary(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GRIDHRL_OUTPUT_ROOT", str(tmp_path))
    args = ["train", "--preset", "doorkey8", "--quiet", "method=dchrl", "seeds=0,1", "budget=600", "rollout=128",
            "n_envs=4", "eval_every=0"]
    assert main(args) == EXIT_OK
    root = tmp_path / "runs" / "doorkey-pomdp-dchrl"
    per_seed = [json.loads((root / f"seed{s}" / "summary.json").read_text())["converged_score"] for s in (0, 1)]
    agg = json.loads((root / "summary.json").read_text())
    assert agg["score_mean"] == pytest.approx(np.mean(per_seed), abs=1e-12)
    assert agg["score_std"] == pytest.approx(np.std(per_seed), abs=1e-12)
    assert "±" in capsys.readouterr().out


def test_cli_z_dump(tmp_path):
    train_run(tiny(method="dchrl-sa"), 0, tmp_path)
    out = tmp_path / "z.csv"
    assert main(["z-dump", str(tmp_path / "checkpoint.bin"), "--out", str(out)]) == EXIT_OK
    with open(out) as f:
        rows = list(csv.reader(f))
    assert rows[0][:2] == ["state_id", "episode"] and len(rows[0]) == 5 + 60
    assert len(rows) > 1


def test_cli_z_dump_needs_abstraction(tmp_path):
    train_run(tiny(method="dchrl", budget=0, eval_every=0), 0, tmp_path)
    assert main(["z-dump", str(tmp_path / "checkpoint.bin"), "--out", str(tmp_path / "z.csv")]) == EXIT_USAGE


def test_cli_verify_fault_reports_coverage(capsys):
    assert main(["verify", "--quick", "--inject-fault", "missing-up"]) == EXIT_FAIL
    out = capsys.readouterr().out
    assert "[FAIL] hierarchical-optimality" in out and "coverage" in out and "state\taction" in out


# -- curves -------------------------------------------------------------------------------------


def test_forward_fill():
    out = forward_fill(np.array([10, 20]), np.array([1.0, 2.0]), np.array([5, 10, 15, 20, 25]))
    assert np.isnan(out[0]) and list(out[1:]) == [1.0, 1.0, 2.0, 2.0]


def test_trailing_mean_window():
    v = np.arange(12.0)
    assert trailing_mean(v, 10)[9] == np.mean(v[:10])
    assert trailing_mean(v, 10)[11] == np.mean(v[2:12])
    assert np.array_equal(trailing_mean(v, 0), v)


def test_single_run_has_zero_std():
    grid, mean, std = aggregate([(np.array([0, 5, 10]), np.array([1.0, 2.0, 3.0]))])
    assert np.all(std == 0) and list(mean) == [1.0, 2.0, 3.0]


def test_mismatched_lengths_warn_and_truncate():
    with pytest.warns(UserWarning, match="common prefix"):
        grid, _, _ = aggregate([(np.array([0, 10, 20]), np.ones(3)), (np.array([0, 10]), np.ones(2))])
    assert grid[-1] == 10


def _fake_run(path, method, rows):
    path.mkdir(parents=True)
    (path / "config.txt").write_text(f"method={method}\n")
    with open(path / "eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["update_idx", "env_steps", "score_mean", "score_std", "steps_mean", "n_episodes"])
        for i, (s, v) in enumerate(rows):
            w.writerow([i, s, v, 0.0, 100 - v, 2])


def test_export_schema_three_methods_three_seeds(tmp_path):
    rng = np.random.default_rng(0)
    for method in ("ppo", "dchrl", "dchrl-sa"):
        for seed in range(3):
            _fake_run(tmp_path / "runs" / method / str(seed), method, [(s, rng.normal()) for s in (0, 100, 200)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        scores, steps = export_curves(tmp_path / "runs", tmp_path / "curves.csv")
    with open(scores) as f:
        header = next(csv.reader(f))
    assert len(header) == 1 + 3 * 2 and header[0] == "step"
    assert "dchrl-sa_score_mean" in header and "ppo_score_std" in header
    with open(steps) as f:
        assert next(csv.reader(f))[1].endswith("_steps_mean")
