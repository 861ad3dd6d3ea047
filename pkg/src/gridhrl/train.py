"""Training and evaluation loops for flat PPO, DcHRL and DcHRL-SA.

All variants share one loop. ``n_envs`` environments advance in lockstep,
one decision each per iteration: a primitive action for flat PPO, a whole
macro for the hierarchical agents. Everything random derives from the run
seed, so a run repeated with the same config writes identical logs.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .abstraction import AbstractionModel, AbstractionTrainer
from .config import ExperimentConfig
from .envs import Action, MultiItemEnv, make_env
from .envs.core import ObsMode, TrajectoryLog, num_codes
from .features import Featurizer, History
from .hierarchy import Goal, MacroLog, compute_mask, execute_macro, goal_space_size
from .nn import generator, load_checkpoint, save_checkpoint, CheckpointVersionError
from .ppo import ActorCritic, Rollout, masked_argmax, masked_sample, ppo_update

TRAIN_STREAM = 1
EVAL_STREAM = 2
POLICY_STREAM = 3
ABSTRACTION_STREAM = 4


def episode_seed(run_seed: int, stream: int, env_id: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(run_seed) & (2**64 - 1), spawn_key=(stream, env_id, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream_rng(run_seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(run_seed) & (2**64 - 1), spawn_key=(stream,))))


# -- agent -----------------------------------------------------------------------------


class Agent:
    """Networks and featurization for one method/environment pairing."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        probe = make_env(cfg.env_config())
        obs = probe.reset(0)
        self.rules = probe.rules
        n_types = cfg.num_item_types if cfg.env == "multiitem" else 0
        scale = 1.0 / cfg.group_size if cfg.env == "multiitem" else 1.0
        self.featurizer = Featurizer.for_observation(obs, num_codes(n_types), scale, cfg.goal_features)
        self.obs_shape = obs.shape
        self.egocentric = obs.mode is ObsMode.EGOCENTRIC
        self.recurrent = cfg.mode == "pomdp"
        self.history_len = cfg.l if self.recurrent else 1
        self.n_actions = goal_space_size(obs.shape) if cfg.hierarchical else len(Action)
        gen = generator(seed)
        self.abstraction: AbstractionModel | None = None
        if cfg.abstraction:
            self.abstraction = AbstractionModel(
                self.featurizer.dim, self.n_actions, cfg.abstraction_config(), gen, recurrent=self.recurrent
            )
            self.policy = ActorCritic(cfg.dim_z, self.n_actions, gen, cfg.hidden_sizes())
        else:
            self.policy = ActorCritic(
                self.featurizer.dim,
                self.n_actions,
                gen,
                cfg.hidden_sizes(),
                recurrent_dim=cfg.lstm_hidden if self.recurrent else None,
            )

    def history(self) -> History:
        return History(self.history_len, self.featurizer.packed_dim)

    def snapshot(self, hist: History):
        """(packed input, validity) as stored in buffers; MDP inputs drop the time axis."""
        arr, valid = hist.array()
        if not self.recurrent:
            return arr[0], None
        return arr, valid

    def policy_inputs(self, packed: np.ndarray, valid: np.ndarray | None):
        """Returns (array to store in the rollout, network input, validity tensor)."""
        valid_t = torch.from_numpy(valid) if valid is not None else None
        x = self.featurizer(torch.from_numpy(packed))
        if self.abstraction is not None:
            with torch.no_grad():
                z = self.abstraction.encode(x, valid_t)
            return z.numpy(), z, None
        return packed, x, valid_t

    @property
    def update_featurizer(self):
        return None if self.abstraction is not None else self.featurizer

    def masks(self, observations) -> np.ndarray:
        if not self.cfg.hierarchical:
            return np.ones((len(observations), self.n_actions), dtype=bool)
        return np.stack([compute_mask(o, self.rules) for o in observations])

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"policy.{k}": v for k, v in self.policy.state_dict().items()}
        if self.abstraction is not None:
            out.update({f"abstraction.{k}": v for k, v in self.abstraction.state_dict().items()})
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        pol = {k[len("policy.") :]: v for k, v in tensors.items() if k.startswith("policy.")}
        self.policy.load_state_dict(pol)
        if self.abstraction is not None:
            ab = {k[len("abstraction.") :]: v for k, v in tensors.items() if k.startswith("abstraction.")}
            self.abstraction.load_state_dict(ab)


# -- environment workers ------------------------------------------------------------------


class Worker:
    """One environment plus its decision history and episode bookkeeping."""

    def __init__(self, agent: Agent, run_seed: int, stream: int, env_id: int):
        self.env = make_env(agent.cfg.env_config())
        self.agent = agent
        self.run_seed = run_seed
        self.stream = stream
        self.env_id = env_id
        self.hist = agent.history()
        self.episodes_started = 0
        self.episode_id = -1
        self.seed = 0
        self.obs = None

    def reset(self, episode_id: int) -> None:
        self.seed = episode_seed(self.run_seed, self.stream, self.env_id, self.episodes_started)
        self.episodes_started += 1
        self.episode_id = episode_id
        self.obs = self.env.reset(self.seed)
        self.hist.reset()
        self.hist.push(self.agent.featurizer.pack(self.obs))

    def act(self, action: int):
        """Apply one decision; returns (reward, duration, done, macro or None)."""
        if self.agent.cfg.hierarchical:
            goal = Goal.from_index(action, self.obs.shape)
            self.agent.featurizer.set_goal(self.hist.last, action)
            macro = execute_macro(self.env, self.obs, goal)
            self.obs = macro.next_obs
            self.hist.push(self.agent.featurizer.pack(self.obs))
            return macro.accumulated_reward, macro.duration, macro.done, macro
        out = self.env.step(action)
        self.obs = out.observation
        self.hist.push(self.agent.featurizer.pack(self.obs))
        return out.reward, 1, out.done, None

    def summary(self) -> dict:
        s = self.env.state
        rec = {"score": self.env.episode_return, "steps": s.step_count}
        if isinstance(self.env, MultiItemEnv):
            rec["submit_number"] = self.env.ledger.submit_number
        return rec


def _decide(agent: Agent, workers, rng, greedy: bool):
    snaps = [agent.snapshot(w.hist) for w in workers]
    packed = np.stack([s[0] for s in snaps])
    valid = np.stack([s[1] for s in snaps]) if agent.recurrent else None
    stored, x, valid_t = agent.policy_inputs(packed, valid)
    masks = agent.masks([w.obs for w in workers])
    with torch.no_grad():
        logits, values = agent.policy(x, valid_t)
    logits = logits.double().numpy()
    actions = np.zeros(len(workers), dtype=np.int64)
    logps = np.zeros(len(workers))
    for i in range(len(workers)):
        if greedy:
            actions[i] = masked_argmax(logits[i], masks[i])
        else:
            actions[i], logps[i] = masked_sample(logits[i], masks[i], rng)
    return snaps, stored, valid, masks, actions, logps, values.double().numpy()


# -- evaluation ------------------------------------------------------------------------------


def evaluate(agent: Agent, run_seed: int, n_episodes: int, greedy: bool = True) -> list[dict]:
    """Play ``n_episodes`` fresh episodes (evaluation seed stream) in lockstep."""
    if n_episodes <= 0:
        return []
    workers = [Worker(agent, run_seed, EVAL_STREAM, i) for i in range(n_episodes)]
    for i, w in enumerate(workers):
        w.reset(i)
    rng = stream_rng(run_seed, EVAL_STREAM)
    results: dict[int, dict] = {}
    active = list(workers)
    while active:
        _, _, _, _, actions, _, _ = _decide(agent, active, rng, greedy)
        still = []
        for w, a in zip(active, actions):
            _, _, done, _ = w.act(int(a))
            if done:
                results[w.env_id] = w.summary()
            else:
                still.append(w)
        active = still
    return [results[i] for i in range(n_episodes)]


# -- training ------------------------------------------------------------------------------------

UPDATE_FIELDS = [
    "update_idx",
    "env_steps",
    "mean_episode_score",
    "mean_episode_steps",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
]
EPISODE_FIELDS = ["episode_idx", "env_steps", "env_id", "seed", "score", "steps", "submit_number"]
EVAL_FIELDS = ["update_idx", "env_steps", "score_mean", "score_std", "steps_mean", "n_episodes"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


class CsvLog:
    """CSV writer; ``keep_rows`` reopens an existing log truncated to that many data rows."""

    def __init__(self, path: Path, header: list[str], keep_rows: int | None = None):
        self.header = header
        self.rows = 0
        if keep_rows is None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(header)
            return
        with open(path, newline="") as f:
            lines = f.read().splitlines(keepends=True)
        if lines[0].rstrip("\r\n").split(",") != header or len(lines) < keep_rows + 1:
            raise ValueError(f"{path} does not match the resume state")
        with open(path, "w", newline="") as f:
            f.write("".join(lines[: keep_rows + 1]))
        self.rows = keep_rows
        self.fh = open(path, "a", newline="")
        self.writer = csv.writer(self.fh)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row.get(k, "")) for k in self.header])
        self.rows += 1

    def close(self) -> None:
        self.fh.close()


@dataclass
class RunResult:
    out_dir: Path
    episodes: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    updates: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def read_log(path) -> list[dict]:
    """Rows of a CSV log with numeric fields parsed (blank cells become NaN)."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = float("nan")
                else:
                    try:
                        parsed[k] = int(v)
                    except ValueError:
                        parsed[k] = float(v)
            out.append(parsed)
    return out


def converged_score(scores) -> float:
    """Mean over the final 10% of training episodes (at least one)."""
    scores = list(scores)
    if not scores:
        return float("nan")
    k = max(1, math.ceil(0.1 * len(scores)))
    return float(np.mean(scores[-k:]))


def train_run(
    cfg: ExperimentConfig, seed: int, out_dir, progress=None, resume: bool = False, stop_after: int | None = None
) -> RunResult:
    """Train one seed; writes CSV logs, checkpoints, a manifest and a summary.

    Every checkpoint also writes ``resume.pt`` with the optimizer, random
    generator, environment and buffer state. ``resume=True`` continues from
    it and, for the same config, reproduces the logs of an uninterrupted run.
    ``stop_after`` ends the run after that many updates (without a summary),
    standing in for an interruption.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    started = time.time()

    agent = Agent(cfg, seed)
    ppo_cfg = cfg.ppo_config()
    optimizer = torch.optim.Adam(agent.policy.parameters(), lr=ppo_cfg.lr)
    shuffle_gen = generator(seed + 1)
    rng = stream_rng(seed, POLICY_STREAM)
    trainer = None
    if agent.abstraction is not None:
        trainer = AbstractionTrainer(
            agent.abstraction,
            agent.featurizer,
            cfg.abstraction_config(),
            stream_rng(seed, ABSTRACTION_STREAM),
            window_shape=agent.obs_shape if agent.egocentric else None,
        )

    paths = {
        "updates": out / "updates.csv",
        "episodes": out / "episodes.csv",
        "eval": out / "eval.csv",
        "checkpoint": out / "checkpoint.bin",
        "resume": out / "resume.pt",
        "summary": out / "summary.json",
    }
    manifest = {
        "config": cfg.to_dict(),
        "config_text": cfg.dumps(),
        "code_version": __version__,
        "seed": seed,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "paths": {k: v.name for k, v in paths.items()},
    }
    update_fields = UPDATE_FIELDS + (["bisim_loss", "bisim_reward_loss", "bisim_transition_loss"] if trainer else [])
    if cfg.log_trajectories or (cfg.log_macros and cfg.hierarchical):
        if resume:
            raise ValueError("resume does not support trajectory or macro logging")
    traj = TrajectoryLog(out / "trajectories.csv") if cfg.log_trajectories else None
    macro_log = MacroLog(out / "macros.csv") if cfg.log_macros and cfg.hierarchical else None
    if traj:
        manifest["paths"]["trajectories"] = "trajectories.csv"
    if macro_log:
        manifest["paths"]["macros"] = "macros.csv"

    result = RunResult(out)
    workers = [Worker(agent, seed, TRAIN_STREAM, i) for i in range(cfg.n_envs)]
    state = None
    if resume:
        if (out / "config.txt").read_text() != cfg.dumps():
            raise ValueError(f"config differs from the one recorded in {out}")
        state = torch.load(paths["resume"], weights_only=False)
        agent.load_state_tensors(state["tensors"])
        optimizer.load_state_dict(state["optimizer"])
        shuffle_gen.set_state(state["shuffle_gen"])
        rng.bit_generator.state = state["rng"]
        for w, ws in zip(workers, state["workers"]):
            w.__dict__.update(ws)
        if trainer is not None:
            trainer.optimizer.load_state_dict(state["abs_optimizer"])
            trainer.rng.bit_generator.state = state["abs_rng"]
            trainer.buffer.__dict__.update(state["buffer"])
            trainer.initial_loss, trainer.steps = state["abs_initial_loss"], state["abs_steps"]
        manifest = json.loads((out / "manifest.json").read_text())
    else:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (out / "config.txt").write_text(cfg.dumps())
    keep = state["log_rows"] if state else {}
    logs = {
        "updates": CsvLog(paths["updates"], update_fields, keep.get("updates")),
        "episodes": CsvLog(paths["episodes"], EPISODE_FIELDS, keep.get("episodes")),
        "eval": CsvLog(paths["eval"], EVAL_FIELDS, keep.get("eval")),
    }
    if state:
        result.updates = read_log(paths["updates"])
        result.episodes = read_log(paths["episodes"])
        result.evals = read_log(paths["eval"])
        counters = state["counters"]
        env_steps, decisions, update_idx = counters["env_steps"], counters["decisions"], counters["update_idx"]
        next_eval, episode_counter = counters["next_eval"], counters["episode_counter"]
    else:
        episode_counter = 0
        for w in workers:
            w.reset(episode_counter)
            episode_counter += 1
        env_steps = decisions = update_idx = next_eval = 0
    if traj:
        for w in workers:
            w.env.on_step = lambda o, a, w=w: traj.record(w.episode_id, o, a)
    steps_per_env = max(1, cfg.rollout // cfg.n_envs)

    def save_resume():
        worker_state = [
            {"env": w.env, "hist": w.hist, "obs": w.obs, "episodes_started": w.episodes_started,
             "episode_id": w.episode_id, "seed": w.seed}
            for w in workers
        ]
        blob = {
            "tensors": agent.state_tensors(),
            "optimizer": optimizer.state_dict(),
            "shuffle_gen": shuffle_gen.get_state(),
            "rng": rng.bit_generator.state,
            "workers": worker_state,
            "log_rows": {k: log.rows for k, log in logs.items()},
            "counters": {"env_steps": env_steps, "decisions": decisions, "update_idx": update_idx,
                         "next_eval": next_eval, "episode_counter": episode_counter},
        }
        if trainer is not None:
            blob.update(
                abs_optimizer=trainer.optimizer.state_dict(),
                abs_rng=trainer.rng.bit_generator.state,
                buffer=dict(trainer.buffer.__dict__),
                abs_initial_loss=trainer.initial_loss,
                abs_steps=trainer.steps,
            )
        for log in logs.values():
            log.fh.flush()
        torch.save(blob, paths["resume"])

    def run_eval():
        res = evaluate(agent, seed, cfg.eval_episodes)
        scores = [r["score"] for r in res]
        row = {
            "update_idx": update_idx,
            "env_steps": env_steps,
            "score_mean": float(np.mean(scores)) if scores else float("nan"),
            "score_std": float(np.std(scores)) if scores else float("nan"),
            "steps_mean": float(np.mean([r["steps"] for r in res])) if res else float("nan"),
            "n_episodes": len(res),
        }
        logs["eval"].write(row)
        result.evals.append(row)

    try:
        while env_steps < cfg.budget:
            if cfg.eval_every > 0 and env_steps >= next_eval:
                run_eval()
                next_eval += cfg.eval_every
            rollout = Rollout(cfg.n_envs)
            finished: list[dict] = []
            for _ in range(steps_per_env):
                snaps, stored, valid, masks, actions, logps, values = _decide(agent, workers, rng, greedy=False)
                rewards = np.zeros(cfg.n_envs)
                dones = np.zeros(cfg.n_envs, dtype=bool)
                durations = np.zeros(cfg.n_envs, dtype=np.int64)
                for i, w in enumerate(workers):
                    r, d, done, macro = w.act(int(actions[i]))
                    rewards[i], durations[i], dones[i] = r, d, done
                    env_steps += d
                    if macro_log:
                        macro_log.record(decisions, int(actions[i]), macro, masks[i])
                    decisions += 1
                    if trainer is not None:
                        h_next, v_next = agent.snapshot(w.hist)
                        trainer.buffer.add(snaps[i][0], snaps[i][1], int(actions[i]), r, h_next, v_next)
                    if done:
                        rec = {"episode_idx": w.episode_id, "env_steps": env_steps, "env_id": w.env_id, "seed": w.seed}
                        rec.update(w.summary())
                        logs["episodes"].write(rec)
                        result.episodes.append(rec)
                        finished.append(rec)
                        w.reset(episode_counter)
                        episode_counter += 1
                rollout.add(stored, valid if agent.policy.recurrent else None, actions, masks, rewards, values,
                            logps, dones, durations)
            _, _, _, _, _, _, last_values = _decide(agent, workers, rng, greedy=True)
            batch = rollout.finish(last_values, ppo_cfg)
            stats = ppo_update(agent.policy, optimizer, batch, ppo_cfg, shuffle_gen, agent.update_featurizer)
            row = {
                "update_idx": update_idx,
                "env_steps": env_steps,
                "mean_episode_score": float(np.mean([e["score"] for e in finished])) if finished else float("nan"),
                "mean_episode_steps": float(np.mean([e["steps"] for e in finished])) if finished else float("nan"),
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "entropy": stats.entropy,
                "clip_fraction": stats.clip_fraction,
                "approx_kl": stats.approx_kl,
            }
            if stats.aborted:
                row["policy_loss"] = float("nan")
            if trainer is not None:
                res = trainer.train()
                row["bisim_loss"] = res.loss
                row["bisim_reward_loss"] = res.reward_loss
                row["bisim_transition_loss"] = res.transition_loss
            logs["updates"].write(row)
            result.updates.append(row)
            update_idx += 1
            if cfg.checkpoint_every and update_idx % cfg.checkpoint_every == 0:
                _save(agent, cfg, seed, paths["checkpoint"], env_steps, update_idx)
                save_resume()
            if progress:
                progress(row)
            if stop_after is not None and update_idx >= stop_after:
                return result
        if cfg.eval_every > 0:
            run_eval()
    finally:
        for log in logs.values():
            log.close()
        if traj:
            traj.close()
        if macro_log:
            macro_log.close()

    _save(agent, cfg, seed, paths["checkpoint"], env_steps, update_idx)
    scores = [e["score"] for e in result.episodes]
    bisim = [u["bisim_loss"] for u in result.updates if trainer is not None and not math.isnan(u["bisim_loss"])]
    summary = {
        "method": cfg.method,
        "env": cfg.env,
        "mode": cfg.mode,
        "seed": seed,
        "env_steps": env_steps,
        "updates": update_idx,
        "episodes": len(scores),
        "converged_score": converged_score(scores),
        "converged_steps": converged_score([e["steps"] for e in result.episodes]),
        "final_eval_score": result.evals[-1]["score_mean"] if result.evals else None,
        "best_eval_score": max((e["score_mean"] for e in result.evals), default=None),
        "wall_seconds": time.time() - started,
    }
    if trainer is not None:
        summary["bisim_initial_loss"] = trainer.initial_loss
        summary["bisim_final_loss"] = float(np.mean(bisim[-max(1, math.ceil(0.1 * len(bisim))) :])) if bisim else None
    paths["summary"].write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    result.summary = summary
    return result


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _save(agent: Agent, cfg: ExperimentConfig, seed: int, path: Path, env_steps: int, updates: int) -> None:
    meta = {"config": cfg.dumps(), "seed": seed, "env_steps": env_steps, "updates": updates, "code_version": __version__}
    save_checkpoint(path, agent.state_tensors(), meta)


def load_agent(path) -> tuple[Agent, ExperimentConfig, dict]:
    """Rebuild an agent from a checkpoint written by ``train_run``."""
    from .config import parse_pairs

    tensors, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointVersionError(f"{path} carries no run configuration")
    cfg = parse_pairs(meta["config"].splitlines())
    agent = Agent(cfg, meta.get("seed", 0))
    try:
        agent.load_state_tensors(tensors)
    except RuntimeError as exc:
        raise CheckpointVersionError(f"checkpoint does not match its configuration: {exc}") from None
    return agent, cfg, meta
