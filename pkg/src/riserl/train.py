"""Collection/learning loop, checkpoints, metrics stream and post-hoc evaluation."""

from __future__ import annotations

import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .agent import Agent, epsilon_at, staleness
from .config import ExperimentConfig, Mode
from .envs import VecRunner, make_env, FrameStack
from .errors import NotReady, NumericFault
from .nnsub import load_checkpoint, save_checkpoint
from .replay import ReplayBuffer, TransitionRecord, episode_overlap

log = logging.getLogger(__name__)


def deterministic_mode() -> bool:
    return os.environ.get("RISE_DETERMINISTIC") == "1"


def set_determinism(seed: int, on: bool) -> None:
    torch.manual_seed(seed)
    if on:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_buffer(cfg: ExperimentConfig, embed_dim: int) -> ReplayBuffer:
    net, sch = cfg.network, cfg.schedule
    n = sch.num_envs
    capacity = max(n, (cfg.replay.capacity // n) * n)
    return ReplayBuffer(
        capacity,
        (cfg.env.obs_size, cfg.env.obs_size),
        embed_dim,
        num_envs=n,
        framestack=net.framestack,
        hidden_dim=net.lstm_hidden if net.stored_state and net.mode is not Mode.PLAIN else None,
        prioritized=cfg.replay.prioritized,
        alpha=cfg.replay.alpha,
        beta=cfg.replay.beta,
        eps_priority=cfg.replay.eps_priority,
        chain=1 if net.mode is Mode.R2D2 else sch.n_step,
        seed=cfg.seed + 11,
    )


def sample_batch(cfg: ExperimentConfig, buffer: ReplayBuffer):
    net, sch = cfg.network, cfg.schedule
    if net.mode is Mode.R2D2:
        return buffer.sample_sequences(sch.batch_size, net.seq_len, net.burn_in, min_fill=cfg.replay.min_fill)
    k = net.context + net.no_grad_burn_in if net.mode is Mode.RISE else 1
    return buffer.sample_context(sch.batch_size, k, sch.n_step, sch.gamma, min_fill=cfg.replay.min_fill)


@dataclass
class EpisodeStats:
    window: int = 100
    returns: deque = field(default_factory=lambda: deque(maxlen=100))
    successes: deque = field(default_factory=lambda: deque(maxlen=100))
    junction: deque = field(default_factory=lambda: deque(maxlen=100))
    count: int = 0

    def add(self, ret: float, info: dict) -> None:
        self.count += 1
        self.returns.append(ret)
        self.successes.append(bool(info.get("success", False)))
        if info.get("junction") or "success" in info:
            self.junction.append(bool(info.get("success", False)))

    def summary(self) -> dict:
        def mean(d):
            return float(np.mean(d)) if len(d) else None
        return {"episodes": self.count, "return_mean_100": mean(self.returns),
                "success_100": mean(self.successes), "junction_success_100": mean(self.junction)}


@dataclass
class RunResult:
    run_dir: Path
    frames: int
    grad_steps: int
    agent: Agent
    buffer: ReplayBuffer
    stats: EpisodeStats
    staleness_log: list


def save_run_checkpoint(run_dir: Path, agent: Agent, frames: int, buffer: ReplayBuffer | None = None,
                        name: str = "checkpoint") -> Path:
    ck = run_dir / name
    ck.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck / "params.ckpt", agent.state_tensors())
    save_checkpoint(ck / "adam.ckpt", agent.optimizer.state_tensors())
    state = {"frames": frames, "grad_steps": agent.grad_steps,
             "encoder_passes": agent.counters.encoder_passes, "q_updates": agent.counters.q_updates,
             "batches": agent.counters.batches, "fixed_grad_abs": agent.fixed_grad_abs}
    (ck / "state.json").write_text(json.dumps(state, sort_keys=True))
    (ck / "config.json").write_text(agent.cfg.to_json())
    if buffer is not None:
        buffer.save(ck / "replay.bin")
    return ck


def run_training(cfg: ExperimentConfig, run_dir: str | Path | None = None, resume: bool = False,
                 deterministic: bool | None = None, trace: bool = False) -> RunResult:
    deterministic = deterministic_mode() if deterministic is None else deterministic
    run_dir = Path(run_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed, deterministic)
    (run_dir / "config.json").write_text(cfg.to_json())
    (run_dir / "version.json").write_text(json.dumps({"riserl": __version__, "torch": torch.__version__,
                                                      "numpy": np.__version__, "seed": cfg.seed}, sort_keys=True))
    sch, net = cfg.schedule, cfg.network
    N = sch.num_envs
    runner = VecRunner(cfg.env, N, net.framestack, seed=cfg.seed)
    agent = Agent(cfg, cfg.env.num_actions)
    buffer = make_buffer(cfg, agent.online.embed_dim)
    frames = 0
    ck = run_dir / "checkpoint"
    if resume and (ck / "params.ckpt").exists():
        agent.load_state_tensors(load_checkpoint(ck / "params.ckpt"))
        agent.optimizer.load_state_tensors(load_checkpoint(ck / "adam.ckpt"))
        st = json.loads((ck / "state.json").read_text())
        frames = st["frames"]
        agent.grad_steps = st["grad_steps"]
        agent.counters.encoder_passes = st["encoder_passes"]
        agent.counters.q_updates = st["q_updates"]
        agent.counters.batches = st["batches"]
        agent.fixed_grad_abs = st["fixed_grad_abs"]
        if (ck / "replay.bin").exists():
            buffer = ReplayBuffer.load(ck / "replay.bin", seed=cfg.seed + 11 + frames)
        log.info("resumed from %s at %d frames", ck, frames)

    traces = []
    if trace:
        for i, env in enumerate(runner.envs):
            env.trace = open(run_dir / f"trace_env{i}.jsonl", "a")
            traces.append(env.trace)
    runner.reset()
    state = agent.initial_actor_state(N)
    # ids stay unique across a resume: every stored episode used at least one frame
    base = frames + N if frames else 0
    next_episode = base + N
    episode_id = np.arange(N, dtype=np.int64) + base
    step_idx = np.zeros(N, dtype=np.int64)
    ep_return = np.zeros(N, dtype=np.float64)
    stats = EpisodeStats()
    staleness_log: list = []
    t0 = time.monotonic()
    last_log = frames
    loss_acc: list[float] = []
    td_acc: list[float] = []
    overlap_acc: list[float] = []

    metrics_path = run_dir / "metrics.jsonl"
    with open(metrics_path, "a") as mfh:

        def emit():
            slots = None
            stale = 0.0
            if buffer.num_active and net.mode is Mode.RISE:
                slots = np.flatnonzero(buffer.tree.leaves()[:buffer.capacity] > 0)[:256]
                stale = staleness(agent, buffer, slots)
                staleness_log.append((frames, agent.grad_steps, stale))
            rec = {
                "frames": frames,
                "grad_steps": agent.grad_steps,
                "epsilon": epsilon_at(frames, sch.eps_start, sch.eps_end, sch.eps_decay_frames,
                                      sch.eps_disable_frames),
                "loss": float(np.mean(loss_acc)) if loss_acc else None,
                "td_abs_mean": float(np.mean(td_acc)) if td_acc else None,
                "encoder_passes": agent.counters.encoder_passes,
                "q_updates": agent.counters.q_updates,
                "batches": agent.counters.batches,
                "batch_episode_overlap": float(np.mean(overlap_acc)) if overlap_acc else None,
                "staleness": stale,
                "fixed_grad_abs": agent.fixed_grad_abs,
                "stale_priority_updates": buffer.stale_updates,
                "wall_time": None if deterministic else round(time.monotonic() - t0, 3),
            }
            rec.update(stats.summary())
            mfh.write(json.dumps(rec, sort_keys=True) + "\n")
            mfh.flush()
            loss_acc.clear()
            td_acc.clear()
            overlap_acc.clear()

        try:
            while frames < sch.total_frames:
                eps = epsilon_at(frames, sch.eps_start, sch.eps_end, sch.eps_decay_frames, sch.eps_disable_frames)
                cur_frames = runner.current_frames()
                act = agent.act(state, runner.stacked, cur_frames, eps, runner.episode_start)
                results = runner.step(act.actions)
                for i, res in enumerate(results):
                    buffer.push(TransitionRecord(
                        obs=cur_frames[i], action=int(act.actions[i]), reward=res.reward, terminal=res.terminal,
                        embedding=act.embeddings[i], episode=int(episode_id[i]), step=int(step_idx[i]),
                        hidden=None if act.hidden is None else act.hidden[i]), env=i)
                    ep_return[i] += res.reward
                    step_idx[i] += 1
                    if res.done:
                        stats.add(ep_return[i], res.info)
                        ep_return[i] = 0.0
                        step_idx[i] = 0
                        episode_id[i] = next_episode
                        next_episode += 1
                frames += N
                if buffer.ready(cfg.replay.min_fill):
                    try:
                        batch = sample_batch(cfg, buffer)
                    except NotReady:
                        batch = None
                    if batch is not None:
                        report = agent.train_step(batch)
                        buffer.update_priorities(batch.indices, report.td_errors, batch.generations)
                        loss_acc.append(report.loss)
                        td_acc.append(float(np.mean(report.td_errors)))
                        overlap_acc.append(episode_overlap(batch.episodes))
                        if agent.grad_steps % sch.target_sync == 0:
                            agent.sync_target()
                if frames - last_log >= sch.log_every:
                    emit()
                    last_log = frames
                if sch.checkpoint_every and frames % sch.checkpoint_every < N:
                    save_run_checkpoint(run_dir, agent, frames, buffer if sch.save_replay else None)
        except NumericFault:
            save_run_checkpoint(run_dir, agent, frames, None, name="fault_checkpoint")
            raise
        finally:
            for fh in traces:
                fh.close()
        if frames > last_log or frames == 0 and sch.total_frames > 0:
            emit()
    save_run_checkpoint(run_dir, agent, frames, buffer if sch.save_replay else None)
    return RunResult(run_dir, frames, agent.grad_steps, agent, buffer, stats, staleness_log)


@dataclass
class EvalResult:
    returns: list
    successes: list
    junction: list

    def summary(self) -> dict:
        return {
            "episodes": len(self.returns),
            "mean_return": float(np.mean(self.returns)) if self.returns else None,
            "success_rate": float(np.mean(self.successes)) if self.successes else None,
            "junction_success": float(np.mean(self.junction)) if self.junction else None,
            "junction_reached": len(self.junction),
        }


def evaluate(agent: Agent, env_spec, episodes: int, epsilon: float = 0.0, seed: int = 12345) -> EvalResult:
    """Roll out ``episodes`` episodes one at a time with recurrent state carried per episode."""
    env = make_env(env_spec, seed)
    fs = agent.cfg.network.framestack
    saved = agent.rng
    agent.rng = np.random.default_rng(seed)
    rets, succ, junc = [], [], []
    try:
        for _ in range(episodes):
            obs = env.reset()
            stack = FrameStack(fs, obs.shape[1:])
            st = agent.initial_actor_state(1)
            s = stack.reset(obs)
            total, done, info = 0.0, False, {}
            while not done:
                a = agent.act(st, s[None], obs, epsilon).actions[0]
                res = env.step(int(a))
                total += res.reward
                done, info, obs = res.done, res.info, res.obs
                s = stack.push(obs)
            rets.append(total)
            succ.append(bool(info.get("success", False)))
            if "success" in info:
                junc.append(bool(info["success"]))
    finally:
        agent.rng = saved
    return EvalResult(rets, succ, junc)


def load_agent(checkpoint_dir: str | Path, cfg: ExperimentConfig | None = None) -> Agent:
    ck = Path(checkpoint_dir)
    if cfg is None:
        cfg = ExperimentConfig.load(ck / "config.json")
    agent = Agent(cfg, cfg.env.num_actions)
    agent.load_state_tensors(load_checkpoint(ck / "params.ckpt"))
    return agent
