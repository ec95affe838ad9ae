"""Training loop, evaluation, checkpoints and plot export."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentSpec
from .c51 import C51Agent
from .config import RunConfig, from_mapping, to_mapping
from .envs import PixelEnv, random_action
from .replay import NStepFolder, PrioritizedReplay, ReplayBuffer, Transition, linear_beta
from .sac import SacAgent
from .tensor import io as tio

log = logging.getLogger("rqdia")

CKPT_MAGIC = b"RQCK"
CKPT_VERSION = 1

# independent generator streams spawned from the run seed
STREAMS = ("init", "env", "action", "update", "aug", "replay")
EVAL_TAG = 0x5EED

SAC_FIELDS = ("critic_loss", "rqdia_loss", "actor_loss", "alpha_loss", "alpha", "mean_q", "entropy")
C51_FIELDS = ("c51_loss", "rqdia_loss", "mean_q", "grad_norm")
BASE_FIELDS = ("env_step", "episode", "episode_return", "eval_return", "eval_std", "updates")


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised after a non-finite loss; the metrics file ends with a diagnostic row."""


def metric_fields(agent_kind: str) -> tuple[str, ...]:
    return SAC_FIELDS if agent_kind == "sac" else C51_FIELDS


def csv_header(agent_kind: str) -> list[str]:
    return [*BASE_FIELDS, *metric_fields(agent_kind), "status"]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


# ---------------------------------------------------------------- setup


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def make_agent(cfg: RunConfig, rng: np.random.Generator):
    spec = cfg.env
    if cfg.agent == "sac":
        return SacAgent(cfg.sac, spec.obs_shape, spec.action_dim, rng)
    return C51Agent(cfg.c51, spec.obs_shape, spec.action_dim, rng)


def make_replay(cfg: RunConfig):
    r = cfg.replay
    if cfg.agent == "sac":
        return ReplayBuffer(r.capacity, min_fill=cfg.min_fill)
    return PrioritizedReplay(r.capacity, alpha=r.priority_exponent, min_fill=cfg.min_fill,
                             priority_eps=r.priority_eps)


def eval_env(cfg: RunConfig, episode: int) -> PixelEnv:
    """Evaluation episode ``k`` always starts from the same seed, ``(run seed, k)``."""
    return PixelEnv(cfg.env, np.random.default_rng([cfg.run.seed, EVAL_TAG, episode]))


def run_episode(env: PixelEnv, policy) -> float:
    obs = env.reset()
    total, done = 0.0, False
    while not done:
        obs, r, done = env.step(policy(obs))
        total += r
    return total


def evaluate_agent(agent, cfg: RunConfig, episodes: int) -> np.ndarray:
    """Greedy returns over the fixed evaluation episodes."""
    return np.array([run_episode(eval_env(cfg, k), lambda o: agent.act(o, "eval")) for k in range(episodes)])


def random_policy_returns(cfg: RunConfig, episodes: int, seed: int = 0) -> np.ndarray:
    """Uniform-random returns over the same evaluation episodes, a reference baseline."""
    rng = np.random.default_rng([seed, EVAL_TAG])
    return np.array([run_episode(eval_env(cfg, k), lambda o: random_action(cfg.env, rng))
                     for k in range(episodes)])


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def agent_kind(self) -> str:
        return self.header["agent"]

    @property
    def env_step(self) -> int:
        return self.header["env_step"]

    @property
    def config(self) -> RunConfig:
        return from_mapping(self.header["config"])


def agent_arrays(agent) -> dict[str, np.ndarray]:
    out = {}
    for name, mod in agent.modules().items():
        for k, v in mod.state_dict().items():
            out[f"{name}.{k}"] = v
    for name, opt in agent.optimizers().items():
        out.update(opt.state_arrays(name))
    return out


def load_agent_arrays(agent, arrays: dict[str, np.ndarray]) -> None:
    for name, mod in agent.modules().items():
        pre = name + "."
        mod.load_state_dict({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})
    for name, opt in agent.optimizers().items():
        opt.load_state_arrays(name, arrays)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(header)) + header + tio.to_bytes(ckpt.arrays)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {data[:4]!r})")
    if len(data) < 9:
        raise CheckpointError(f"{source}: truncated header")
    version, n = struct.unpack("<BI", data[4:9])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, this build reads version {CKPT_VERSION}")
    try:
        header = json.loads(data[9:9 + n].decode("utf-8"))
        arrays = tio.from_bytes(data[9 + n:])
    except (ValueError, struct.error) as e:
        raise CheckpointError(f"{source}: corrupt checkpoint: {e}") from None
    return Checkpoint(header, arrays)


def build_checkpoint(agent, cfg: RunConfig, env_step: int, rngs: dict[str, np.random.Generator],
                     episodes: int = 0) -> Checkpoint:
    header = {
        "agent": cfg.agent,
        "config": to_mapping(cfg),
        "env_step": int(env_step),
        "episodes": int(episodes),
        "rng": {k: g.bit_generator.state for k, g in rngs.items()},
        "updates": int(agent.updates),
    }
    return Checkpoint(header, agent_arrays(agent))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), str(path))


def restore(ckpt: Checkpoint, cfg: RunConfig, agent, rngs: dict[str, np.random.Generator]) -> None:
    if ckpt.agent_kind != cfg.agent:
        raise CheckpointError(f"checkpoint holds a {ckpt.agent_kind} agent, config asks for {cfg.agent}")
    load_agent_arrays(agent, ckpt.arrays)
    agent.updates = ckpt.header["updates"]
    for k, g in rngs.items():
        if k in ckpt.header["rng"]:
            g.bit_generator.state = ckpt.header["rng"][k]


def agent_from_checkpoint(ckpt: Checkpoint):
    cfg = ckpt.config
    agent = make_agent(cfg, np.random.default_rng(0))
    restore(ckpt, cfg, agent, {})
    return agent, cfg


@dataclass
class EvalResult:
    returns: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))


def evaluate(checkpoint, episodes: int | None = None) -> EvalResult:
    """Greedy returns of a saved agent on the run's fixed evaluation episodes."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    agent, cfg = agent_from_checkpoint(ckpt)
    n = cfg.run.eval_episodes if episodes is None else episodes
    if n < 1:
        raise ValueError(f"episodes must be positive, got {n}")
    return EvalResult(evaluate_agent(agent, cfg, n))


# ---------------------------------------------------------------- training


@dataclass
class RunResult:
    output_dir: str
    rows: list[dict]
    agent: object
    env_step: int
    replay: object = None


class _Interval:
    """Accumulates training returns and update metrics between logged rows."""

    def __init__(self, fields):
        self.fields = fields
        self.reset()

    def reset(self):
        self.returns: list[float] = []
        self.sums = dict.fromkeys(self.fields, 0.0)
        self.count = 0

    def add(self, metrics: dict):
        for k in self.fields:
            self.sums[k] += metrics[k]
        self.count += 1

    def means(self) -> dict:
        if not self.count:
            return dict.fromkeys(self.fields)
        return {k: v / self.count for k, v in self.sums.items()}


def _write_row(writer, fh, header, row: dict) -> None:
    writer.writerow([row[k] if k == "status" else fmt(row.get(k)) for k in header])
    fh.flush()


def run_training(cfg: RunConfig, resume=None, output_dir: str | None = None) -> RunResult:
    """Train for ``total_env_steps`` environment steps, logging one row per evaluation.

    ``metrics.csv`` is a pure function of the config; wall-clock time goes to
    ``timing.csv``. Resuming restores weights, optimiser moments, counters and
    generator states; the replay buffer and the in-flight episode start fresh.
    """
    out = output_dir or cfg.run.output_dir
    os.makedirs(out, exist_ok=True)
    rngs = make_streams(cfg.run.seed)
    agent = make_agent(cfg, rngs["init"])
    start, episodes = 0, 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        restore(ckpt, cfg, agent, rngs)
        start, episodes = ckpt.env_step, ckpt.header.get("episodes", 0)

    env = PixelEnv(cfg.env, rngs["env"])
    replay = make_replay(cfg)
    folder = NStepFolder(cfg.c51.n_step, cfg.c51.gamma) if cfg.agent == "c51" else None
    aug = AugmentSpec(cfg.augment_kind, cfg.augment.pad, cfg.augment.intensity_scale, rngs["aug"])
    fields = metric_fields(cfg.agent)
    header = csv_header(cfg.agent)
    interval = _Interval(fields)
    rows: list[dict] = []
    total = cfg.run.total_env_steps
    every = cfg.run.checkpoint_every

    with open(os.path.join(out, "metrics.csv"), "w", newline="") as mf, \
            open(os.path.join(out, "timing.csv"), "w", newline="") as tf:
        mw, tw = csv.writer(mf), csv.writer(tf)
        mw.writerow(header)
        tw.writerow(["env_step", "wall_clock_seconds"])
        mf.flush()
        if every and start == 0 and total > 0:
            save_checkpoint(os.path.join(out, "ckpt_0.rqck"), build_checkpoint(agent, cfg, 0, rngs, 0))
        t0 = time.perf_counter()
        obs = env.reset() if start < total else None
        ep_return = 0.0

        for step in range(start + 1, total + 1):
            warm = len(replay) >= cfg.min_fill
            if cfg.agent == "sac":
                a = agent.act(obs, "train", rngs["action"]) if warm else random_action(cfg.env, rngs["action"])
            else:
                a = agent.act(obs, "train", rngs["action"], cfg.c51.epsilon(step))
            next_obs, r, done = env.step(a)
            ep_return += r
            terminal = done and not env.truncated
            stored_r = float(np.clip(r, -1.0, 1.0)) if cfg.reward_clip else float(r)
            t = Transition(obs, a, stored_r, next_obs, terminal)
            for item in (folder.fold(t, episode_end=done) if folder is not None else [t]):
                replay.push(item)
            if done:
                episodes += 1
                interval.returns.append(ep_return)
                ep_return = 0.0
                obs = env.reset()
            else:
                obs = next_obs

            if len(replay) >= cfg.min_fill:
                for _ in range(cfg.run.updates_per_step):
                    if cfg.agent == "sac":
                        batch = replay.sample_uniform(cfg.sac.batch_size, rngs["replay"])
                        m = agent.train_step(batch, aug, rngs["update"])
                    else:
                        r_ = cfg.replay
                        beta = linear_beta(step, total, r_.priority_weight_start, r_.priority_weight_end)
                        m = agent.train_step(replay, aug, rngs["update"], rngs["replay"], beta)
                    interval.add(m)
                    if not all(math.isfinite(m[k]) for k in fields):
                        bad = sorted(k for k in fields if not math.isfinite(m[k]))
                        row = {"env_step": step, "episode": episodes, "updates": agent.updates,
                               **{k: m[k] for k in fields}, "status": "nan_abort"}
                        _write_row(mw, mf, header, row)
                        rows.append(row)
                        raise TrainingAborted(f"non-finite {', '.join(bad)} at env step {step} "
                                              f"(update {agent.updates})")

            if step % cfg.run.eval_every == 0 or step == total:
                ev = evaluate_agent(agent, cfg, cfg.run.eval_episodes)
                row = {"env_step": step, "episode": episodes,
                       "episode_return": float(np.mean(interval.returns)) if interval.returns else None,
                       "eval_return": float(np.mean(ev)), "eval_std": float(np.std(ev)),
                       "updates": agent.updates, **interval.means(), "status": "ok"}
                _write_row(mw, mf, header, row)
                tw.writerow([step, f"{time.perf_counter() - t0:.3f}"])
                tf.flush()
                rows.append(row)
                interval.reset()
                log.info("step %d  episodes %d  eval %.3f", step, episodes, row["eval_return"])
            if every and (step % every == 0 or step == total):
                save_checkpoint(os.path.join(out, f"ckpt_{step}.rqck"),
                                build_checkpoint(agent, cfg, step, rngs, episodes))

    return RunResult(out, rows, agent, max(start, total), replay)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- plots


def export_plot_data(inputs, output, column: str = "eval_return") -> list[tuple[int, float, float, int]]:
    """Mean, spread and count of ``column`` across seed runs, per logged env step.

    The spread is the root mean squared deviation from the mean (divisor n),
    so one run gives 0 and the pair (1, 3) gives 1.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("no metrics files given")
    series = []
    for path in inputs:
        rows = [r for r in read_metrics(path) if r.get("status") == "ok" and r.get(column, "") != ""]
        if not rows:
            raise ValueError(f"{path}: no logged {column} values")
        series.append({int(r["env_step"]): float(r[column]) for r in rows})
    steps = sorted(series[0])
    for path, s in zip(inputs, series):
        if sorted(s) != steps:
            odd = sorted(set(s) ^ set(steps))
            raise ValueError(f"{path}: env steps do not align with {inputs[0]}; differing steps: {odd}")
    out = []
    for st in steps:
        vals = np.array([s[st] for s in series])
        std = float(np.std(vals))
        out.append((st, float(np.mean(vals)), std, len(vals)))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["env_step", "mean", "std", "count"])
    for st, mean, std, n in out:
        w.writerow([st, fmt(mean), fmt(std), n])
    with open(output, "w", newline="") as f:
        f.write(buf.getvalue())
    return out
