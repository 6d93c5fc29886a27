"""Twin-delayed deterministic policy gradient training for the car-following task.

The same loop trains three variants:

* ``atd3``    attention actor, twin critics, target smoothing, delayed actor updates
* ``ddpg``    feed-forward actor and single critic over the newest observation
* ``ddpg-rt`` feed-forward actor and single critic over the whole 10-step window
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import env
from .env import A_MAX, WINDOW, FollowEpisode
from .nets import AttentionActor, Critic, MlpActor, Network, TargetSet, parameter_set, soft_update
from .numerics import Adam, NonFiniteError, Tape, load_manifest, load_params, save_params

log = logging.getLogger(__name__)

MODES = ("atd3", "ddpg", "ddpg-rt")
LOG_COLUMNS = ("epoch", "cycle", "critic1_loss", "critic2_loss", "actor_objective", "eval_rmspe", "wallclock_s")


class TrainingAborted(RuntimeError):
    """A loss or objective became non-finite."""


# Runs the full schedule with two gradient iterations per cycle instead of one
# per stored sample, so a 40-episode run finishes in minutes on one core.
DESK_PROFILE = {"updates_per_cycle": 2}


@dataclass
class TrainConfig:
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 1e-3
    expl_noise: float = 0.1      # std, in units of A_MAX
    policy_noise: float = 0.2    # target smoothing std, units of A_MAX
    noise_clip: float = 0.5
    batch_size: int = 200
    epochs: int = 60
    cycles: int = 60
    samples_per_cycle: int = 200
    updates_per_cycle: int = 200  # one gradient iteration per stored sample
    policy_delay: int = 2
    buffer_capacity: int = 100_000
    hidden: int = 100
    lanes: int = 10               # episodes rolled out side by side
    mode: str = "atd3"
    seed: int = 0
    log_wallclock: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("mode", "seed", "log_wallclock", "expl_noise", "policy_noise", "noise_clip"):
                continue
            if not val > 0:
                raise ValueError(f"{f.name} must be positive, got {val}")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be at least 1")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer capacity must hold at least one batch")
        if self.samples_per_cycle % self.lanes:
            raise ValueError("samples_per_cycle must be a multiple of lanes")

    @property
    def twin(self) -> bool:
        return self.mode == "atd3"

    @property
    def delay(self) -> int:
        return self.policy_delay if self.mode == "atd3" else 1

    @property
    def smoothing(self) -> bool:
        return self.mode == "atd3"

    @property
    def window(self) -> int:
        return 1 if self.mode == "ddpg" else WINDOW

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ReplayBuffer:
    """Fixed-capacity circular store; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, window: int = WINDOW):
        self.capacity = capacity
        self.s = np.zeros((capacity, window, 3))
        self.a = np.zeros(capacity)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, window, 3))
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        if not np.isfinite(r):
            raise ValueError("transition reward must be finite")
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def sample(self, rng: np.random.Generator, m: int):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=m)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])

    def ordered(self) -> np.ndarray:
        """Insertion ordinals of stored items, oldest first (for eviction checks)."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return np.arange(self.inserted - self.capacity, self.inserted)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray   # normalised actions
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.a.shape[0]


def make_actor(mode: str, rng: np.random.Generator, hidden: int = 100) -> Network:
    if mode == "atd3":
        return AttentionActor.init(rng, hidden)
    return MlpActor.init(rng, 1 if mode == "ddpg" else WINDOW, hidden)


def select_action(actor: Network, states, sigma: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Policy action in m/s^2 plus Gaussian exploration noise of std ``sigma * A_MAX``, clipped."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a, _ = actor(states)
    if sigma > 0:
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return np.clip(a, -1.0, 1.0) * A_MAX


def compute_target(batch: Batch, target_actor: Network, target_c1: Critic, target_c2: Critic | None,
                   gamma: float, rng: np.random.Generator | None = None,
                   policy_noise: float = 0.0, noise_clip: float = 0.0) -> np.ndarray:
    """Bootstrap targets ``r + gamma * min_k Q'_k(s', pi'(s') + eps)``; ``y = r`` at terminals."""
    a2, _ = target_actor(batch.s2)
    if policy_noise > 0:
        eps = np.clip(rng.normal(0.0, policy_noise, size=a2.shape), -noise_clip, noise_clip)
        a2 = np.clip(a2 + eps, -1.0, 1.0)
    q = target_c1(batch.s2, a2)
    if target_c2 is not None:
        q = np.minimum(q, target_c2(batch.s2, a2))
    return batch.r + gamma * np.where(batch.done, 0.0, q)


def critic_step(critic: Critic, opt: Adam, batch: Batch, y: np.ndarray) -> float:
    """One Adam step on mean squared TD error; ``y`` is treated as a constant."""
    tape = Tape()
    p = critic.tape_params(tape)
    q = critic.forward_tape(tape, batch.s, tape.const(batch.a[:, None]), p)
    loss = tape.mse(q, tape.const(y[:, None]))
    value = float(loss.value[0, 0])
    if not np.isfinite(value):
        raise TrainingAborted(f"critic loss is {value}")
    grads = tape.backward(loss)
    opt.step(critic.params, {k: grads[n.index] for k, n in p.items()})
    return value


def actor_step(actor: Network, critic: Critic, opt: Adam, states) -> float:
    """One Adam ascent step on mean Q(s, pi(s)); critic weights are constants."""
    tape = Tape()
    p = actor.tape_params(tape)
    a, _ = actor.forward_tape(tape, states, p)
    q = critic.forward_tape(tape, states, a, critic.tape_params(tape, trainable=False))
    objective = tape.mean(q)
    value = float(objective.value[0, 0])
    if not np.isfinite(value):
        raise TrainingAborted(f"actor objective is {value}")
    grads = tape.backward(tape.scale(objective, -1.0))
    opt.step(actor.params, {k: grads[n.index] for k, n in p.items()})
    return value


class Agent:
    """Networks, targets, optimisers and replay memory for one training run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng([config.seed, 1])
        self.actor = make_actor(config.mode, init_rng, config.hidden)
        self.critic1 = Critic.init(init_rng, config.window, config.hidden)
        self.critic2 = Critic.init(init_rng, config.window, config.hidden) if config.twin else None
        self.targets = TargetSet(
            self.actor.copy(), self.critic1.copy(), self.critic2.copy() if self.critic2 is not None else None
        )
        self.actor_opt = Adam(lr=config.actor_lr)
        self.critic1_opt = Adam(lr=config.critic_lr)
        self.critic2_opt = Adam(lr=config.critic_lr) if config.twin else None
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.iterations = 0
        self.critic_updates = 0
        self.actor_updates = 0
        self.target_updates = 0

    def policy(self):
        from .evaluation import ActorPolicy
        return ActorPolicy(self.actor, name=self.config.mode.upper())

    def train_iteration(self) -> tuple[float, float, float | None]:
        """One pass of the inner loop: critic step every call, actor/targets every ``delay``."""
        cfg = self.config
        self.iterations += 1
        batch = self.buffer.sample(self.rng, cfg.batch_size)
        y = compute_target(
            batch, self.targets.actor, self.targets.critic1, self.targets.critic2, cfg.gamma, self.rng,
            cfg.policy_noise if cfg.smoothing else 0.0, cfg.noise_clip,
        )
        l1 = critic_step(self.critic1, self.critic1_opt, batch, y)
        l2 = critic_step(self.critic2, self.critic2_opt, batch, y) if self.critic2 is not None else float("nan")
        self.critic_updates += 1
        objective = None
        if self.iterations % cfg.delay == 0:
            objective = actor_step(self.actor, self.critic1, self.actor_opt, batch.s)
            self.actor_updates += 1
            soft_update(self.targets.actor, self.actor, cfg.tau)
            soft_update(self.targets.critic1, self.critic1, cfg.tau)
            if self.critic2 is not None:
                soft_update(self.targets.critic2, self.critic2, cfg.tau)
            self.target_updates += 1
        return l1, l2, objective

    def parameters(self) -> dict[str, np.ndarray]:
        return parameter_set(self.actor, self.critic1, self.critic2, self.targets)

    def save(self, path) -> Path:
        return save_params(path, self.parameters(), meta={"mode": self.config.mode, "hidden": self.config.hidden})


def load_actor(path) -> Network:
    """Rebuild the main actor stored in a checkpoint written by :meth:`Agent.save`."""
    meta = load_manifest(path).get("meta", {})
    mode = meta.get("mode", "atd3")
    params = load_params(path)
    actor = make_actor(mode, np.random.default_rng(0), int(meta.get("hidden", 100)))
    actor.load({k: params[k] for k in actor.params})
    return actor


class Lanes:
    """Several episodes stepped side by side for sample generation."""

    def __init__(self, episodes: Sequence[FollowEpisode], n: int, rng: np.random.Generator):
        self.episodes = episodes
        self.rng = rng
        self.current: list[tuple[int, env.StateWindow]] = [self._fresh() for _ in range(n)]
        self.finished = 0

    def _fresh(self):
        i = int(self.rng.integers(len(self.episodes)))
        return i, env.reset(self.episodes[i])

    def states(self) -> np.ndarray:
        return np.stack([s.obs for _, s in self.current])

    def step(self, actions: np.ndarray, buffer: ReplayBuffer) -> None:
        for k, ((i, state), a) in enumerate(zip(self.current, actions)):
            out = env.step(state, float(a), self.episodes[i])
            buffer.add(state.obs, a / A_MAX, out.reward, out.state.obs, out.cause == "collision")
            if out.terminal:
                self.current[k] = self._fresh()
                self.finished += 1
            else:
                self.current[k] = (i, out.state)


@dataclass
class TrainResult:
    agent: Agent
    log: list[dict] = field(default_factory=list)
    attention_checks: int = 0
    attention_violations: int = 0

    @property
    def actor(self) -> Network:
        return self.agent.actor

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.log:
                w.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def train(config: TrainConfig, episodes: Sequence[FollowEpisode],
          eval_episodes: Sequence[FollowEpisode] | None = None,
          checkpoint_dir=None,
          on_attention: Callable[[np.ndarray], None] | None = None) -> TrainResult:
    """Run the full epoch/cycle schedule and return the trained agent and its log.

    Each cycle rolls ``samples_per_cycle`` exploratory transitions into the
    buffer, then performs ``updates_per_cycle`` gradient iterations once the
    buffer holds a full batch.  After every epoch the deterministic policy is
    evaluated on ``eval_episodes`` (pooled speed RMSPE, percent).
    ``on_attention`` receives every batch of attention weights the actor emits
    while acting.
    """
    from .evaluation import pooled_rmspe, rollout_many

    if not episodes:
        raise ValueError("training needs at least one episode")
    agent = Agent(config)
    result = TrainResult(agent)
    lanes = Lanes(episodes, config.lanes, np.random.default_rng([config.seed, 2]))
    explore_rng = np.random.default_rng([config.seed, 3])
    start = time.perf_counter()
    steps_per_cycle = config.samples_per_cycle // config.lanes

    def check_attention(beta):
        if beta is None:
            return
        result.attention_checks += beta.shape[0]
        bad = np.abs(beta.sum(axis=1) - 1.0) > 1e-9
        result.attention_violations += int(bad.sum())
        if on_attention is not None:
            on_attention(beta)

    for epoch in range(1, config.epochs + 1):
        for cycle in range(1, config.cycles + 1):
            for _ in range(steps_per_cycle):
                states = lanes.states()
                a, beta = agent.actor(states)
                check_attention(beta)
                noisy = np.clip(a + explore_rng.normal(0.0, config.expl_noise, size=a.shape), -1.0, 1.0)
                lanes.step(noisy * A_MAX, agent.buffer)
            l1 = l2 = obj = None
            objs = []
            if len(agent.buffer) >= config.batch_size:
                for _ in range(config.updates_per_cycle):
                    try:
                        l1, l2, o = agent.train_iteration()
                    except NonFiniteError as exc:
                        raise TrainingAborted(str(exc)) from exc
                    if o is not None:
                        objs.append(o)
                obj = objs[-1] if objs else None
            row = {
                "epoch": epoch, "cycle": cycle, "critic1_loss": l1,
                "critic2_loss": l2 if config.twin else None, "actor_objective": obj,
                "eval_rmspe": None,
                "wallclock_s": round(time.perf_counter() - start, 3) if config.log_wallclock else None,
                "iterations": agent.iterations, "critic_updates": agent.critic_updates,
                "actor_updates": agent.actor_updates, "target_updates": agent.target_updates,
                "buffer_size": len(agent.buffer),
            }
            result.log.append(row)
        evaluated = eval_episodes if eval_episodes else episodes[: min(5, len(episodes))]
        traces = rollout_many(agent.policy(), evaluated)
        for tr in traces:
            if tr.beta is not None:
                check_attention(tr.beta)
        result.log[-1]["eval_rmspe"] = pooled_rmspe(traces)
        log.info("epoch %d: eval RMSPE %.3f%%, critic loss %s", epoch, result.log[-1]["eval_rmspe"], l1)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            agent.save(Path(checkpoint_dir) / f"epoch{epoch:03d}.bin")
    return result


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
