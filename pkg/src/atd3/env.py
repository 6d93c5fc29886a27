"""Car-following environment driven by a recorded lead-vehicle trajectory.

An observation is the triple ``(v_f, dv, gap)``: follower speed, relative
speed ``v_lead - v_f`` and spacing, all in SI units.  A state is the window of
the last :data:`WINDOW` observations, oldest first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

DT = 0.1
WINDOW = 10
A_MAX = 3.0
COLLISION_PENALTY = -10.0
V_FLOOR = 0.1
ERR_FLOOR = 1e-4
MIN_EPISODE_STEPS = 150

CSV_COLUMNS = ("t", "lead_speed", "lead_pos", "fol_speed", "fol_pos")


class Observation(NamedTuple):
    v_f: float
    dv: float
    gap: float


@dataclass(frozen=True, eq=False)
class FollowEpisode:
    """Time-aligned lead/follower record sampled every ``dt`` seconds."""

    lead_speed: np.ndarray
    lead_pos: np.ndarray
    fol_speed: np.ndarray
    fol_pos: np.ndarray
    dt: float = DT
    episode_id: str = ""
    vehicle_id: int = -1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = {}
        for name in ("lead_speed", "lead_pos", "fol_speed", "fol_pos"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        lengths = {a.shape for a in arrays.values()}
        if len(lengths) != 1 or arrays["lead_speed"].ndim != 1:
            raise ValueError(f"episode series must be 1-D and equal length, got {lengths}")

    def __len__(self) -> int:
        return self.lead_speed.shape[0]

    @property
    def gap(self) -> np.ndarray:
        return self.lead_pos - self.fol_pos

    @property
    def dv(self) -> np.ndarray:
        return self.lead_speed - self.fol_speed

    def observations(self) -> np.ndarray:
        """Recorded observations, shape ``(n, 3)``."""
        return np.stack([self.fol_speed, self.dv, self.gap], axis=1)

    def accelerations(self) -> np.ndarray:
        """Forward-difference follower accelerations, length ``n - 1``."""
        return np.diff(self.fol_speed) / self.dt

    def validate(self, min_steps: int = MIN_EPISODE_STEPS) -> None:
        if len(self) < min_steps:
            raise ValueError(f"episode {self.episode_id!r} has {len(self)} steps, need >= {min_steps}")
        if np.any(self.gap <= 0):
            raise ValueError(f"episode {self.episode_id!r} has a non-positive recorded gap")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for i in range(len(self)):
                w.writerow([
                    repr(round(i * self.dt, 10)),
                    repr(float(self.lead_speed[i])),
                    repr(float(self.lead_pos[i])),
                    repr(float(self.fol_speed[i])),
                    repr(float(self.fol_pos[i])),
                ])

    @classmethod
    def from_csv(cls, path, **kwargs) -> "FollowEpisode":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
                raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}, got {header}")
            rows = np.array([[float(x) for x in row] for row in reader], dtype=np.float64).reshape(-1, 5)
        dt = kwargs.pop("dt", float(rows[1, 0] - rows[0, 0]) if len(rows) > 1 else DT)
        kwargs.setdefault("episode_id", Path(path).stem)
        return cls(rows[:, 1], rows[:, 2], rows[:, 3], rows[:, 4], dt=round(dt, 10), **kwargs)


@dataclass(frozen=True, eq=False)
class StateWindow:
    """The last ``WINDOW`` observations (oldest first) and the index of the newest."""

    obs: np.ndarray
    t: int

    def __post_init__(self):
        if self.obs.shape != (WINDOW, 3):
            raise ValueError(f"state window must have shape ({WINDOW}, 3), got {self.obs.shape}")

    @property
    def newest(self) -> Observation:
        return Observation(*map(float, self.obs[-1]))


class StepOutcome(NamedTuple):
    state: StateWindow
    reward: float
    terminal: bool
    cause: str | None  # "end-of-trajectory", "collision" or None


def kinematic_update(obs, action, lead_speed_next, dt: float = DT) -> np.ndarray:
    """Point-mass update of ``(v_f, dv, gap)`` under acceleration ``action``.

    Works elementwise on stacked observations of shape ``(..., 3)``.  Follower
    speed is clamped at zero; the gap integrates relative speed with the
    trapezoid rule.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    obs = np.asarray(obs, dtype=np.float64)
    v, dv, gap = obs[..., 0], obs[..., 1], obs[..., 2]
    v_next = np.maximum(v + np.asarray(action, dtype=np.float64) * dt, 0.0)
    dv_next = np.asarray(lead_speed_next, dtype=np.float64) - v_next
    gap_next = gap + 0.5 * (dv + dv_next) * dt
    return np.stack(np.broadcast_arrays(v_next, dv_next, gap_next), axis=-1)


def reward(v_sim, v_obs):
    """Negated log relative speed error, floored so it stays finite.

    ``-log(max(|v_sim - v_obs| / max(v_obs, V_FLOOR), ERR_FLOOR))``; the
    maximum ``-log(ERR_FLOOR)`` is reached at zero error.
    """
    v_sim = np.asarray(v_sim, dtype=np.float64)
    v_obs = np.asarray(v_obs, dtype=np.float64)
    rel = np.abs(v_sim - v_obs) / np.maximum(v_obs, V_FLOOR)
    r = -np.log(np.maximum(rel, ERR_FLOOR))
    return float(r) if r.ndim == 0 else r


def reset(episode: FollowEpisode) -> StateWindow:
    """Initial window from the first ``WINDOW`` recorded observations."""
    if len(episode) < WINDOW:
        raise ValueError(f"episode has {len(episode)} steps; at least {WINDOW} are needed")
    obs = episode.observations()[:WINDOW].copy()
    return StateWindow(obs, WINDOW - 1)


def is_done(state: StateWindow, episode: FollowEpisode) -> bool:
    return state.t >= len(episode) - 1


def step(state: StateWindow, action: float, episode: FollowEpisode, t: int | None = None) -> StepOutcome:
    """Advance one step from index ``t`` (defaults to ``state.t``) to ``t + 1``."""
    t = state.t if t is None else t
    n = len(episode)
    if not 0 <= t < n - 1:
        raise IndexError(f"step index {t} outside [0, {n - 2}]")
    if abs(action) > A_MAX + 1e-12:
        raise ValueError(f"action {action} outside [-{A_MAX}, {A_MAX}]")
    new = kinematic_update(state.obs[-1], action, episode.lead_speed[t + 1], episode.dt)
    window = np.concatenate([state.obs[1:], new[None, :]], axis=0)
    r = reward(new[0], episode.fol_speed[t + 1])
    cause = None
    if new[2] <= 0:
        r += COLLISION_PENALTY
        cause = "collision"
    elif t + 1 == n - 1:
        cause = "end-of-trajectory"
    return StepOutcome(StateWindow(window, t + 1), float(r), cause is not None, cause)
