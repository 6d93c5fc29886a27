"""Intelligent Driver Model and its genetic-algorithm calibration."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .env import A_MAX, WINDOW, FollowEpisode, kinematic_update

log = logging.getLogger(__name__)

PARAM_NAMES = ("v0", "t_headway", "a_max", "b", "s0")
BOUNDS = np.array([
    [1.0, 42.0],   # v0, m/s
    [0.1, 5.0],    # t_headway, s
    [0.1, 6.0],    # a_max, m/s^2
    [0.1, 6.0],    # b, m/s^2
    [0.1, 10.0],   # s0, m
])
COLLISION_FITNESS_PENALTY = 100.0


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0
    t_headway: float = 1.5
    a_max: float = 1.5
    b: float = 2.0
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for name in PARAM_NAMES + ("delta",):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES])

    @classmethod
    def from_array(cls, arr, delta: float = 4.0) -> "IdmParams":
        return cls(*map(float, arr), delta=delta)

    def in_bounds(self) -> bool:
        a = self.as_array()
        return bool(np.all((a >= BOUNDS[:, 0]) & (a <= BOUNDS[:, 1])))


def _idm(p: np.ndarray, v, dv, gap, delta: float = 4.0):
    v0, th, am, b, s0 = (p[..., i] for i in range(5))
    s_star = s0 + v * th - v * dv / (2.0 * np.sqrt(am * b))
    s_star = np.maximum(s_star, s0)
    return am * (1.0 - (v / v0) ** delta - (s_star / gap) ** 2)


def idm_accel(params: IdmParams | np.ndarray, obs) -> np.ndarray | float:
    """IDM acceleration for observation(s) ``(v_f, dv, gap)``.

    ``dv`` is lead minus follower speed, so the approach rate in the
    desired-gap term is ``-dv``.  ``params`` is an :class:`IdmParams` or an
    array whose last axis holds ``(v0, t_headway, a_max, b, s0)``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    v, dv, gap = obs[..., 0], obs[..., 1], obs[..., 2]
    if np.any(gap <= 0):
        raise ValueError("IDM needs a positive gap")
    if isinstance(params, IdmParams):
        p, delta = params.as_array(), params.delta
    else:
        p, delta = np.asarray(params, dtype=np.float64), 4.0
    a = _idm(p, v, dv, gap, delta)
    return float(a) if np.ndim(a) == 0 else a


class IdmPolicy:
    """Closed-loop IDM driver reacting to the newest observation in the window."""

    name = "IDM"

    def __init__(self, params: IdmParams):
        self.params = params

    def __call__(self, windows, t, episodes):
        obs = windows[:, -1, :]
        a = idm_accel(self.params, obs)
        return np.clip(np.atleast_1d(a), -A_MAX, A_MAX), None


def simulate_population(pop: np.ndarray, episodes: Sequence[FollowEpisode]):
    """Closed-loop IDM rollouts of every individual on every episode.

    Returns ``(sum_sq_err, sum_sq_obs, collided)`` with per-individual totals
    pooled over all episodes.  Simulation starts at the last step of the
    initial window, exactly like :func:`atd3.evaluation.rollout`.
    """
    pop = np.atleast_2d(pop)
    n_pop = pop.shape[0]
    sse = np.zeros(n_pop)
    sso = 0.0
    collided = np.zeros(n_pop, dtype=bool)
    for ep in episodes:
        obs = np.repeat(ep.observations()[WINDOW - 1][None, :], n_pop, axis=0)
        alive = np.ones(n_pop, dtype=bool)
        for t in range(WINDOW - 1, len(ep) - 1):
            gap = np.maximum(obs[:, 2], 1e-3)
            a = np.clip(_idm(pop, obs[:, 0], obs[:, 1], gap), -A_MAX, A_MAX)
            obs = kinematic_update(obs, a, ep.lead_speed[t + 1], ep.dt)
            alive &= obs[:, 2] > 0
            v_obs = ep.fol_speed[t + 1]
            sse += (obs[:, 0] - v_obs) ** 2
            sso += v_obs * v_obs
        collided |= ~alive
    return sse, sso, collided


def fitness(pop: np.ndarray, episodes: Sequence[FollowEpisode]) -> np.ndarray:
    """Pooled speed RMSPE in percent, plus the collision penalty."""
    sse, sso, collided = simulate_population(pop, episodes)
    return 100.0 * np.sqrt(sse / sso) + COLLISION_FITNESS_PENALTY * collided


@dataclass
class GaConfig:
    population: int = 50
    generations: int = 100
    crossover_rate: float = 0.9
    mutation_rate: float = 0.2
    mutation_scale: float = 0.1
    elitism: int = 2
    tournament: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.elitism <= self.population:
            raise ValueError("elitism must lie in [0, population]")


@dataclass
class CalibrationResult:
    params: IdmParams
    rmspe: float
    history: list[tuple[int, float, float]] = field(default_factory=list)  # generation, best, mean
    trajectory: list[np.ndarray] = field(default_factory=list)  # best individual per generation

    def to_json(self) -> dict:
        d = asdict(self.params)
        d["rmspe"] = self.rmspe
        return d


def calibrate_ga(config: GaConfig, episodes: Sequence[FollowEpisode],
                 initial: np.ndarray | None = None) -> CalibrationResult:
    """Fit IDM parameters by minimising closed-loop speed RMSPE.

    Real-coded GA: tournament selection, uniform crossover, Gaussian mutation
    with standard deviation ``mutation_scale`` times each bound's width, and
    elitism.  ``initial`` overrides the uniformly drawn first population.
    """
    if not episodes:
        raise ValueError("calibration needs at least one episode")
    rng = np.random.default_rng(config.seed)
    lo, hi = BOUNDS[:, 0], BOUNDS[:, 1]
    width = hi - lo
    if initial is None:
        pop = lo + rng.random((config.population, 5)) * width
    else:
        pop = np.array(initial, dtype=np.float64).reshape(config.population, 5)
    result = CalibrationResult(IdmParams(), np.inf)
    fit = fitness(pop, episodes)
    for gen in range(config.generations):
        order = np.argsort(fit, kind="stable")
        best = order[0]
        result.history.append((gen, float(fit[best]), float(fit.mean())))
        result.trajectory.append(pop[best].copy())
        log.debug("generation %d best %.4f mean %.4f", gen, fit[best], fit.mean())
        if gen == config.generations - 1:
            break
        children = [pop[i].copy() for i in order[: config.elitism]]
        while len(children) < config.population:
            p1 = pop[_tournament(rng, fit, config.tournament)]
            p2 = pop[_tournament(rng, fit, config.tournament)]
            if rng.random() < config.crossover_rate:
                mask = rng.random(5) < 0.5
                child = np.where(mask, p1, p2)
            else:
                child = p1.copy()
            mutate = rng.random(5) < config.mutation_rate
            child = child + mutate * rng.normal(0.0, config.mutation_scale, 5) * width
            children.append(np.clip(child, lo, hi))
        new_pop = np.array(children)
        new_fit = np.empty(config.population)
        n_elite = config.elitism
        new_fit[:n_elite] = fit[order[:n_elite]]
        if n_elite < config.population:
            new_fit[n_elite:] = fitness(new_pop[n_elite:], episodes)
        pop, fit = new_pop, new_fit
    best = int(np.argmin(fit))
    result.params = IdmParams.from_array(pop[best])
    result.rmspe = float(fit[best])
    return result


def _tournament(rng: np.random.Generator, fit: np.ndarray, size: int) -> int:
    idx = rng.choice(fit.shape[0], size=min(size, fit.shape[0]), replace=False)
    return int(idx[np.argmin(fit[idx])])
