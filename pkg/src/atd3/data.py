"""Trajectory ingestion (NGSIM layout), leader/follower extraction, splitting
and a synthetic generator for desk-scale experiments."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .baselines import IdmParams, _idm
from .env import A_MAX, DT, FollowEpisode, kinematic_update

log = logging.getLogger(__name__)

FT_TO_M = 0.3048
REQUIRED_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Vel", "Lane_ID", "Preceding", "Space_Headway")
LENGTH_COLUMNS = ("Local_X", "Local_Y", "v_Vel", "Space_Headway")
EPISODE_STEPS = 400
SCENARIOS = ("smooth", "stopgo", "brake")
REFERENCE_IDM = IdmParams(v0=30.0, t_headway=1.5, a_max=1.5, b=2.0, s0=2.0)


@dataclass(frozen=True)
class FilterCriteria:
    max_gap: float = 120.0
    max_lateral: float = 2.5
    min_steps: int = 150
    constant_leader: bool = True
    episode_steps: int = EPISODE_STEPS


@dataclass(frozen=True, eq=False)
class VehicleTrack:
    """Frame-sorted records of one vehicle, lengths in metres."""

    vehicle_id: int
    frame: np.ndarray
    x: np.ndarray  # lateral
    y: np.ndarray  # longitudinal
    speed: np.ndarray
    lane: np.ndarray
    preceding: np.ndarray
    spacing: np.ndarray

    def __len__(self) -> int:
        return self.frame.shape[0]


@dataclass
class DatasetSplit:
    train: list[FollowEpisode]
    test: list[FollowEpisode]

    @property
    def train_ids(self) -> list[int]:
        return sorted({ep.vehicle_id for ep in self.train})

    @property
    def test_ids(self) -> list[int]:
        return sorted({ep.vehicle_id for ep in self.test})


@dataclass
class ExtractionReport:
    rejections: Counter = field(default_factory=Counter)
    spans: int = 0
    episodes: int = 0


def parse_trajectories(source, units: str | dict | None = None) -> dict[int, VehicleTrack]:
    """Read an NGSIM-style CSV into per-vehicle tracks.

    ``units`` is ``"ft"`` or ``"m"`` (or a sidecar dict / JSON path with a
    ``"length_unit"`` key); when omitted, a ``<source>.units.json`` sidecar is
    looked up and feet are assumed if none exists.  Vehicles with gaps in their
    frame sequence are dropped.
    """
    unit = _resolve_unit(source, units)
    df = pd.read_csv(source)
    df.columns = [c.strip() for c in df.columns]
    for col in REQUIRED_COLUMNS:
        if col not in df.columns:
            raise ValueError(f"missing column {col!r}")
    df = df[list(REQUIRED_COLUMNS)].astype({
        "Vehicle_ID": np.int64, "Frame_ID": np.int64, "Lane_ID": np.int64, "Preceding": np.int64,
    })
    if unit == "ft":
        for col in LENGTH_COLUMNS:
            df[col] = df[col].astype(np.float64) * FT_TO_M
    df = df.drop_duplicates(["Vehicle_ID", "Frame_ID"]).sort_values(["Vehicle_ID", "Frame_ID"], kind="stable")
    tracks = {}
    for vid, g in df.groupby("Vehicle_ID", sort=True):
        frames = g["Frame_ID"].to_numpy()
        if len(frames) > 1 and np.any(np.diff(frames) != 1):
            log.info("vehicle %d dropped: non-contiguous frames", vid)
            continue
        tracks[int(vid)] = VehicleTrack(
            int(vid), frames,
            g["Local_X"].to_numpy(np.float64), g["Local_Y"].to_numpy(np.float64),
            g["v_Vel"].to_numpy(np.float64), g["Lane_ID"].to_numpy(),
            g["Preceding"].to_numpy(), g["Space_Headway"].to_numpy(np.float64),
        )
    return tracks


def _resolve_unit(source, units) -> str:
    if units is None:
        sidecar = Path(str(source) + ".units.json") if isinstance(source, (str, Path)) else None
        units = json.loads(sidecar.read_text()) if sidecar is not None and sidecar.exists() else "ft"
    elif isinstance(units, (str, Path)) and str(units).endswith(".json"):
        units = json.loads(Path(units).read_text())
    if isinstance(units, dict):
        units = units.get("length_unit", "ft")
    if units not in ("ft", "m"):
        raise ValueError(f"unknown length unit {units!r}")
    return units


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges where ``mask`` is true."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def extract_follow_pairs(tracks: dict[int, VehicleTrack], criteria: FilterCriteria = FilterCriteria(),
                         report: ExtractionReport | None = None) -> list[FollowEpisode]:
    """Cut leader/follower episodes that satisfy every filter criterion."""
    report = report if report is not None else ExtractionReport()
    episodes = []
    for vid in sorted(tracks):
        fol = tracks[vid]
        n = len(fol)
        lead_ok = np.zeros(n, dtype=bool)
        lead_speed = np.full(n, np.nan)
        lead_x = np.full(n, np.nan)
        lead_y = np.full(n, np.nan)
        for lid in np.unique(fol.preceding):
            if lid <= 0 or lid not in tracks:
                continue
            lead = tracks[lid]
            rows = np.flatnonzero(fol.preceding == lid)
            pos = np.searchsorted(lead.frame, fol.frame[rows])
            pos_c = np.minimum(pos, len(lead) - 1)
            hit = lead.frame[pos_c] == fol.frame[rows]
            rows, pos_c = rows[hit], pos_c[hit]
            lead_ok[rows] = True
            lead_speed[rows] = lead.speed[pos_c]
            lead_x[rows] = lead.x[pos_c]
            lead_y[rows] = lead.y[pos_c]
        report.rejections["no_leader"] += int(np.sum(~lead_ok))
        spacing = np.where(fol.spacing > 0, fol.spacing, lead_y - fol.y)
        with np.errstate(invalid="ignore"):
            gap_ok = (spacing > 0) & (spacing < criteria.max_gap)
            lat_ok = np.abs(lead_x - fol.x) < criteria.max_lateral
        report.rejections["gap"] += int(np.sum(lead_ok & ~gap_ok))
        report.rejections["lateral"] += int(np.sum(lead_ok & gap_ok & ~lat_ok))
        valid = lead_ok & gap_ok & lat_ok
        for a, b in _runs(valid):
            # split further wherever the leader id changes
            cuts = [a] + [i for i in range(a + 1, b) if fol.preceding[i] != fol.preceding[i - 1]] + [b]
            if len(cuts) > 2:
                report.rejections["leader_change"] += len(cuts) - 2
            if not criteria.constant_leader:
                cuts = [a, b]
            for s, e in zip(cuts[:-1], cuts[1:]):
                if e - s < criteria.min_steps:
                    report.rejections["too_short"] += 1
                    continue
                report.spans += 1
                for c0 in range(s, e, criteria.episode_steps):
                    c1 = min(c0 + criteria.episode_steps, e)
                    if c1 - c0 < criteria.min_steps:
                        report.rejections["short_remainder"] += 1
                        continue
                    sl = slice(c0, c1)
                    fol_pos = fol.y[sl]
                    ep = FollowEpisode(
                        lead_speed[sl], fol_pos + spacing[sl], fol.speed[sl], fol_pos,
                        dt=DT, episode_id=f"v{vid}_f{int(fol.frame[c0])}", vehicle_id=int(vid),
                        meta={"leader_id": int(fol.preceding[c0]), "first_frame": int(fol.frame[c0])},
                    )
                    episodes.append(ep)
                    report.episodes += 1
    log.info("extracted %d episodes; rejections %s", len(episodes), dict(report.rejections))
    return episodes


def check_episode(ep: FollowEpisode, criteria: FilterCriteria = FilterCriteria(),
                  lateral_offset: np.ndarray | None = None) -> list[str]:
    """Independent post-hoc validation; returns the list of violated criteria."""
    problems = []
    if len(ep) < criteria.min_steps:
        problems.append("too_short")
    if len(ep) > criteria.episode_steps:
        problems.append("too_long")
    gap = ep.lead_pos - ep.fol_pos
    if np.any(gap <= 0) or np.any(gap >= criteria.max_gap):
        problems.append("gap")
    if lateral_offset is not None and np.any(np.abs(lateral_offset) >= criteria.max_lateral):
        problems.append("lateral")
    if criteria.constant_leader and "leader_ids" in ep.meta and len(set(ep.meta["leader_ids"])) > 1:
        problems.append("leader_change")
    if not np.all(np.isfinite(ep.observations())):
        problems.append("non_finite")
    return problems


def split(episodes: Sequence[FollowEpisode], train_count: int, seed: int = 0) -> DatasetSplit:
    """Seeded split by follower vehicle id; ``train_count`` counts vehicles."""
    ids = sorted({ep.vehicle_id for ep in episodes})
    if train_count > len(ids):
        raise ValueError(f"asked for {train_count} training vehicles, only {len(ids)} available")
    if train_count == len(ids):
        log.warning("split leaves the test side empty")
    rng = np.random.default_rng(seed)
    chosen = set(np.asarray(ids)[rng.permutation(len(ids))[:train_count]].tolist())
    train = [ep for ep in episodes if ep.vehicle_id in chosen]
    test = [ep for ep in episodes if ep.vehicle_id not in chosen]
    return DatasetSplit(train, test)


# ---------------------------------------------------------------------------
# synthetic data


def apportion(n: int, mix: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` items over the mix weights."""
    total = sum(mix.values())
    if total <= 0 or any(w < 0 for w in mix.values()):
        raise ValueError(f"invalid scenario mix {mix}")
    quotas = {k: n * w / total for k, w in mix.items()}
    counts = {k: int(np.floor(q)) for k, q in quotas.items()}
    left = n - sum(counts.values())
    order = sorted(mix, key=lambda k: (-(quotas[k] - counts[k]), list(mix).index(k)))
    for k in order[:left]:
        counts[k] += 1
    return counts


def canonical_mix(mix: dict[str, float] | None) -> dict[str, float]:
    """Mix in the fixed scenario order, so results never depend on key order."""
    if mix is None:
        return {k: 1 / 3 for k in SCENARIOS}
    unknown = set(mix) - set(SCENARIOS)
    if unknown:
        raise ValueError(f"unknown scenario(s) {sorted(unknown)}; expected {SCENARIOS}")
    return {k: float(mix[k]) for k in SCENARIOS if k in mix}


def parse_mix(text: str) -> dict[str, float]:
    """``"smooth=0.5,stopgo=0.3,brake=0.2"`` -> dict."""
    mix = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        key = key.strip()
        if key not in SCENARIOS:
            raise ValueError(f"unknown scenario {key!r}; expected one of {SCENARIOS}")
        mix[key] = float(val)
    return mix


def _smooth_noise(rng: np.random.Generator, n: int, scale: float, width: int = 40) -> np.ndarray:
    kernel = np.hanning(width)
    kernel /= kernel.sum()
    raw = rng.normal(0.0, 1.0, n + width)
    out = np.convolve(raw, kernel, mode="same")[width // 2: width // 2 + n]
    return scale * out / max(out.std(), 1e-12)


def lead_profile(kind: str, rng: np.random.Generator, n: int = EPISODE_STEPS, dt: float = DT) -> tuple[np.ndarray, dict]:
    """Lead-vehicle speed series for one scenario, plus scenario metadata."""
    t = np.arange(n) * dt
    meta: dict = {"scenario": kind}
    if kind == "smooth":
        base = rng.uniform(10.0, 25.0)
        amp = rng.uniform(0.3, 1.0)
        period = rng.uniform(15.0, 30.0)
        v = base + amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        v = v + _smooth_noise(rng, n, 0.15)
    elif kind == "stopgo":
        low = rng.uniform(2.0, 6.0)
        high = rng.uniform(11.0, 16.0)
        period = rng.uniform(16.0, 26.0)
        phase = rng.uniform(0, 2 * np.pi)
        v = low + (high - low) * 0.5 * (1 + np.cos(2 * np.pi * t / period + phase))
        v = v + _smooth_noise(rng, n, 0.2)
    elif kind == "brake":
        cruise = rng.uniform(12.0, 22.0)
        start = int(rng.integers(100, 300))
        brake_steps = int(round(2.0 / dt))
        acc = _smooth_noise(rng, n, 0.1)
        acc[start:start + brake_steps] = -3.0
        # recover at ~1 m/s^2 after a short pause
        rec0 = start + brake_steps + int(rng.integers(5, 20))
        acc[rec0:rec0 + int(round(6.0 / dt))] += 1.0
        v = cruise + np.concatenate([[0.0], np.cumsum(acc[:-1]) * dt])
        meta["brake_start"] = start
        meta["brake_end"] = start + brake_steps
    else:
        raise ValueError(f"unknown scenario {kind!r}")
    return np.maximum(v, 0.0), meta


def _trapezoid_positions(speed: np.ndarray, x0: float, dt: float) -> np.ndarray:
    inc = 0.5 * (speed[1:] + speed[:-1]) * dt
    return x0 + np.concatenate([[0.0], np.cumsum(inc)])


def equilibrium_gap(p: np.ndarray, v: float) -> float:
    v0, th, _, _, s0 = p
    ratio = min(v / v0, 0.95)
    return (s0 + v * th) / np.sqrt(1.0 - ratio ** 4)


def simulate_follower(p: np.ndarray, lead_speed: np.ndarray, v_init: float, gap_init: float,
                      dt: float = DT) -> tuple[np.ndarray, np.ndarray, bool]:
    """Closed-loop IDM follower; returns ``(speed, gap, collided)``."""
    n = lead_speed.shape[0]
    obs = np.array([v_init, lead_speed[0] - v_init, gap_init])
    speed = np.empty(n)
    gap = np.empty(n)
    speed[0], gap[0] = obs[0], obs[2]
    for t in range(n - 1):
        a = float(np.clip(_idm(p, obs[0], obs[1], obs[2]), -A_MAX, A_MAX))
        obs = kinematic_update(obs, a, lead_speed[t + 1], dt)
        speed[t + 1], gap[t + 1] = obs[0], obs[2]
        if obs[2] <= 0:
            return speed, gap, True
    return speed, gap, False


def synthesize(n_episodes: int, mix: dict[str, float] | None = None, seed: int = 0,
               reference: IdmParams = REFERENCE_IDM, jitter: float = 0.1,
               n_steps: int = EPISODE_STEPS, max_retries: int = 20,
               idm_params: IdmParams | None = None) -> list[FollowEpisode]:
    """Generate synthetic episodes: scripted leader, closed-loop IDM follower.

    Each episode gets its own IDM parameters drawn within ``+-jitter`` of
    ``reference`` (or exactly ``idm_params`` when given).  Positions are the
    trapezoidal integrals of the speeds, so the episode obeys the environment's
    kinematics exactly.
    """
    mix = canonical_mix(mix)
    counts = apportion(n_episodes, mix)
    kinds = [k for k in mix for _ in range(counts[k])]
    episodes = []
    ref = reference.as_array()
    for i, kind in enumerate(kinds):
        for attempt in range(max_retries):
            rng = np.random.default_rng([seed, i, attempt])
            lead_speed, meta = lead_profile(kind, rng, n_steps)
            if idm_params is not None:
                p = idm_params.as_array()
            else:
                p = ref * (1.0 + rng.uniform(-jitter, jitter, 5))
            v_init = max(lead_speed[0] + rng.uniform(-0.5, 0.5), 0.0)
            gap_init = equilibrium_gap(p, v_init) * rng.uniform(0.95, 1.1)
            fol_speed, gap, collided = simulate_follower(p, lead_speed, v_init, gap_init)
            if not collided and gap.max() < FilterCriteria().max_gap:
                break
        else:
            raise RuntimeError(f"synthetic episode {i} ({kind}) collided in {max_retries} attempts")
        fol_pos = _trapezoid_positions(fol_speed, 0.0, DT)
        lead_pos = _trapezoid_positions(lead_speed, gap_init, DT)
        meta.update({"idm": p.tolist(), "attempt": attempt})
        episodes.append(FollowEpisode(
            lead_speed, lead_pos, fol_speed, fol_pos, dt=DT,
            episode_id=f"syn{seed}_{i:04d}_{kind}", vehicle_id=i + 1, meta=meta,
        ))
    return episodes


def write_episodes(episodes: Iterable[FollowEpisode], out_dir, extra: dict | None = None) -> Path:
    """Write one CSV per episode plus ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"episodes": []}
    for ep in episodes:
        name = f"{ep.episode_id}.csv"
        ep.to_csv(out_dir / name)
        index["episodes"].append({"file": name, "episode_id": ep.episode_id, "vehicle_id": ep.vehicle_id,
                                  "steps": len(ep), "meta": ep.meta})
    if extra:
        index.update(extra)
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True))
    return path


def read_episodes(path) -> list[FollowEpisode]:
    """Load episodes from an ``index.json``, its directory, or a single CSV."""
    path = Path(path)
    if path.is_dir():
        path = path / "index.json"
    if path.suffix == ".csv":
        return [FollowEpisode.from_csv(path)]
    index = json.loads(path.read_text())
    out = []
    for item in index["episodes"]:
        ep = FollowEpisode.from_csv(path.parent / item["file"], episode_id=item["episode_id"],
                                    vehicle_id=item["vehicle_id"], meta=item.get("meta", {}))
        out.append(ep)
    return out
