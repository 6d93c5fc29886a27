"""Closed-loop evaluation: rollouts, RMSPE, attention recency analysis and reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import env
from .env import A_MAX, WINDOW, FollowEpisode

log = logging.getLogger(__name__)

RECENCY_K = (2, 3, 8)


# ---------------------------------------------------------------------------
# policies: callables (windows (B,T,3), t (B,), episodes) -> (accel (B,), beta (B,T) | None)


class ActorPolicy:
    def __init__(self, actor, name: str = "ATD3"):
        self.actor = actor
        self.name = name

    def __call__(self, windows, t, episodes):
        a, beta = self.actor(windows)
        return a * A_MAX, beta


class ReplayPolicy:
    """Replays each episode's recorded accelerations."""

    name = "replay"

    def __call__(self, windows, t, episodes):
        return np.array([ep.accelerations()[ti] for ep, ti in zip(episodes, t)]), None


class ConstantPolicy:
    def __init__(self, accel: float = 0.0, name: str = "constant"):
        self.accel = accel
        self.name = name

    def __call__(self, windows, t, episodes):
        return np.full(len(episodes), self.accel), None


@dataclass
class RolloutTrace:
    episode_id: str
    v_sim: np.ndarray
    v_obs: np.ndarray
    gap_sim: np.ndarray
    gap_obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    windows: np.ndarray           # state seen at each decision, (steps, T, 3)
    beta: np.ndarray | None       # (steps, T) or None
    cause: str | None

    def __len__(self) -> int:
        return self.v_sim.shape[0]

    @property
    def failed(self) -> bool:
        return self.cause == "collision"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "v_sim", "v_obs", "gap_sim", "gap_obs", "action", "reward"])
            for i in range(len(self)):
                w.writerow([i + WINDOW] + [repr(float(x[i])) for x in
                            (self.v_sim, self.v_obs, self.gap_sim, self.gap_obs, self.action, self.reward)])


def rollout_many(policy, episodes: Sequence[FollowEpisode]) -> list[RolloutTrace]:
    """Deterministic closed-loop simulation of every episode, stepped in lockstep.

    Simulation starts from the recorded first ``WINDOW`` observations; the lead
    vehicle follows its record.  A collision truncates that episode's trace.
    """
    n = len(episodes)
    for ep in episodes:
        if len(ep) < WINDOW + 1:
            raise ValueError(f"episode {ep.episode_id!r} is too short to roll out")
    states = [env.reset(ep) for ep in episodes]
    buf = {k: [[] for _ in range(n)] for k in ("v", "gap", "a", "r", "w", "beta")}
    causes: list[str | None] = [None] * n
    active = list(range(n))
    while active:
        windows = np.stack([states[i].obs for i in active])
        t = np.array([states[i].t for i in active])
        accel, beta = policy(windows, t, [episodes[i] for i in active])
        accel = np.clip(np.asarray(accel, dtype=np.float64).reshape(-1), -A_MAX, A_MAX)
        still = []
        for k, i in enumerate(active):
            out = env.step(states[i], float(accel[k]), episodes[i])
            new = out.state.obs[-1]
            buf["v"][i].append(new[0])
            buf["gap"][i].append(new[2])
            buf["a"][i].append(accel[k])
            buf["r"][i].append(out.reward)
            buf["w"][i].append(states[i].obs)
            if beta is not None:
                buf["beta"][i].append(beta[k])
            states[i] = out.state
            if out.terminal:
                causes[i] = out.cause
            else:
                still.append(i)
        active = still
    traces = []
    for i, ep in enumerate(episodes):
        m = len(buf["v"][i])
        sl = slice(WINDOW, WINDOW + m)
        traces.append(RolloutTrace(
            ep.episode_id, np.array(buf["v"][i]), ep.fol_speed[sl].copy(), np.array(buf["gap"][i]),
            ep.gap[sl].copy(), np.array(buf["a"][i]), np.array(buf["r"][i]), np.array(buf["w"][i]),
            np.array(buf["beta"][i]) if buf["beta"][i] else None, causes[i],
        ))
    return traces


def rollout(policy, episode: FollowEpisode) -> RolloutTrace:
    return rollout_many(policy, [episode])[0]


def rmspe(sim, obs) -> float:
    """Speed RMSPE in percent, ratio-of-sums form."""
    sim = np.asarray(sim, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if sim.shape != obs.shape or sim.size == 0:
        raise ValueError(f"series must be equal, non-empty lengths ({sim.shape} vs {obs.shape})")
    denom = np.sum(obs * obs)
    if denom == 0:
        raise ValueError("observed speeds are all zero")
    return float(100.0 * np.sqrt(np.sum((sim - obs) ** 2) / denom))


def pooled_rmspe(traces: Sequence[RolloutTrace], exclude_failed: bool = False) -> float:
    use = [tr for tr in traces if not (exclude_failed and tr.failed)]
    if not use:
        return float("nan")
    return rmspe(np.concatenate([tr.v_sim for tr in use]), np.concatenate([tr.v_obs for tr in use]))


# ---------------------------------------------------------------------------
# attention analysis


def recency_mass(beta: np.ndarray, k: int) -> np.ndarray:
    """Sum of the newest ``k`` weights per row (columns are oldest-first)."""
    return np.asarray(beta)[:, -k:].sum(axis=1)


def brake_mask(windows: np.ndarray, threshold: float = 1.5) -> np.ndarray:
    """Steps where relative speed fell by more than ``threshold`` within the window (~1 s)."""
    dv = windows[:, :, 1]
    return dv[:, -1] - dv.max(axis=1) < -threshold


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


@dataclass
class EpisodeAttention:
    episode_id: str
    beta: np.ndarray
    recency: dict[int, np.ndarray]
    events: list[tuple[int, int]]  # half-open step ranges, trace-relative
    r3_inside: float
    r3_outside: float

    @property
    def shifted(self) -> bool:
        return bool(np.isfinite(self.r3_inside) and self.r3_inside > self.r3_outside)


@dataclass
class AttentionSummary:
    episodes: list[EpisodeAttention] = field(default_factory=list)
    threshold: float = 1.5

    @property
    def mean_recency(self) -> dict[int, float]:
        return {k: float(np.mean(np.concatenate([e.recency[k] for e in self.episodes]))) for k in RECENCY_K}

    def to_json(self) -> dict:
        return {
            "threshold_mps": self.threshold,
            "mean_recency": {f"r{k}": v for k, v in self.mean_recency.items()},
            "episodes": [
                {
                    "episode_id": e.episode_id,
                    "events": [{"start_step": a + WINDOW, "end_step": b + WINDOW} for a, b in e.events],
                    "r3_inside": None if not np.isfinite(e.r3_inside) else e.r3_inside,
                    "r3_outside": None if not np.isfinite(e.r3_outside) else e.r3_outside,
                    "shifted": e.shifted,
                }
                for e in self.episodes
            ],
        }


def attention_summary(traces: Sequence[RolloutTrace], threshold: float = 1.5) -> AttentionSummary:
    summary = AttentionSummary(threshold=threshold)
    for tr in traces:
        if tr.beta is None:
            raise ValueError(f"trace {tr.episode_id!r} carries no attention weights")
        rec = {k: recency_mass(tr.beta, k) for k in RECENCY_K}
        mask = brake_mask(tr.windows, threshold)
        r3 = rec[3]
        inside = float(r3[mask].mean()) if mask.any() else float("nan")
        outside = float(r3[~mask].mean()) if (~mask).any() else float("nan")
        summary.episodes.append(EpisodeAttention(tr.episode_id, tr.beta, rec, _runs(mask), inside, outside))
    return summary


def write_attention_csv(ep: EpisodeAttention, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"beta_{j + 1}" for j in range(ep.beta.shape[1])] + ["r2", "r3", "r8"])
        for i in range(ep.beta.shape[0]):
            w.writerow([i + WINDOW] + [repr(float(b)) for b in ep.beta[i]]
                       + [repr(float(ep.recency[k][i])) for k in RECENCY_K])


# ---------------------------------------------------------------------------
# comparison table


@dataclass
class ComparisonRow:
    name: str
    rmspe: float
    per_episode: dict[str, float]
    failed: list[str]


def compare(policies: Sequence, episodes: Sequence[FollowEpisode]) -> list[ComparisonRow]:
    """Pooled RMSPE per policy; episodes that end in collision are excluded and flagged."""
    if not policies or not episodes:
        raise ValueError("compare needs at least one policy and one episode")
    rows = []
    for pol in policies:
        traces = rollout_many(pol, episodes)
        failed = [tr.episode_id for tr in traces if tr.failed]
        if failed:
            log.warning("%s collided on %d episode(s): %s", pol.name, len(failed), failed)
        per = {tr.episode_id: rmspe(tr.v_sim, tr.v_obs) for tr in traces}
        rows.append(ComparisonRow(pol.name, pooled_rmspe(traces, exclude_failed=True), per, failed))
    return rows


def write_table(rows: Sequence[ComparisonRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "rmspe_pct"])
        for row in rows:
            w.writerow([row.name, f"{row.rmspe:.6f}"])


def format_table(rows: Sequence[ComparisonRow]) -> str:
    lines = ["NO.\tMethod\tRMSPE (%)"]
    for i, row in enumerate(rows, 1):
        flag = f"\t({len(row.failed)} collided)" if row.failed else ""
        lines.append(f"{i}\t{row.name}\t{row.rmspe:.2f}{flag}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# figure data


def svg_lines(series: dict[str, np.ndarray], path, title: str = "", width: int = 720, height: int = 300) -> None:
    """Minimal self-contained SVG line chart."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    pad = 40
    ys = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    lo, hi = float(ys.min()), float(ys.max())
    hi = hi if hi > lo else lo + 1.0
    n = max(len(v) for v in series.values())
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>',
             f'<text x="4" y="{pad}" font-size="10">{hi:.2f}</text>',
             f'<text x="4" y="{height - pad}" font-size="10">{lo:.2f}</text>']
    for c, (name, v) in enumerate(series.items()):
        v = np.asarray(v, dtype=float)
        xs = pad + np.arange(len(v)) * (width - 2 * pad) / max(n - 1, 1)
        yy = height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, yy))
        color = colors[c % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{width - 150}" y="{20 + 14 * c}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def svg_heatmap(beta: np.ndarray, path, title: str = "attention weights") -> None:
    """Steps on the x axis, window position (oldest at top) on the y axis."""
    steps, T = beta.shape
    cw, ch = max(1.0, 720 / steps), 18
    vmax = float(beta.max()) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cw * steps + 60:.0f}" height="{ch * T + 40}">',
             f'<text x="4" y="14" font-size="12">{title}</text>']
    for j in range(T):
        for i in range(steps):
            shade = int(255 * (1 - beta[i, j] / vmax))
            parts.append(f'<rect x="{50 + i * cw:.2f}" y="{24 + j * ch}" width="{cw:.2f}" height="{ch}" '
                         f'fill="rgb({shade},{shade},255)"/>')
        parts.append(f'<text x="4" y="{24 + j * ch + 13}" font-size="10">t-{T - 1 - j}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def write_events(summary: AttentionSummary, path) -> None:
    Path(path).write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True))
