"""Command-line entry point: ``python -m atd3 <subcommand> [flags]``.

Every run writes into its own directory together with a ``manifest.json``
holding the resolved configuration, seed, source revision and input digests.
Passing that manifest back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data
from .agent import TrainConfig, TrainingAborted, load_actor, train
from .baselines import GaConfig, IdmParams, IdmPolicy, calibrate_ga
from .evaluation import (ActorPolicy, attention_summary, compare, format_table, rollout_many, svg_heatmap,
                         svg_lines, write_attention_csv, write_events, write_table)
from .numerics import NonFiniteError

log = logging.getLogger("atd3")

SUBCOMMANDS = ("ingest", "synth", "calibrate-idm", "train", "eval", "attention", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    data: str | None = None          # raw CSV (ingest) or episode index / directory
    test_data: str | None = None
    units: str | None = None
    train_count: int | None = None
    mode: str = "atd3"
    seed: int = 0
    out: str | None = None
    episodes: int = 50
    mix: dict = field(default_factory=lambda: {"smooth": 1 / 3, "stopgo": 1 / 3, "brake": 1 / 3})
    train: dict = field(default_factory=dict)   # TrainConfig overrides
    ga: dict = field(default_factory=dict)      # GaConfig overrides
    checkpoint: str | None = None
    idm: str | None = None                      # calibrated IDM JSON for compare
    policies: list = field(default_factory=list)  # compare: [{"name", "checkpoint"} | {"name", "idm"}]
    threshold: float = 1.5
    svg: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**d)
        try:
            TrainConfig.from_dict({**cfg.train, "mode": cfg.mode, "seed": cfg.seed})
            GaConfig(**{**cfg.ga, "seed": cfg.seed})
            data.canonical_mix(cfg.mix)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "mode": self.mode, "seed": self.seed})

    def ga_config(self) -> GaConfig:
        return GaConfig(**{**self.ga, "seed": self.seed})

    def digest(self) -> str:
        d = asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atd3", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="RunConfig JSON, or a manifest.json from an earlier run")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (default: runs/<command>-<config hash>-s<seed>)")
    p.add_argument("--episodes", type=int, help="number of synthetic episodes")
    p.add_argument("--mix", help="scenario mix, e.g. smooth=0.5,stopgo=0.3,brake=0.2")
    p.add_argument("--mode", choices=("atd3", "ddpg", "ddpg-rt"))
    p.add_argument("--checkpoint", help="parameter file written by train")
    p.add_argument("--data", help="input CSV (ingest) or episode index / directory")
    p.add_argument("--test-data", dest="test_data", help="held-out episode index / directory")
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"missing input file: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if "config" in raw and "command" in raw:  # a run manifest
            raw = dict(raw["config"])
            raw.pop("out", None)
    raw["command"] = args.command
    for key in ("seed", "out", "episodes", "mode", "checkpoint", "data", "test_data", "train_count"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.mix is not None:
        try:
            raw["mix"] = data.parse_mix(args.mix)
        except ValueError as exc:
            raise ConfigError(f"mix: {exc}") from None
    return RunConfig.from_dict(raw)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _require(*paths):
    missing = [str(p) for p in paths if p is None or not Path(p).exists()]
    if missing:
        raise DataError("missing input file(s): " + ", ".join(missing))


def _load_episodes(path):
    _require(path)
    try:
        return data.read_episodes(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_split(out: Path, episodes, train_count, seed, extra=None):
    if train_count is None:
        data.write_episodes(episodes, out / "episodes", extra)
        return
    sp = data.split(episodes, train_count, seed)
    data.write_episodes(sp.train, out / "train", extra)
    data.write_episodes(sp.test, out / "test", extra)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg: RunConfig, out: Path) -> None:
    _require(cfg.data)
    report = data.ExtractionReport()
    try:
        tracks = data.parse_trajectories(cfg.data, cfg.units)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None
    episodes = data.extract_follow_pairs(tracks, data.FilterCriteria(), report)
    extra = {"rejections": dict(report.rejections), "source_vehicles": len(tracks)}
    n_vehicles = len({ep.vehicle_id for ep in episodes})
    train_count = cfg.train_count
    if train_count is None and n_vehicles:
        train_count = int(round(n_vehicles * 450 / 600))
    _write_split(out, episodes, train_count, cfg.seed, extra)
    print(f"{len(episodes)} episodes from {n_vehicles} vehicles; rejections {dict(report.rejections)}")


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    episodes = data.synthesize(cfg.episodes, cfg.mix, cfg.seed)
    counts = data.apportion(cfg.episodes, data.canonical_mix(cfg.mix))
    _write_split(out, episodes, cfg.train_count, cfg.seed, {"mix": cfg.mix, "counts": counts})
    print(f"{len(episodes)} synthetic episodes: {counts}")


def cmd_calibrate(cfg: RunConfig, out: Path) -> None:
    episodes = _load_episodes(cfg.data)
    res = calibrate_ga(cfg.ga_config(), episodes)
    (out / "idm.json").write_text(json.dumps(res.to_json(), indent=2, sort_keys=True))
    with open(out / "fitness_history.csv", "w") as fh:
        fh.write("generation,best,mean\n")
        for g, best, mean in res.history:
            fh.write(f"{g},{best!r},{mean!r}\n")
    print(f"calibrated IDM {res.params} with RMSPE {res.rmspe:.3f}%")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    episodes = _load_episodes(cfg.data)
    test = _load_episodes(cfg.test_data) if cfg.test_data else None
    tc = cfg.train_config()
    res = train(tc, episodes, test, checkpoint_dir=out / "checkpoints")
    res.write_log(out / "training_log.csv")
    res.agent.save(out / "final.bin")
    final = [r["eval_rmspe"] for r in res.log if r["eval_rmspe"] is not None][-1]
    print(f"trained {tc.mode} for {tc.epochs} epochs; last evaluation RMSPE {final:.3f}%")


def _policy_from_checkpoint(path, name=None):
    _require(path)
    actor = load_actor(path)
    return ActorPolicy(actor, name or ("ATD3" if actor.kind == "attention" else "DDPG"))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    episodes = _load_episodes(cfg.test_data or cfg.data)
    pol = _policy_from_checkpoint(cfg.checkpoint, cfg.mode.upper())
    traces = rollout_many(pol, episodes)
    for tr in traces:
        tr.to_csv(out / f"rollout_{tr.episode_id}.csv")
        if cfg.svg:
            svg_lines({"simulated": tr.v_sim, "observed": tr.v_obs}, out / f"rollout_{tr.episode_id}.svg",
                      f"speed, {tr.episode_id}")
    rows = compare([pol], episodes)
    write_table(rows, out / "table1.csv")
    print(format_table(rows))


def cmd_attention(cfg: RunConfig, out: Path) -> None:
    episodes = _load_episodes(cfg.test_data or cfg.data)
    pol = _policy_from_checkpoint(cfg.checkpoint)
    traces = rollout_many(pol, episodes)
    try:
        summary = attention_summary(traces, cfg.threshold)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for ep in summary.episodes:
        write_attention_csv(ep, out / f"attention_{ep.episode_id}.csv")
        if cfg.svg:
            svg_heatmap(ep.beta, out / f"attention_{ep.episode_id}.svg", f"attention, {ep.episode_id}")
    write_events(summary, out / "events.json")
    shifted = sum(e.shifted for e in summary.episodes)
    print(f"mean recency {summary.mean_recency}; r3 higher inside brake windows in "
          f"{shifted}/{len(summary.episodes)} episodes")


def cmd_compare(cfg: RunConfig, out: Path) -> None:
    episodes = _load_episodes(cfg.test_data or cfg.data)
    specs = list(cfg.policies)
    if cfg.idm:
        specs.insert(0, {"name": "IDM", "idm": cfg.idm})
    if cfg.checkpoint:
        specs.append({"name": cfg.mode.upper(), "checkpoint": cfg.checkpoint})
    if not specs:
        raise ConfigError("compare needs policies (config 'policies', 'idm' or --checkpoint)")
    policies = []
    for spec in specs:
        if "idm" in spec:
            _require(spec["idm"])
            d = json.loads(Path(spec["idm"]).read_text())
            d.pop("rmspe", None)
            pol = IdmPolicy(IdmParams(**d))
            pol.name = spec.get("name", "IDM")
        elif "checkpoint" in spec:
            pol = _policy_from_checkpoint(spec["checkpoint"], spec.get("name"))
        else:
            raise ConfigError(f"policy entry needs 'idm' or 'checkpoint': {spec}")
        policies.append(pol)
    rows = compare(policies, episodes)
    write_table(rows, out / "table1.csv")
    with open(out / "per_episode.csv", "w") as fh:
        fh.write("policy,episode,rmspe_pct,collided\n")
        for row in rows:
            for ep_id, val in row.per_episode.items():
                fh.write(f"{row.name},{ep_id},{val:.6f},{int(ep_id in row.failed)}\n")
    print(format_table(rows))


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "calibrate-idm": cmd_calibrate, "train": cmd_train,
    "eval": cmd_eval, "attention": cmd_attention, "compare": cmd_compare,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out) if cfg.out else Path("runs") / f"{cfg.command}-{cfg.digest()}-s{cfg.seed}"
        inputs = [cfg.data, cfg.test_data, cfg.checkpoint, cfg.idm] + [
            p.get("checkpoint") or p.get("idm") for p in cfg.policies]
        _require(*[p for p in inputs if p is not None])
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": cfg.command,
            "config": asdict(cfg),
            "seed": cfg.seed,
            "git_describe": _git_describe(),
            "inputs": _input_digests(inputs),
            "numpy": np.__version__,
        }
        COMMANDS[cfg.command](cfg, out)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())
