"""Train a small ATD3 follower on synthetic traffic and look at where it attends.

Uses a shortened schedule so it finishes in about a minute; pass ``--full`` for
the desk profile used by the acceptance suite (several minutes).

    python demos/train_and_attend.py [--full]
"""
import sys

import numpy as np

from atd3.agent import DESK_PROFILE, TrainConfig, train
from atd3.baselines import IdmParams, IdmPolicy
from atd3.data import split, synthesize
from atd3.evaluation import attention_summary, compare, rollout_many

episodes = synthesize(50, seed=0)
sp = split(episodes, 40, seed=0)
if "--full" in sys.argv:
    cfg = TrainConfig(seed=0, **DESK_PROFILE)
else:
    cfg = TrainConfig(seed=0, epochs=10, cycles=20, updates_per_cycle=2, hidden=32)
print(f"training {cfg.mode} on {len(sp.train)} episodes, {cfg.epochs} epochs x {cfg.cycles} cycles")
res = train(cfg, sp.train, sp.test)
for row in res.log:
    if row["eval_rmspe"] is not None:
        print(f"  epoch {row['epoch']:3d}: held-out RMSPE {row['eval_rmspe']:7.2f}%")

rows = compare([IdmPolicy(IdmParams()), res.agent.policy()], sp.test)
for row in rows:
    print(f"{row.name:>6}: {row.rmspe:.2f}% pooled RMSPE, {len(row.failed)} collisions")

brake = synthesize(5, {"brake": 1.0}, seed=99)
summary = attention_summary(rollout_many(res.agent.policy(), brake))
print("mean attention mass on the newest k steps:",
      {f"r{k}": round(v, 3) for k, v in summary.mean_recency.items()})
for e in summary.episodes:
    print(f"  {e.episode_id}: r3 inside brake windows {e.r3_inside:.3f}, outside {e.r3_outside:.3f}")
print("attention weights at the first brake step of the first episode:")
first = summary.episodes[0]
if first.events:
    print(np.round(first.beta[first.events[0][0]], 3))
