"""Generate traces from a known IDM driver, then let the GA find its parameters again.

    python demos/idm_calibration.py
"""
from atd3.baselines import GaConfig, IdmParams, IdmPolicy, calibrate_ga
from atd3.data import synthesize
from atd3.evaluation import pooled_rmspe, rollout_many

truth = IdmParams(v0=28.0, t_headway=1.3, a_max=1.2, b=1.8, s0=2.5)
episodes = synthesize(5, seed=11, reference=truth, jitter=0.0)
print("generating driver:", truth)

res = calibrate_ga(GaConfig(population=30, generations=40, seed=0), episodes)
for gen, best, mean in res.history[::10]:
    print(f"generation {gen:3d}: best fitness {best:8.3f}  mean {mean:8.3f}")
print("recovered:", res.params)
print(f"closed-loop RMSPE on the generating episodes: {pooled_rmspe(rollout_many(IdmPolicy(res.params), episodes)):.3f}%")
