import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from atd3.baselines import (
    BOUNDS, GaConfig, IdmParams, IdmPolicy, calibrate_ga, fitness, idm_accel, simulate_population,
)
from atd3.data import synthesize
from atd3.env import FollowEpisode
from atd3.evaluation import pooled_rmspe, rollout_many

REF = IdmParams(v0=30.0, t_headway=1.5, a_max=1.5, b=2.0, s0=2.0)


def test_equilibrium_at_desired_speed():
    assert idm_accel(REF, [30.0, 0.0, 1e9]) == pytest.approx(0.0, abs=1e-9)


def test_free_road_start():
    assert idm_accel(REF, [0.0, 0.0, 1e9]) == pytest.approx(1.5, abs=1e-9)


def test_worked_example():
    # s* = s0 + v*T = 2 + 20*1.5 = 32, so the interaction term is exactly 1
    expected = 1.5 * (1.0 - (20.0 / 30.0) ** 4 - (32.0 / 32.0) ** 2)
    assert idm_accel(REF, [20.0, 0.0, 32.0]) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(-0.2963, abs=1e-4)


def test_approach_term_uses_closing_speed():
    # follower faster than leader (dv < 0) raises the desired gap and brakes harder
    closing = idm_accel(REF, [20.0, -2.0, 40.0])
    opening = idm_accel(REF, [20.0, 2.0, 40.0])
    assert closing < idm_accel(REF, [20.0, 0.0, 40.0]) < opening


def test_desired_gap_floored_at_jam_distance():
    # large opening speed would push s* below s0 without the floor
    a = idm_accel(REF, [1.0, 20.0, 4.0])
    assert a == pytest.approx(1.5 * (1 - (1 / 30) ** 4 - (2.0 / 4.0) ** 2), rel=1e-12)


def test_non_positive_gap_rejected():
    with pytest.raises(ValueError):
        idm_accel(REF, [10.0, 0.0, 0.0])


def test_params_validation():
    with pytest.raises(ValueError):
        IdmParams(v0=0.0)
    assert REF.in_bounds()
    assert not IdmParams(v0=50.0).in_bounds()


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5), st.floats(0, 1), st.floats(-10, 10), st.floats(0.5, 120))
def test_acceleration_envelope(u, v_frac, dv, gap):
    # bounded for speeds up to the desired speed and desired gaps up to 2.5x the actual gap
    p = BOUNDS[:, 0] + np.array(u) * (BOUNDS[:, 1] - BOUNDS[:, 0])
    v = v_frac * p[0]
    s_star = max(p[4] + v * p[1] - v * dv / (2 * np.sqrt(p[2] * p[3])), p[4])
    assume(s_star / gap <= 2.5)
    a = idm_accel(p, [v, dv, gap])
    assert np.isfinite(a)
    assert a <= p[2] + 1e-12
    assert abs(a) <= 50


def test_policy_clips_to_bounds():
    pol = IdmPolicy(REF)
    a, beta = pol(np.tile([20.0, -10.0, 3.0], (2, 10, 1)), 9, None)
    assert beta is None and np.all(a == -3.0)


@pytest.fixture(scope="module")
def episodes():
    return synthesize(2, {"smooth": 1, "stopgo": 1}, seed=4, reference=REF, jitter=0.0)


def test_generating_parameters_fit_their_episodes(episodes):
    assert fitness(REF.as_array()[None], episodes)[0] < 1e-6
    traces = rollout_many(IdmPolicy(REF), episodes)
    assert pooled_rmspe(traces) < 1e-6


def test_identical_population_without_mutation_is_constant(episodes):
    cfg = GaConfig(population=6, generations=5, mutation_rate=0.0, seed=1)
    init = np.tile([25.0, 1.2, 1.0, 1.5, 3.0], (6, 1))
    res = calibrate_ga(cfg, episodes, initial=init)
    bests = [h[1] for h in res.history]
    means = [h[2] for h in res.history]
    assert len(set(bests)) == 1 and len(set(means)) == 1


def test_elitism_never_degrades_best(episodes):
    res = calibrate_ga(GaConfig(population=8, generations=6, elitism=8, seed=2), episodes)
    bests = [h[1] for h in res.history]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))
    res = calibrate_ga(GaConfig(population=8, generations=6, elitism=1, seed=3), episodes)
    bests = [h[1] for h in res.history]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))


def test_calibration_is_reproducible(episodes):
    a = calibrate_ga(GaConfig(population=8, generations=4, seed=9), episodes)
    b = calibrate_ga(GaConfig(population=8, generations=4, seed=9), episodes)
    assert a.history == b.history
    assert all(np.array_equal(x, y) for x, y in zip(a.trajectory, b.trajectory))
    assert a.params == b.params


def test_collisions_are_penalised():
    # leader brakes at 8 m/s^2, beyond the 3 m/s^2 the follower is allowed
    n = 200
    lead = np.maximum(20.0 - 0.8 * np.maximum(np.arange(n) - 20, 0), 0.0)
    lead_pos = 12.0 + np.concatenate([[0.0], np.cumsum(0.5 * (lead[1:] + lead[:-1]) * 0.1)])
    fol = np.full(n, 20.0)
    fol_pos = np.arange(n) * 2.0
    ep = FollowEpisode(lead, lead_pos, fol, fol_pos)
    f = fitness(REF.as_array()[None], [ep])[0]
    sse, sso, collided = simulate_population(REF.as_array()[None], [ep])
    assert collided[0]
    assert f == pytest.approx(100.0 * np.sqrt(sse[0] / sso) + 100.0)


def test_result_json():
    res = calibrate_ga(GaConfig(population=4, generations=2), synthesize(1, {"smooth": 1}, seed=0))
    d = res.to_json()
    assert set(d) == {"v0", "t_headway", "a_max", "b", "s0", "delta", "rmspe"}


def test_config_validation():
    with pytest.raises(ValueError):
        GaConfig(population=1)
    with pytest.raises(ValueError):
        GaConfig(mutation_rate=1.5)
