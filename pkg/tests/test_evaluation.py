import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atd3.baselines import IdmParams, IdmPolicy
from atd3.data import synthesize
from atd3.evaluation import (
    ActorPolicy, ConstantPolicy, ReplayPolicy, attention_summary, brake_mask, compare, format_table,
    pooled_rmspe, recency_mass, rmspe, rollout, rollout_many, svg_heatmap, svg_lines, write_attention_csv,
    write_events, write_table,
)
from atd3.nets import AttentionActor


@pytest.fixture(scope="module")
def episodes():
    return synthesize(6, seed=21)


@pytest.fixture(scope="module")
def actor():
    return AttentionActor.init(np.random.default_rng(0), hidden=16)


def test_rmspe_examples():
    assert rmspe([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmspe(np.full(7, 11.0), np.full(7, 10.0)) == pytest.approx(10.0, rel=1e-12)
    with pytest.raises(ValueError):
        rmspe([1.0], [0.0])
    with pytest.raises(ValueError):
        rmspe([1.0, 2.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_rmspe_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(1, 30, 50)
    sim = obs + rng.normal(0, 1, 50)
    assert rmspe(c * sim, c * obs) == pytest.approx(rmspe(sim, obs), rel=1e-9)


def test_pooled_is_ratio_of_sums():
    class T:
        failed = False

        def __init__(self, s, o):
            self.v_sim, self.v_obs = np.array(s), np.array(o)

    a, b = T([11.0, 11.0], [10.0, 10.0]), T([2.0], [1.0])
    # (1 + 1 + 1) / (100 + 100 + 1)
    assert pooled_rmspe([a, b]) == pytest.approx(100 * np.sqrt(3 / 201), rel=1e-12)
    assert pooled_rmspe([a, b]) != pytest.approx((rmspe(a.v_sim, a.v_obs) + rmspe(b.v_sim, b.v_obs)) / 2)


def test_replay_policy_reproduces_record(episodes):
    for tr, ep in zip(rollout_many(ReplayPolicy(), episodes), episodes):
        assert len(tr) == len(ep) - 10
        assert np.max(np.abs(tr.v_sim - tr.v_obs)) < 1e-9
        assert np.max(np.abs(tr.gap_sim - tr.gap_obs)) < 1e-9
        assert tr.cause == "end-of-trajectory"
    assert pooled_rmspe(rollout_many(ReplayPolicy(), episodes)) < 1e-8


def test_zero_policy_holds_speed(episodes):
    tr = rollout(ConstantPolicy(0.0), episodes[0])
    assert np.all(tr.v_sim == episodes[0].fol_speed[9])


def test_rollout_structure_and_determinism(episodes, actor):
    pol = ActorPolicy(actor)
    a = rollout_many(pol, episodes)
    b = rollout_many(pol, episodes)
    for tr, tr2 in zip(a, b):
        n = len(tr)
        assert all(len(x) == n for x in (tr.v_obs, tr.gap_sim, tr.gap_obs, tr.action, tr.reward))
        assert tr.windows.shape == (n, 10, 3) and tr.beta.shape == (n, 10)
        assert np.all(np.abs(tr.beta.sum(axis=1) - 1) <= 1e-9)
        assert np.array_equal(tr.v_sim, tr2.v_sim) and np.array_equal(tr.beta, tr2.beta)
    # batch composition only changes BLAS rounding
    single = rollout(pol, episodes[2])
    np.testing.assert_allclose(single.v_sim, a[2].v_sim, rtol=0, atol=1e-8)


def test_collision_truncates_trace(episodes):
    tr = rollout(ConstantPolicy(3.0), episodes[0])
    assert tr.failed and len(tr) < len(episodes[0]) - 10
    assert tr.gap_sim[-1] <= 0


def test_recency_examples():
    uniform = np.full((4, 10), 0.1)
    np.testing.assert_allclose([recency_mass(uniform, k)[0] for k in (2, 3, 8)], [0.2, 0.3, 0.8])
    last = np.zeros((1, 10))
    last[0, -1] = 1.0
    assert [recency_mass(last, k)[0] for k in (2, 3, 8)] == [1.0, 1.0, 1.0]


def test_recency_monotone(episodes, actor):
    summary = attention_summary(rollout_many(ActorPolicy(actor), episodes))
    for e in summary.episodes:
        assert np.all(e.recency[2] <= e.recency[3] + 1e-15)
        assert np.all(e.recency[3] <= e.recency[8] + 1e-15)
        assert np.all(e.recency[8] <= 1 + 1e-12)


def test_brake_detector():
    w = np.zeros((3, 10, 3))
    w[1, -1, 1] = -1.6
    w[2, 3, 1] = 1.0
    w[2, -1, 1] = -0.4
    assert brake_mask(w).tolist() == [False, True, False]
    assert brake_mask(w, threshold=1.0).tolist() == [False, True, True]


class ReplayWithWeights(ReplayPolicy):
    """Recorded accelerations plus weights that favour the newest steps when dv drops."""

    def __call__(self, windows, t, episodes):
        a, _ = super().__call__(windows, t, episodes)
        beta = np.full((len(a), 10), 0.1)
        beta[brake_mask(windows)] = [0.05] * 7 + [0.65 / 3] * 3
        return a, beta


def test_attention_summary_finds_brake_events():
    eps = synthesize(3, {"brake": 1}, seed=5)
    summary = attention_summary(rollout_many(ReplayWithWeights(), eps))
    assert all(e.shifted for e in summary.episodes)
    for e, ep in zip(summary.episodes, eps):
        assert e.events, ep.episode_id
        start = e.events[0][0] + 10
        assert ep.meta["brake_start"] <= start <= ep.meta["brake_end"] + 10
        assert np.isfinite(e.r3_inside) and np.isfinite(e.r3_outside)


def test_attention_summary_needs_weights(episodes):
    with pytest.raises(ValueError):
        attention_summary(rollout_many(ConstantPolicy(0.0), episodes[:1]))


def test_compare_rows(episodes):
    rows = compare([ReplayPolicy(), IdmPolicy(IdmParams()), ConstantPolicy(3.0)], episodes)
    assert rows[0].rmspe < 1e-8
    assert len(rows[2].failed) == len(episodes)
    assert np.isnan(rows[2].rmspe)
    assert set(rows[1].per_episode) == {e.episode_id for e in episodes}
    assert "collided" in format_table(rows)


def test_self_generated_idm_row(episodes):
    ref = synthesize(4, seed=2, jitter=0.0)
    rows = compare([IdmPolicy(IdmParams())], ref)
    assert rows[0].rmspe < 1.0


def test_report_files(tmp_path, episodes, actor):
    rows = compare([ReplayPolicy()], episodes[:2])
    write_table(rows, tmp_path / "table1.csv")
    assert (tmp_path / "table1.csv").read_text().splitlines() == ["policy,rmspe_pct", "replay,0.000000"]
    traces = rollout_many(ActorPolicy(actor), episodes[:2])
    traces[0].to_csv(tmp_path / "rollout.csv")
    header = (tmp_path / "rollout.csv").read_text().splitlines()[0]
    assert header == "step,v_sim,v_obs,gap_sim,gap_obs,action,reward"
    summary = attention_summary(traces)
    write_attention_csv(summary.episodes[0], tmp_path / "att.csv")
    lines = (tmp_path / "att.csv").read_text().splitlines()
    assert lines[0].split(",") == ["step"] + [f"beta_{j}" for j in range(1, 11)] + ["r2", "r3", "r8"]
    assert len(lines) == 1 + len(traces[0])
    write_events(summary, tmp_path / "events.json")
    data = json.loads((tmp_path / "events.json").read_text())
    assert set(data["mean_recency"]) == {"r2", "r3", "r8"}
    svg_lines({"sim": traces[0].v_sim, "obs": traces[0].v_obs}, tmp_path / "a.svg")
    svg_heatmap(traces[0].beta, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_text().startswith("<svg")
    assert (tmp_path / "b.svg").read_text().endswith("</svg>")
