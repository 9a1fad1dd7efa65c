import numpy as np
import pandas as pd
import pytest

from prefdiff.align import AlignConfig
from prefdiff.datasets import collect, fit_norm
from prefdiff.diffusion import DiffusionConfig, DiffusionPlanner, init_denoiser, train_bc
from prefdiff.errors import DivergenceError
from prefdiff.evalharness import (
    EvalConfig,
    ablation_suite,
    disturbance_sweep,
    evaluate,
    read_csv,
    report_from_trajectories,
    reports_frame,
    rollout_episode,
    trace_frame,
    velocity_trace,
    with_weak_strong_gap,
    write_csv,
)
from prefdiff.gaitsim import ACTION_DIM, EnvConstants, ExpertPolicy
from prefdiff.preference import PreferenceConfig, build_index, select_optimal_expert

MICRO = DiffusionConfig(
    horizon=2, diffusion_steps=2, hidden=(4,), embed_dim=2, batch_size=4, sampling_steps=2
)


class NanPolicy:
    """Emits finite actions for a number of calls, then NaN"""

    source = "broken"

    def __init__(self, finite_calls=0):
        self.finite_calls = finite_calls
        self.calls = 0

    def __call__(self, state, rng):
        self.calls += 1
        if self.calls > self.finite_calls:
            return np.full((1, ACTION_DIM), np.nan)
        return np.full((1, ACTION_DIM), 0.2)


class DivergingPolicy:
    source = "diverging"

    def __call__(self, state, rng):
        raise DivergenceError("sampler blew up")


def test_rollout_is_deterministic():
    a = rollout_episode(ExpertPolicy("pacing"), "pacing", 0.8, max_steps=60, seed=3, episode=2)
    b = rollout_episode(ExpertPolicy("pacing"), "pacing", 0.8, max_steps=60, seed=3, episode=2)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    c = rollout_episode(ExpertPolicy("pacing"), "pacing", 0.8, max_steps=60, seed=3, episode=3)
    assert not np.array_equal(a.states, c.states)


def test_rollout_honours_step_budget():
    t = rollout_episode(ExpertPolicy("trotting"), "trotting", 0.5, max_steps=30, seed=0)
    assert len(t) == 30 and t.dones[-1] and not np.any(t.dones[:-1])
    assert not t.fell
    assert t.meta["source"] == "expert" and t.meta["disturbance"] == 0.02


def test_non_finite_policy_output_ends_as_fall():
    t = rollout_episode(NanPolicy(finite_calls=5), "trotting", 0.5, max_steps=50, seed=0)
    assert len(t) == 5 and t.fell and t.dones[-1]
    t = rollout_episode(NanPolicy(), "trotting", 0.5, max_steps=50, seed=0)
    assert len(t) == 0 and t.fell
    t = rollout_episode(DivergingPolicy(), "trotting", 0.5, max_steps=50, seed=0)
    assert len(t) == 0 and t.fell


def test_policy_output_shape_is_checked():
    with pytest.raises(ValueError):
        rollout_episode(lambda s, rng: np.zeros(3), "trotting", 0.5, max_steps=5)


def test_all_falls_give_zero_stability():
    report = evaluate(NanPolicy(), "bounding", 0.5, 4, [0, 1], max_steps=40)
    assert report.stability_pct == [0.0, 0.0] and report.stability_mean == 0
    assert sum(report.fall_histogram) == 8 and report.fall_histogram[0] == 8
    assert np.isnan(report.velocity_mean)
    assert report.planner == "broken"


def test_expert_is_fully_stable():
    report = evaluate(ExpertPolicy("trotting"), "trotting", 0.5, 3, [0, 1], disturbance=0.0)
    assert report.stability_pct == [100.0, 100.0]
    assert sum(report.fall_histogram) == 0
    assert report.velocity_mean == pytest.approx(0.5, abs=0.1)


def test_report_recounts_from_trajectories():
    report = evaluate(ExpertPolicy("pacing"), "pacing", 1.0, 3, [4, 5], max_steps=80)
    again = report_from_trajectories(
        report.trajectories,
        "pacing",
        1.0,
        planner="expert",
        disturbance=report.disturbance,
        max_steps=80,
    )
    assert again == report
    assert list(report.to_frame()["seed"]) == [4, 5]
    assert report.to_dict()["stability_mean"] == report.stability_mean
    with pytest.raises(ValueError):
        trajs = dict(report.trajectories)
        trajs[5] = trajs[5][:2]
        report_from_trajectories(
            trajs, "pacing", 1.0, planner="expert", disturbance=0.02, max_steps=80
        )


def test_evaluation_does_not_depend_on_workers():
    kwargs = dict(max_steps=60, disturbance=0.05)
    one = evaluate(ExpertPolicy("bounding"), "bounding", 0.7, 4, [0], workers=1, **kwargs)
    many = evaluate(ExpertPolicy("bounding"), "bounding", 0.7, 4, [0], workers=3, **kwargs)
    for a, b in zip(one.trajectories[0], many.trajectories[0]):
        np.testing.assert_array_equal(a.states, b.states)


def test_disturbance_sweep():
    reports = disturbance_sweep(
        ExpertPolicy("trotting"), "trotting", 0.5, 2, [0], (0.0, 0.05), max_steps=40
    )
    assert [r.disturbance for r in reports] == [0.0, 0.05]
    table = reports_frame(reports)
    assert len(table) == 2 and set(table["planner"]) == {"expert"}


def test_velocity_trace():
    t = rollout_episode(ExpertPolicy("trotting"), "trotting", 0.5, max_steps=40, seed=1)
    np.testing.assert_array_equal(velocity_trace(t, 1), t["v"])
    smooth = velocity_trace(t, 5)
    assert smooth.shape == (40,)
    assert smooth[10] == pytest.approx(np.mean(t["v"][8:13]), abs=1e-12)
    frame = trace_frame(t, 5)
    assert list(frame.columns) == ["step", "raw_v", "smoothed_v"]
    with pytest.raises(ValueError):
        velocity_trace(rollout_episode(NanPolicy(), "trotting", 0.5, max_steps=5), 5)
    with pytest.raises(ValueError):
        velocity_trace(t, 0)


def test_csv_carries_fingerprint(tmp_path):
    table = pd.DataFrame(dict(planner=["bc", "aligned"], stability_pct=[50.0, 62.5]))
    write_csv(table, tmp_path / "eval.csv", fingerprint="0123abcd")
    assert (tmp_path / "eval.csv").read_text().startswith("# fingerprint: 0123abcd\n")
    loaded, fingerprint = read_csv(tmp_path / "eval.csv")
    assert fingerprint == "0123abcd"
    pd.testing.assert_frame_equal(loaded, table)
    write_csv(table, tmp_path / "plain.csv")
    assert read_csv(tmp_path / "plain.csv")[1] is None


def test_weak_strong_gap():
    table = pd.DataFrame(
        dict(
            gait="trotting",
            v_cmd=0.5,
            pair_scale=[1.0, 1.0, 2.0, 2.0],
            mode=["weak", "strong", "weak", "strong"],
            regularization=1.0,
            stability_pct=[80.0, 70.0, 60.0, 75.0],
        )
    )
    gap = with_weak_strong_gap(table)
    assert list(gap["weak_strong_gap"]) == [10.0, 10.0, -15.0, -15.0]
    only_weak = with_weak_strong_gap(table[table["mode"] == "weak"])
    assert only_weak["weak_strong_gap"].isna().all()


def ablation_inputs():
    env = EnvConstants(max_steps=30)
    expert = collect("expert", "trotting", 0.5, 2, 30, seed=0, env=env)
    stats = fit_norm(expert)
    index = build_index(select_optimal_expert(expert), stats)
    eval_cfg = EvalConfig(
        episodes=1,
        seeds=(0,),
        pair_scales=(1.0,),
        modes=("weak", "strong"),
        regularizations=(0.0, 1.0),
    )
    return env, expert, stats, index, eval_cfg


def test_ablation_suite(rng):
    env, expert, stats, index, eval_cfg = ablation_inputs()
    table = ablation_suite(
        init_denoiser(MICRO, rng),
        expert,
        index,
        stats,
        "trotting",
        0.5,
        diffusion_cfg=MICRO,
        preference_cfg=PreferenceConfig(pairs=4),
        align_cfg=AlignConfig(epochs=1, batch_size=4),
        eval_cfg=eval_cfg,
        env=env,
    )
    assert len(table) == 4
    assert set(table["mode"]) == {"weak", "strong"}
    assert set(table["regularization"]) == {0.0, 1.0}
    assert not table["diverged"].any()
    assert table["stability_pct"].between(0, 100).all()
    assert "weak_strong_gap" in table


def test_diverged_ablation_cells_count_as_unstable(rng):
    env, expert, stats, index, eval_cfg = ablation_inputs()
    table = ablation_suite(
        init_denoiser(MICRO, rng),
        expert,
        index,
        stats,
        "trotting",
        0.5,
        diffusion_cfg=MICRO,
        preference_cfg=PreferenceConfig(pairs=4),
        align_cfg=AlignConfig(epochs=5, batch_size=4, bias=50.0, divergence_patience=1),
        eval_cfg=eval_cfg,
        env=env,
    )
    assert table["diverged"].all()
    assert (table["stability_pct"] == 0).all()
    assert (table["weak_strong_gap"] == 0).all()


def test_ablation_cells_share_evaluation_seeds(rng):
    env, expert, stats, index, eval_cfg = ablation_inputs()
    net = init_denoiser(MICRO, rng)
    table = ablation_suite(
        net,
        expert,
        index,
        stats,
        "trotting",
        0.5,
        diffusion_cfg=MICRO,
        preference_cfg=PreferenceConfig(pairs=4),
        align_cfg=AlignConfig(epochs=0),
        eval_cfg=eval_cfg,
        env=env,
    )
    # without updates every cell evaluates the offline network on the same episodes
    direct = evaluate(
        DiffusionPlanner(net, stats, MICRO, env),
        "trotting",
        0.5,
        eval_cfg.episodes,
        eval_cfg.seeds,
        env=env,
        disturbance=eval_cfg.disturbance,
    )
    for mode in ("weak", "strong"):
        cells = table[table["mode"] == mode].set_index("regularization")
        assert list(cells.index) == [0.0, 1.0]
        assert (cells["stability_pct"] == direct.stability_mean).all()
        assert (cells["mean_velocity"] == direct.velocity_mean).all()


@pytest.fixture(scope="module")
def offline_planner():
    expert = collect("expert", "trotting", 0.5, 64, 250, seed=0)
    stats = fit_norm(expert)
    cfg = DiffusionConfig(train_steps=2000)
    net, _ = train_bc(expert, stats, cfg, np.random.default_rng(0), progress=False)
    return expert, stats, cfg, net


@pytest.mark.slow
def test_disturbance_never_raises_offline_stability(offline_planner):
    _, stats, cfg, net = offline_planner
    planner = DiffusionPlanner(net, stats, cfg, source="bc")
    reports = disturbance_sweep(planner, "trotting", 0.5, 32, [0, 1, 2], (0.0, 0.02, 0.05))
    stability = [r.stability_mean for r in reports]
    assert stability[0] > 0
    assert np.all(np.diff(stability) <= 0), stability


@pytest.mark.slow
def test_regularization_keeps_the_aligned_planner_stable(offline_planner):
    expert, stats, cfg, net = offline_planner
    planner = DiffusionPlanner(net, stats, cfg, source="bc")
    rollouts = collect(planner, "trotting", 0.5, 16, 250, seed=1)
    index = build_index(select_optimal_expert(expert), stats)
    eval_cfg = EvalConfig(
        episodes=16,
        seeds=(0, 1, 2),
        pair_scales=(1.0,),
        modes=("weak",),
        regularizations=(0.0, 1.0),
    )
    table = ablation_suite(
        net,
        rollouts,
        index,
        stats,
        "trotting",
        0.5,
        diffusion_cfg=cfg,
        preference_cfg=PreferenceConfig(pairs=128),
        align_cfg=AlignConfig(learning_rate=1e-2, epochs=20, divergence_logit=1e9),
        eval_cfg=eval_cfg,
    )
    stability = table.set_index("regularization")["stability_pct"]
    assert stability[0.0] < stability[1.0]
