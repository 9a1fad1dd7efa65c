from dataclasses import replace

import numpy as np
import pytest

from conftest import assert_gradients_close, numerical_gradient
from prefdiff.align import AlignConfig, ReferenceModel, align, dpo_loss, mean_logit, pair_logits
from prefdiff.datasets import Trajectory, collect, extract_segment, fit_norm, segment_slots
from prefdiff.diffusion import DiffusionConfig, init_denoiser, schedule_for
from prefdiff.errors import DivergenceError
from prefdiff.gaitsim import ACTION_DIM, STATE_DIM
from prefdiff.ndcore import flat_parameters
from prefdiff.preference import PreferencePair

MICRO = DiffusionConfig(
    horizon=2, diffusion_steps=2, hidden=(1,), embed_dim=2, batch_size=4, sampling_steps=2
)
SMALL = DiffusionConfig(
    horizon=2, diffusion_steps=6, hidden=(16, 16), embed_dim=4, batch_size=8, sampling_steps=3
)


def random_pairs(rng, n, h):
    """Pairs of random segments"""
    trajs = []
    for _ in range(2 * n):
        T = h + 3
        trajs.append(
            Trajectory(
                rng.normal(size=(T, STATE_DIM)),
                rng.uniform(0, 0.5, size=(T, ACTION_DIM)),
                rng.normal(size=T),
                np.zeros(T),
            )
        )
    segments = [extract_segment(trajs, i, 1, h) for i in range(2 * n)]
    pairs = [
        PreferencePair(segments[2 * i], segments[2 * i + 1], 1.0, "strong") for i in range(n)
    ]
    return pairs, fit_norm(trajs)


def expert_pairs(rng, n, h, scale=0.5):
    """Expert slices preferred over copies with noise on every record after the first"""
    trajs = collect("expert", "trotting", 0.5, 8, 60, seed=int(rng.integers(1000)))
    stats = fit_norm(trajs)
    slots = segment_slots(trajs, h)
    pairs = []
    for traj_id, start in slots[rng.choice(len(slots), size=n, replace=False)]:
        winner = extract_segment(trajs, traj_id, start, h)
        loser = replace(winner, states=winner.states.copy(), actions=winner.actions.copy())
        loser.states[1:] += scale * stats.state_std * rng.standard_normal((h, STATE_DIM))
        loser.actions[1:] += scale * stats.action_std * rng.standard_normal((h, ACTION_DIM))
        pairs.append(PreferencePair(winner, loser, 1.0, "strong"))
    return pairs, stats


def test_identical_networks_give_log_two(rng):
    pairs, stats = random_pairs(rng, 5, MICRO.horizon)
    net = init_denoiser(MICRO, rng)
    ref = ReferenceModel.from_net(net)
    cfg = AlignConfig(temperature=500.0, regularization=0.0)
    loss, _, info = dpo_loss(net, ref, schedule_for(MICRO), pairs, stats, cfg, MICRO, rng)
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    assert info["mean_logit"] == 0 and info["clamped"] == 0

    biased = replace(cfg, bias=0.7)
    logits = pair_logits(net, ref, schedule_for(MICRO), pairs, stats, biased, MICRO, rng)
    np.testing.assert_array_equal(logits, 0.7)


def test_identical_segments_give_log_two(rng):
    pairs, stats = random_pairs(rng, 3, MICRO.horizon)
    same = [PreferencePair(p.winner, p.winner, 0.0, "weak") for p in pairs]
    net = init_denoiser(MICRO, rng)
    ref = ReferenceModel.from_net(init_denoiser(MICRO, rng))
    cfg = AlignConfig(temperature=10.0, regularization=0.0)
    loss, _, _ = dpo_loss(net, ref, schedule_for(MICRO), same, stats, cfg, MICRO, rng)
    assert loss == pytest.approx(np.log(2), abs=1e-12)


def test_dpo_gradient_check(rng):
    pairs, stats = random_pairs(rng, 3, MICRO.horizon)
    net = init_denoiser(MICRO, rng)
    ref = ReferenceModel.from_net(init_denoiser(MICRO, rng))
    schedule = schedule_for(MICRO)
    cfg = AlignConfig(temperature=1.0, bias=0.2, regularization=0.5)

    def loss(n):
        return dpo_loss(n, ref, schedule, pairs, stats, cfg, MICRO, np.random.default_rng(0))[0]

    _, grads, info = dpo_loss(
        net, ref, schedule, pairs, stats, cfg, MICRO, np.random.default_rng(0)
    )
    assert info["clamped"] == 0
    assert_gradients_close(grads.flat(), numerical_gradient(loss, net))


def test_swapping_a_pair_negates_the_logit(rng):
    pairs, stats = random_pairs(rng, 4, MICRO.horizon)
    swapped = [PreferencePair(p.loser, p.winner, p.margin, p.provenance) for p in pairs]
    net = init_denoiser(MICRO, rng)
    ref = ReferenceModel.from_net(init_denoiser(MICRO, rng))
    cfg = AlignConfig(temperature=50.0, bias=0.4)
    schedule = schedule_for(MICRO)
    forward = pair_logits(net, ref, schedule, pairs, stats, cfg, MICRO, np.random.default_rng(3))
    backward = pair_logits(
        net, ref, schedule, swapped, stats, cfg, MICRO, np.random.default_rng(3)
    )
    np.testing.assert_allclose(forward - 0.4, -(backward - 0.4), rtol=1e-9, atol=1e-12)


def test_reference_is_frozen(rng):
    ref = ReferenceModel.from_net(init_denoiser(MICRO, rng))
    with pytest.raises(ValueError):
        ref.net.weights[0][0, 0] = 1.0


def test_reference_is_unchanged_by_alignment(rng):
    pairs, stats = random_pairs(rng, 6, MICRO.horizon)
    net = init_denoiser(MICRO, rng)
    ref = ReferenceModel.from_net(net)
    before = flat_parameters(ref.net).copy()
    cfg = AlignConfig(epochs=3, batch_size=4, learning_rate=1e-2)
    aligned, _ = align(
        net, pairs, cfg, np.random.default_rng(5), stats=stats, diffusion_cfg=MICRO, ref=ref
    )
    np.testing.assert_array_equal(flat_parameters(ref.net), before)
    assert not np.array_equal(flat_parameters(aligned), before)

    # an explicit snapshot of the input network is what align takes by default
    rerun = np.random.default_rng(5)
    default, _ = align(net, pairs, cfg, rerun, stats=stats, diffusion_cfg=MICRO)
    np.testing.assert_array_equal(flat_parameters(default), flat_parameters(aligned))


def test_zero_epochs_leave_the_network_unchanged(rng):
    pairs, stats = random_pairs(rng, 4, MICRO.horizon)
    net = init_denoiser(MICRO, rng)
    aligned, log = align(
        net, pairs, AlignConfig(epochs=0), rng, stats=stats, diffusion_cfg=MICRO, progress=False
    )
    assert log == []
    np.testing.assert_array_equal(flat_parameters(aligned), flat_parameters(net))


def test_alignment_leaves_the_input_network_alone(rng):
    pairs, stats = random_pairs(rng, 6, MICRO.horizon)
    net = init_denoiser(MICRO, rng)
    before = flat_parameters(net).copy()
    cfg = AlignConfig(epochs=3, batch_size=4, learning_rate=1e-2)
    aligned, log = align(net, pairs, cfg, rng, stats=stats, diffusion_cfg=MICRO, progress=False)
    np.testing.assert_array_equal(flat_parameters(net), before)
    assert not np.array_equal(flat_parameters(aligned), before)
    assert len(log) == 3 * 2
    assert [entry["epoch"] for entry in log] == [0, 0, 1, 1, 2, 2]
    assert log[0]["mean_logit"] == 0


def test_divergence_guard(rng):
    pairs, stats = random_pairs(rng, 4, MICRO.horizon)
    net = init_denoiser(MICRO, rng)
    # a bias beyond the clamp keeps every logit saturated
    cfg = AlignConfig(
        temperature=1.0,
        bias=50.0,
        learning_rate=1e-6,
        epochs=10,
        batch_size=4,
        divergence_patience=3,
    )
    with pytest.raises(DivergenceError, match="3 consecutive steps"):
        align(net, pairs, cfg, rng, stats=stats, diffusion_cfg=MICRO, progress=False)


def test_empty_pairs(rng):
    with pytest.raises(ValueError):
        align(init_denoiser(MICRO, rng), [], AlignConfig(), rng, stats=None, diffusion_cfg=MICRO)


def test_config_validation():
    with pytest.raises(ValueError):
        AlignConfig(temperature=0.0)
    with pytest.raises(ValueError):
        AlignConfig(regularization=-1.0)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_alignment_prefers_held_out_expert_slices(seed):
    rng = np.random.default_rng(seed)
    pairs, stats = expert_pairs(rng, 96, SMALL.horizon)
    train, held_out = pairs[:64], pairs[64:]
    net = init_denoiser(SMALL, rng)
    ref = ReferenceModel.from_net(net)
    cfg = AlignConfig(temperature=20.0, regularization=0.0, learning_rate=3e-3, epochs=30)
    assert mean_logit(net, ref, held_out, stats, cfg, SMALL, seed=7) == 0
    aligned, log = align(
        net, train, cfg, rng, stats=stats, diffusion_cfg=SMALL, ref=ref, progress=False
    )
    assert mean_logit(aligned, ref, held_out, stats, cfg, SMALL, seed=7) > 0
    assert np.mean([e["pref_loss"] for e in log[-8:]]) < np.log(2)
