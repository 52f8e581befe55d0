"""Controller state/step/reward contracts, agent learning, and the RL loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import reward_ref, signed_step_ref

from protodetect import numerics as nm
from protodetect.boundary_rl import (
    Agent,
    BandConfig,
    ReplayBuffer,
    Stage2RLConfig,
    Transition,
    agent_update,
    apply_manual_update,
    build_state,
    generate_negatives,
    make_agent,
    reward,
    run_stage2_rl,
    signed_step,
)
from protodetect.data import TimeSeries, make_windows
from protodetect.recon import ReconConfig, ReconModel, pretrain, recon_loss

TINY = ReconConfig(width=4, dims=1, hidden=4, blocks=1, heads=2)


def _band(low=0.5, up=1.0, **kw):
    return BandConfig(low=low, up=up, **kw)


def _sine_window_set(n=64, width=4, period=16.0):
    t = np.arange(n + width, dtype=np.float64)
    series = TimeSeries(np.sin(2 * np.pi * t / period))
    return make_windows(series, width, 1)


def _trained_tiny_model(seed=0, epochs=30):
    model = ReconModel(TINY, np.random.default_rng(seed))
    ws = _sine_window_set()
    pretrain(model, ws.windows, epochs=epochs, lr=5e-3, batch_size=16,
             rng=np.random.default_rng(seed + 1))
    return model, ws


# -- state ------------------------------------------------------------------


def test_build_state_full_history():
    np.testing.assert_array_equal(build_state([1.0, 2.0, 3.0], 0.1, 3), [1, 2, 3, 0.1])


def test_build_state_pads_with_oldest():
    np.testing.assert_array_equal(build_state([5.0], 0.0, 3), [5, 5, 5, 0])


def test_build_state_minimal_window():
    np.testing.assert_array_equal(build_state([1.0, 7.0], 0.3, 1), [7, 0.3])


def test_build_state_empty_history_errors():
    with pytest.raises(ValueError):
        build_state([], 0.0, 3)


# -- signed step ------------------------------------------------------------


def test_signed_step_above_band():
    band = _band(low=0.5, up=1.0, step_pos=0.1, step_neg=0.2)
    assert signed_step(0.5, 2.0, band) == pytest.approx(0.05)


def test_signed_step_below_band():
    band = _band(low=0.5, up=1.0, step_pos=0.1, step_neg=0.2)
    assert signed_step(0.5, 0.1, band) == pytest.approx(-0.1)


def test_signed_step_inside_band_is_zero():
    band = _band(low=0.5, up=1.0)
    assert signed_step(0.5, 0.7, band) == 0.0


@given(st.floats(0, 1), st.floats(0.01, 10), st.floats(0.02, 5))
@settings(max_examples=100, deadline=None)
def test_signed_step_zero_iff_in_band(action, loss, width):
    band = BandConfig(low=0.5, up=0.5 + width, step_pos=0.1, step_neg=0.1)
    u = signed_step(action, loss, band)
    if band.low <= loss <= band.up:
        assert u == 0.0
    else:
        assert u == signed_step_ref(action, loss, band.low, band.up, 0.1, 0.1)


# -- reward -----------------------------------------------------------------


def test_reward_progress_plus_bonus():
    band = BandConfig(low=0.8, up=1.5, target=1.0)
    assert reward(2.0, 1.2, band) == pytest.approx(1.8)


def test_reward_no_movement_outside_band():
    band = _band(low=0.5, up=1.0)
    assert reward(2.0, 2.0, band) == 0.0


def test_reward_best_case_hits_target():
    band = BandConfig(low=0.5, up=1.5, target=1.0)
    assert reward(3.0, 1.0, band) == pytest.approx(abs(3.0 - 1.0) + 1.0)


@given(st.floats(0, 5), st.floats(0, 5))
@settings(max_examples=100, deadline=None)
def test_reward_matches_reference(lb, la):
    band = BandConfig(low=0.5, up=1.5, target=0.9)
    assert reward(lb, la, band) == pytest.approx(
        reward_ref(lb, la, band.low, band.up, band.target), abs=1e-12
    )


def test_reward_recomputable_from_transition():
    band = _band()
    rng = np.random.default_rng(0)
    for _ in range(20):
        lb, la = rng.uniform(0, 3, size=2)
        tr = Transition(np.zeros(3), 0.4, 0.01, reward(lb, la, band), lb, la)
        assert reward(tr.loss_before, tr.loss_after, band) == tr.reward


# -- replay buffer ----------------------------------------------------------


def test_replay_buffer_fifo_capacity():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.push(Transition(np.zeros(2), 0.0, 0.0, float(i), 0.0, 0.0))
    assert len(buf) == 3
    rewards = {t.reward for t in buf.sample(np.random.default_rng(0), 3)}
    assert rewards == {2.0, 3.0, 4.0}


# -- manual update ----------------------------------------------------------


def test_manual_update_zero_step_is_identity():
    model, ws = _trained_tiny_model()
    batch = ws.windows[:8]
    before = model.params.snapshot()
    l_before = recon_loss(model, batch).item()
    l_after = apply_manual_update(model, batch, 0.0)
    assert l_after == pytest.approx(l_before, rel=1e-12)
    after = model.params.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_manual_update_small_positive_step_descends():
    model, ws = _trained_tiny_model()
    batch = ws.windows[:8]
    l_before = recon_loss(model, batch).item()
    l_after = apply_manual_update(model, batch, 1e-4)
    assert l_after <= l_before


def test_manual_update_small_negative_step_ascends():
    model, ws = _trained_tiny_model()
    batch = ws.windows[:8]
    l_before = recon_loss(model, batch).item()
    l_after = apply_manual_update(model, batch, -1e-4)
    assert l_after >= l_before


def test_manual_update_continuity_at_tiny_steps():
    model, ws = _trained_tiny_model()
    batch = ws.windows[:8]
    l_before = recon_loss(model, batch).item()
    l_after = apply_manual_update(model, batch, 1e-8)
    assert abs(l_after - l_before) < 1e-6


def test_reverse_update_grows_negative_deviation():
    model, ws = _trained_tiny_model()
    batch = ws.windows[:8]
    dev_before = np.linalg.norm(generate_negatives(model, batch) - batch, axis=(1, 2)).mean()
    apply_manual_update(model, batch, -0.05)
    dev_after = np.linalg.norm(generate_negatives(model, batch) - batch, axis=(1, 2)).mean()
    assert dev_after > dev_before


# -- agent ------------------------------------------------------------------


def test_actor_output_respects_bounds_under_noise():
    rng = np.random.default_rng(3)
    agent = Agent(state_dim=4, hidden=8, action_min=0.0, action_max=1.0,
                  actor_lr=1e-3, critic_lr=1e-3, rng=rng)
    for _ in range(200):
        state = rng.normal(size=4) * 10
        a = agent.act_explore(state, sigma=2.0, rng=rng)
        assert 0.0 <= a <= 1.0


def test_critic_converges_on_constant_reward():
    rng = np.random.default_rng(4)
    agent = Agent(state_dim=3, hidden=16, action_min=0.0, action_max=1.0,
                  actor_lr=1e-3, critic_lr=5e-3, rng=rng)
    states = rng.normal(size=(64, 3))
    actions = rng.uniform(0, 1, size=(64, 1))
    rewards = np.ones((64, 1))
    losses = [agent.update_critic(states, actions, rewards) for _ in range(300)]
    assert losses[-1] < 0.01
    assert losses[-1] < 0.1 * losses[0]


def test_actor_drifts_to_max_under_identity_critic():
    # hand-build the critic to compute c(s, a) = relu(a) - relu(-a) = a,
    # then run actor-only updates: the actor should saturate toward a_max
    rng = np.random.default_rng(5)
    agent = Agent(state_dim=3, hidden=4, action_min=0.0, action_max=1.0,
                  actor_lr=5e-3, critic_lr=1e-3, rng=rng)
    cp = agent.critic_params
    w1 = np.zeros((4, 4))  # input = [s0, s1, s2, a]
    w1[3, 0], w1[3, 1] = 1.0, -1.0
    cp["critic.w1"].data = w1
    cp["critic.b1"].data = np.zeros(4)
    w2 = np.zeros((4, 4))
    w2[0, 0], w2[1, 1] = 1.0, 1.0
    cp["critic.w2"].data = w2
    cp["critic.b2"].data = np.zeros(4)
    cp["critic.w3"].data = np.array([[1.0], [-1.0], [0.0], [0.0]])
    cp["critic.b3"].data = np.zeros(1)

    states = rng.normal(size=(32, 3))
    check = agent.critic_forward(nm.Tensor(states), nm.Tensor(np.full((32, 1), 0.37))).data
    np.testing.assert_allclose(check, 0.37)

    for _ in range(400):
        agent.update_actor(states)
    outs = agent.actor_forward(nm.Tensor(states)).data
    assert outs.min() > 0.9


def test_agent_update_skips_when_buffer_underfull():
    rng = np.random.default_rng(6)
    agent = Agent(state_dim=2, hidden=4, action_min=0.0, action_max=1.0,
                  actor_lr=1e-3, critic_lr=1e-3, rng=rng)
    buf = ReplayBuffer(100)
    buf.push(Transition(np.zeros(2), 0.5, 0.0, 1.0, 1.0, 1.0))
    diag = agent_update(agent, buf, minibatch=8, rng=rng)
    assert diag["skipped"] is True


# -- stage-2 loop -----------------------------------------------------------


def test_run_stage2_empty_windows():
    model, _ = _trained_tiny_model()
    cfg = Stage2RLConfig(epochs=1, batch_size=8, history_len=3, minibatch=4)
    band = _band(low=0.5, up=1.0)
    agent = make_agent(cfg, band, np.random.default_rng(0))
    empty = make_windows(TimeSeries(np.zeros(4)), 4, 1)
    empty.windows = empty.windows[:0]
    empty.starts = empty.starts[:0]
    result = run_stage2_rl(model, agent, empty, band, cfg, np.random.default_rng(0))
    assert len(result.pos_pool) == 0 and len(result.neg_pool) == 0
    assert result.trajectory == []


def test_run_stage2_pools_aligned_and_nonempty():
    model, ws = _trained_tiny_model()
    base = recon_loss(model, ws.windows).item()
    band = BandConfig(low=1.5 * base + 1e-6, up=4.0 * base + 2e-6,
                      step_pos=0.02, step_neg=0.02)
    cfg = Stage2RLConfig(epochs=2, batch_size=8, history_len=4, minibatch=8)
    agent = make_agent(cfg, band, np.random.default_rng(1))
    result = run_stage2_rl(model, agent, ws, band, cfg, np.random.default_rng(2))
    assert len(result.pos_pool) == len(result.neg_pool) == len(result.pool_starts)
    assert len(result.pos_pool) > 0
    assert result.pos_pool.shape[1:] == (4, 1)
    # every pooled negative aligns with its positive through the start index
    starts_to_pos = {}
    for w, s in zip(ws.windows, ws.starts):
        starts_to_pos[int(s)] = w
    for pos, s in zip(result.pos_pool, result.pool_starts):
        np.testing.assert_array_equal(pos, starts_to_pos[int(s)])


class _ZeroActionAgent(Agent):
    def act_explore(self, state, sigma, rng):
        return 0.0


def test_well_trained_zero_action_steps_are_not_pooled():
    model, ws = _trained_tiny_model()
    base = recon_loss(model, ws.windows).item()
    band = BandConfig(low=base * 100, up=base * 200, step_pos=0.02, step_neg=0.02)
    cfg = Stage2RLConfig(epochs=1, batch_size=8, history_len=4, minibatch=8)
    agent = _ZeroActionAgent(state_dim=5, hidden=4, action_min=0.0, action_max=1.0,
                             actor_lr=1e-3, critic_lr=1e-3, rng=np.random.default_rng(3))
    result = run_stage2_rl(model, agent, ws, band, cfg, np.random.default_rng(4))
    # loss stays far below the band floor and steps are all zero -> gated out
    assert all(tr.step == 0.0 for tr in result.trajectory)
    assert len(result.pos_pool) == 0


def test_pool_all_overrides_gating():
    model, ws = _trained_tiny_model()
    base = recon_loss(model, ws.windows).item()
    band = BandConfig(low=base * 100, up=base * 200, step_pos=0.02, step_neg=0.02)
    cfg = Stage2RLConfig(epochs=1, batch_size=8, history_len=4, minibatch=8, pool_all=True)
    agent = _ZeroActionAgent(state_dim=5, hidden=4, action_min=0.0, action_max=1.0,
                             actor_lr=1e-3, critic_lr=1e-3, rng=np.random.default_rng(3))
    result = run_stage2_rl(model, agent, ws, band, cfg, np.random.default_rng(4))
    assert len(result.pos_pool) == len(ws)


def test_ephemeral_theta_restores_weights():
    model, ws = _trained_tiny_model()
    base = recon_loss(model, ws.windows).item()
    band = BandConfig(low=1.5 * base + 1e-6, up=4.0 * base + 2e-6,
                      step_pos=0.05, step_neg=0.05)
    cfg = Stage2RLConfig(epochs=1, batch_size=8, history_len=4, minibatch=8,
                         ephemeral_theta=True)
    agent = make_agent(cfg, band, np.random.default_rng(5))
    before = model.params.snapshot()
    run_stage2_rl(model, agent, ws, band, cfg, np.random.default_rng(6))
    after = model.params.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_run_stage2_deterministic_given_seeds():
    def one_run():
        model, ws = _trained_tiny_model(seed=7)
        base = recon_loss(model, ws.windows).item()
        band = BandConfig(low=1.5 * base, up=4.0 * base, step_pos=0.02, step_neg=0.02)
        cfg = Stage2RLConfig(epochs=2, batch_size=8, history_len=4, minibatch=8)
        agent = make_agent(cfg, band, np.random.default_rng(8))
        return run_stage2_rl(model, agent, ws, band, cfg, np.random.default_rng(9))

    a, b = one_run(), one_run()
    assert len(a.trajectory) == len(b.trajectory)
    for ta, tb in zip(a.trajectory, b.trajectory):
        assert ta.loss_before == tb.loss_before
        assert ta.action == tb.action
        assert ta.step == tb.step
        assert ta.reward == tb.reward
        assert ta.loss_after == tb.loss_after
