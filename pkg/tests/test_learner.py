"""Learner math: gradient checks, TD target identities, BC, loop plumbing."""

import numpy as np
import pytest

from fleetnav.errors import InvalidArgument, NumericalDivergence
from fleetnav.learner import (
    BcConfig,
    BcLearner,
    ReplayBuffer,
    SacConfig,
    SacLearner,
    finetune_loop,
    finetune_should_stop,
    pretrain,
)
from fleetnav.learner.nets import Adam, ScalarAdam, backward, forward_cached, polyak_update
from fleetnav.policy import ActionSpec, init_mlp, mlp_forward
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.rng import stream
from fleetnav.sim import EstimationNoiseConfig, ObsSpec, SimConfig


def fd_worst_error(nets_and_grads, loss_fn, h):
    """Largest relative disagreement between analytic and central differences."""
    worst = 0.0
    for net, grads in nets_and_grads:
        for li, (g_w, g_b) in enumerate(grads):
            for arr, g in ((net.weights[li], g_w), (net.biases[li], g_b)):
                for idx in np.ndindex(arr.shape):
                    orig = arr[idx]
                    arr[idx] = orig + h
                    lp = loss_fn()
                    arr[idx] = orig - h
                    lm = loss_fn()
                    arr[idx] = orig
                    fd = (lp - lm) / (2 * h)
                    worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(fd), abs(g[idx])))
    return worst


def upcast(learner):
    for net in (learner.actor, learner.q1, learner.q2,
                learner.q1_target, learner.q2_target):
        for i in range(len(net.weights)):
            net.weights[i] = net.weights[i].astype(np.float64)
            net.biases[i] = net.biases[i].astype(np.float64)


def randomize_actor(learner, rng, scale=0.5):
    for w in learner.actor.weights:
        w[:] = (rng.standard_normal(w.shape) * scale).astype(w.dtype)
    for b in learner.actor.biases:
        b[:] = (rng.standard_normal(b.shape) * 0.1).astype(b.dtype)


# ---------------------------------------------------------------------------
# nets primitives


def test_forward_cached_matches_plain_forward():
    rng = stream(1, "nets")
    net = init_mlp(4, (8, 3), ("relu", "linear"), rng)
    x = rng.standard_normal((6, 4)).astype(np.float32)
    out, _ = forward_cached(net, x)
    assert np.allclose(out, mlp_forward(net, x), atol=1e-7)


def test_backward_matches_finite_differences_f64():
    rng = stream(2, "nets")
    net = init_mlp(3, (5, 4, 2), ("relu", "tanh", "linear"), rng)
    for i in range(len(net.weights)):
        net.weights[i] = net.weights[i].astype(np.float64)
        net.biases[i] = net.biases[i].astype(np.float64)
    x = rng.standard_normal((7, 3))
    target = rng.standard_normal((7, 2))

    def loss():
        out, _ = forward_cached(net, x)
        return float(np.mean((out - target) ** 2))

    out, cache = forward_cached(net, x)
    grads, _ = backward(net, cache, 2.0 * (out - target) / out.size)
    assert fd_worst_error([(net, grads)], loss, 1e-6) < 1e-8


def test_backward_grad_input():
    rng = stream(3, "nets")
    net = init_mlp(3, (6, 1), ("tanh", "linear"), rng)
    for i in range(len(net.weights)):
        net.weights[i] = net.weights[i].astype(np.float64)
        net.biases[i] = net.biases[i].astype(np.float64)
    x = rng.standard_normal((1, 3))
    out, cache = forward_cached(net, x)
    _, gin = backward(net, cache, np.ones((1, 1)))
    h = 1e-6
    for j in range(3):
        xp = x.copy(); xp[0, j] += h
        xm = x.copy(); xm[0, j] -= h
        fd = (forward_cached(net, xp)[0] - forward_cached(net, xm)[0])[0, 0] / (2 * h)
        assert fd == pytest.approx(gin[0, j], rel=1e-6, abs=1e-9)


def test_adam_first_step_is_signed_lr():
    rng = stream(4, "nets")
    net = init_mlp(1, (1,), ("linear",), rng)
    before = net.weights[0].copy()
    opt = Adam(net, lr=0.01)
    opt.step(net, [(np.array([[2.5]], np.float32), np.array([-0.3], np.float32))])
    # bias-corrected first step moves by exactly lr in the gradient direction
    assert net.weights[0][0, 0] == pytest.approx(before[0, 0] - 0.01, abs=1e-6)
    assert net.biases[0][0] == pytest.approx(0.01, abs=1e-6)


def test_scalar_adam_matches_array_adam():
    rng = stream(5, "nets")
    net = init_mlp(1, (1,), ("linear",), rng)
    net.weights[0][:] = 0.7
    opt = Adam(net, lr=0.02)
    sopt = ScalarAdam(lr=0.02)
    value = 0.7
    for g in (0.3, -1.2, 0.05, 0.9):
        opt.step(net, [(np.array([[g]], np.float32), np.zeros(1, np.float32))])
        value = sopt.step(value, g)
        assert value == pytest.approx(net.weights[0][0, 0], abs=1e-6)


def test_polyak_tau_one_copies_and_small_tau_contracts():
    rng = stream(6, "nets")
    online = init_mlp(2, (3, 1), ("relu", "linear"), rng)
    target = init_mlp(2, (3, 1), ("relu", "linear"), rng)
    gap0 = float(np.abs(target.weights[0] - online.weights[0]).max())
    polyak_update(target, online, 0.005)
    gap1 = float(np.abs(target.weights[0] - online.weights[0]).max())
    assert gap1 == pytest.approx(gap0 * 0.995, rel=1e-5)
    polyak_update(target, online, 1.0)
    for tw, ow in zip(target.weights, online.weights):
        assert np.allclose(tw, ow)


# ---------------------------------------------------------------------------
# SAC gradients


def test_critic_gradient_two_parameter_toy():
    # linear critic Q(s, a) = w1*s + w2*a, float32 as in production
    learner = SacLearner(obs_width=1, action_dim=1,
                         cfg=SacConfig(hidden=(), target_entropy=-1.0), seed=5)
    rng = stream(11, "sac-fd")
    sa = rng.standard_normal((16, 2)).astype(np.float32)
    y = rng.standard_normal(16).astype(np.float32)
    _, grads = learner.critic_grads(learner.q1, sa, y)
    err = fd_worst_error([(learner.q1, grads)],
                         lambda: learner.critic_grads(learner.q1, sa, y)[0], 1e-3)
    assert err < 1e-4


def test_actor_gradient_two_parameter_toy():
    learner = SacLearner(obs_width=1, action_dim=1,
                         cfg=SacConfig(hidden=(), target_entropy=-1.0), seed=5)
    rng = stream(12, "sac-fd")
    randomize_actor(learner, rng)
    obs = rng.standard_normal((16, 1)).astype(np.float32)
    eps = rng.standard_normal((16, 1)).astype(np.float32)
    _, grads, _, _ = learner.actor_grads(obs, eps)
    err = fd_worst_error([(learner.actor, grads)],
                         lambda: learner.actor_grads(obs, eps)[0], 1e-3)
    assert err < 1e-4


def test_sac_gradients_hidden_layer_f64():
    learner = SacLearner(obs_width=4, action_dim=2,
                         cfg=SacConfig(hidden=(8,)), seed=11)
    upcast(learner)
    rng = stream(13, "sac-fd")
    randomize_actor(learner, rng, scale=0.4)
    sa = rng.standard_normal((16, 6))
    y = rng.standard_normal(16)
    _, g_c = learner.critic_grads(learner.q2, sa, y)
    err = fd_worst_error([(learner.q2, g_c)],
                         lambda: learner.critic_grads(learner.q2, sa, y)[0], 1e-6)
    assert err < 1e-7

    obs = rng.standard_normal((16, 4))
    eps = rng.standard_normal((16, 2))
    _, g_a, _, _ = learner.actor_grads(obs, eps)
    err = fd_worst_error([(learner.actor, g_a)],
                         lambda: learner.actor_grads(obs, eps)[0], 1e-6)
    assert err < 1e-7


def test_gamma_zero_target_equals_rewards_exactly():
    learner = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,), gamma=0.0), seed=2)
    rng = stream(14, "sac")
    r = rng.standard_normal(32).astype(np.float32)
    next_obs = rng.standard_normal((32, 3)).astype(np.float32)
    done = (rng.random(32) < 0.5).astype(np.float32)
    assert np.array_equal(learner.td_target(r, next_obs, done).astype(np.float32), r)


def test_td_target_done_masks_bootstrap():
    learner = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,)), seed=2)
    rng = stream(15, "sac")
    # make the critics non-trivial so the bootstrap term is visibly nonzero
    for _ in range(3):
        learner.update({
            "obs": rng.standard_normal((32, 3)).astype(np.float32),
            "actions": np.tanh(rng.standard_normal((32, 2))).astype(np.float32),
            "rewards": rng.standard_normal(32).astype(np.float32),
            "next_obs": rng.standard_normal((32, 3)).astype(np.float32),
            "done": np.zeros(32, np.float32),
        })
    r = rng.standard_normal(16).astype(np.float32)
    next_obs = rng.standard_normal((16, 3)).astype(np.float32)
    eps = rng.standard_normal((16, 2)).astype(np.float32)
    y_done = learner.td_target(r, next_obs, np.ones(16, np.float32), eps)
    y_open = learner.td_target(r, next_obs, np.zeros(16, np.float32), eps)
    assert np.allclose(y_done, r)
    assert not np.allclose(y_open, r)


def test_temperature_moves_toward_target_entropy():
    # fresh actor has std 1 in both dims: entropy well above the -2 target,
    # so alpha must fall; a tight policy must push it back up
    learner = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,)), seed=3)
    rng = stream(16, "sac")
    batch = {
        "obs": rng.standard_normal((64, 3)).astype(np.float32),
        "actions": np.tanh(rng.standard_normal((64, 2))).astype(np.float32),
        "rewards": np.zeros(64, np.float32),
        "next_obs": rng.standard_normal((64, 3)).astype(np.float32),
        "done": np.ones(64, np.float32),
    }
    a0 = learner.alpha
    for _ in range(20):
        diag = learner.update(batch)
    assert diag["entropy"] > -2.0
    assert learner.alpha < a0

    tight = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,)), seed=3)
    tight.actor.biases[-1][2:] = -8.0  # log-std -> tiny
    t0 = tight.alpha
    for _ in range(20):
        diag = tight.update(batch)
    assert diag["entropy"] < -2.0
    assert tight.alpha > t0


def test_zero_initialized_actor_is_unicycle_prior():
    learner = SacLearner(obs_width=5, seed=9)
    obs = stream(17, "sac").standard_normal((4, 5)).astype(np.float32)
    for row in obs:
        assert np.all(learner.act(row, deterministic=True) == 0.0)
    # composing a zero residual leaves the base command untouched
    from fleetnav.policy import ResidualAction, compose, unicycle_base

    base = unicycle_base(0.3)
    cmd = compose(base, ResidualAction(0.0, 0.0), beta=0.5)
    assert (cmd.tau_l, cmd.tau_r) == (base.v_l, base.v_r)


def test_update_raises_on_poisoned_weights():
    learner = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,)), seed=4)
    learner.q1.weights[0][0, 0] = np.nan
    rng = stream(18, "sac")
    batch = {
        "obs": rng.standard_normal((8, 3)).astype(np.float32),
        "actions": np.zeros((8, 2), np.float32),
        "rewards": np.zeros(8, np.float32),
        "next_obs": rng.standard_normal((8, 3)).astype(np.float32),
        "done": np.zeros(8, np.float32),
    }
    with pytest.raises(NumericalDivergence):
        learner.update(batch)


def test_learner_state_roundtrip(tmp_path):
    learner = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,)), seed=6)
    rng = stream(19, "sac")
    batch = {
        "obs": rng.standard_normal((16, 3)).astype(np.float32),
        "actions": np.tanh(rng.standard_normal((16, 2))).astype(np.float32),
        "rewards": rng.standard_normal(16).astype(np.float32),
        "next_obs": rng.standard_normal((16, 3)).astype(np.float32),
        "done": np.zeros(16, np.float32),
    }
    for _ in range(4):
        learner.update(batch)
    learner.save_state(tmp_path / "ckpt")
    expected = [w.copy() for w in learner.actor.weights]
    alpha = learner.log_alpha

    other = SacLearner(obs_width=3, cfg=SacConfig(hidden=(8,)), seed=99)
    other.restore_state(tmp_path / "ckpt")
    assert other.log_alpha == alpha
    assert other.update_count == 4
    for got, want in zip(other.actor.weights, expected):
        assert np.array_equal(got, want)


def test_snapshot_and_load_actor_roundtrip():
    spec = ObsSpec(n_features=3, history=1)
    learner = SacLearner(obs_width=spec.input_width, cfg=SacConfig(hidden=(8,)), seed=7)
    snap = learner.snapshot(policy_id=12, obs_spec=spec)
    assert snap.policy_id == 12
    assert snap.action_spec.kind == "residual"

    other = SacLearner(obs_width=spec.input_width, cfg=SacConfig(hidden=(8,)), seed=8)
    other.load_actor(snap)
    obs = stream(20, "sac").standard_normal(spec.input_width).astype(np.float32)
    assert np.allclose(other.act(obs, deterministic=True),
                       learner.act(obs, deterministic=True))

    wrong = SacLearner(obs_width=spec.input_width + 1, cfg=SacConfig(hidden=(8,)), seed=8)
    with pytest.raises(InvalidArgument):
        wrong.load_actor(snap)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SacConfig(gamma=1.0)
    with pytest.raises(InvalidArgument):
        SacConfig(tau=0.0)
    SacConfig(gamma=0.0)  # gamma 0 is legitimate (pure reward regression)


# ---------------------------------------------------------------------------
# behavior cloning


def test_bc_linear_data_matches_least_squares():
    rng = stream(21, "bc")
    X = rng.standard_normal((128, 4)).astype(np.float32)
    w_true = rng.standard_normal((2, 4)).astype(np.float32) * 0.3
    b_true = np.array([0.1, -0.2], np.float32)
    Y = X @ w_true.T + b_true

    bc = BcLearner(obs_width=4, cfg=BcConfig(hidden=(), lr=1e-2, epochs=400,
                                             batch_size=128), seed=1)
    losses = bc.fit(X, Y)
    assert losses[-1] < 1e-4

    Xa = np.concatenate([X, np.ones((len(X), 1), np.float32)], axis=1)
    coef, *_ = np.linalg.lstsq(Xa, Y, rcond=None)
    pred_ls = Xa @ coef
    assert np.allclose(bc.predict(X), np.clip(pred_ls, -1, 1), atol=1e-3)


def test_bc_memorizes_small_set():
    rng = stream(22, "bc")
    X = rng.standard_normal((8, 3)).astype(np.float32)
    Y = np.tanh(rng.standard_normal((8, 2))).astype(np.float32) * 0.7
    bc = BcLearner(obs_width=3, cfg=BcConfig(hidden=(32,), lr=3e-3, epochs=600,
                                             batch_size=8), seed=2)
    bc.fit(X, Y)
    assert np.allclose(bc.predict(X), Y, atol=0.05)


def test_bc_predictions_clipped():
    rng = stream(23, "bc")
    bc = BcLearner(obs_width=2, cfg=BcConfig(hidden=(), epochs=1), seed=3)
    bc.net.weights[0][:] = 50.0
    out = bc.predict(rng.standard_normal((5, 2)).astype(np.float32))
    assert np.all(out >= -1.0) and np.all(out <= 1.0)


def test_bc_snapshot_is_direct_policy():
    spec = ObsSpec(n_features=3, history=1)
    bc = BcLearner(obs_width=spec.input_width, cfg=BcConfig(hidden=(8,)), seed=4)
    snap = bc.snapshot(policy_id=1, obs_spec=spec)
    assert snap.action_spec.kind == "direct"
    from fleetnav.policy import policy_command

    obs = stream(24, "bc").standard_normal(spec.input_width).astype(np.float32)
    cmd = policy_command(snap, obs)
    want = bc.predict(obs[None])[0]
    assert cmd.tau_l == pytest.approx(want[0], abs=1e-6)
    assert cmd.tau_r == pytest.approx(want[1], abs=1e-6)


def test_bc_rejects_bad_input():
    bc = BcLearner(obs_width=2, cfg=BcConfig(epochs=1), seed=5)
    with pytest.raises(InvalidArgument):
        bc.fit(np.zeros((3, 2), np.float32), np.zeros((4, 2), np.float32))
    with pytest.raises(InvalidArgument):
        bc.fit(np.zeros((0, 2), np.float32), np.zeros((0, 2), np.float32))


# ---------------------------------------------------------------------------
# training loops


def test_finetune_stop_rule_matches_sliding_window_oracle():
    rng = stream(25, "driver")
    for _ in range(300):
        n = int(rng.integers(0, 230))
        seq = (rng.random(n) < 0.7).tolist()
        want = n >= 200 or (n >= 10 and all(seq[-10:]))
        assert finetune_should_stop(seq) == want

    assert not finetune_should_stop([])
    assert not finetune_should_stop([True] * 9)
    assert finetune_should_stop([False] + [True] * 10)
    assert finetune_should_stop([False] * 200)


def quick_layout_and_config():
    layout = generate_layout(
        GenConfig(room_count_range=(1, 1), obstacle_count_range=(0, 0),
                  room_size_range=(4.0, 4.5)), seed=40)
    config = SimConfig(max_steps=12, obs=ObsSpec(history=2),
                       estimation=EstimationNoiseConfig.zero(),
                       actuation_noise_sigma=0.0)
    return layout, config


def test_pretrain_accounting_and_diagnostics(tmp_path):
    layout, config = quick_layout_and_config()
    diag = tmp_path / "diag.csv"
    result = pretrain(
        [layout], config,
        sac_cfg=SacConfig(hidden=(8,), batch_size=16, warmup_steps=24),
        max_episodes=5, seed=1, diag_path=diag)
    assert result.episodes == 5
    assert result.env_steps == result.buffer.size
    assert result.stop_reason == "budget"
    assert len(result.successes) == 5
    lines = diag.read_text().strip().split("\n")
    assert lines[0].startswith("episode,")
    assert len(lines) == 6
    # once past warmup and a full batch, updates track env steps
    if result.env_steps > 16 + 24:
        assert result.updates > 0


def test_pretrain_rejects_empty_pool():
    _, config = quick_layout_and_config()
    with pytest.raises(InvalidArgument):
        pretrain([], config, max_episodes=1)


def test_finetune_loop_stops_at_cap():
    layout, config = quick_layout_and_config()
    learner = SacLearner(config.obs.input_width,
                         cfg=SacConfig(hidden=(8,), batch_size=16), seed=2)
    result = finetune_loop(layout, config, learner, max_episodes=2, seed=3)
    assert result.episodes == 2
    assert result.stop_reason == "episode_cap"
    assert len(result.successes) == 2


def test_finetune_loop_stops_when_solved(monkeypatch):
    layout, config = quick_layout_and_config()
    learner = SacLearner(config.obs.input_width,
                         cfg=SacConfig(hidden=(8,), batch_size=10 ** 9), seed=2)

    import fleetnav.learner.driver as driver_mod

    real = driver_mod.run_episode

    def always_succeeds(*args, **kwargs):
        log = real(*args, **kwargs)
        log.stop_reason = "goal_reached"
        log.steps[-1].event = "goal_reached"
        return log

    monkeypatch.setattr(driver_mod, "run_episode", always_succeeds)
    result = finetune_loop(layout, config, learner, window=10,
                           max_episodes=200, seed=4)
    assert result.episodes == 10
    assert result.stop_reason == "solved"
