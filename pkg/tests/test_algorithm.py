from types import SimpleNamespace

import numpy as np
import pytest

from diveoff.algorithm import (
    Batch,
    Replay,
    StepNoise,
    TrainConfig,
    TrainState,
    advantage,
    critic_loss,
    critic_targets,
    critic_update,
    diayn_reward,
    e_step_loss,
    info_loss,
    m_info_losses,
    m_info_update,
    posterior_inputs,
    posterior_wml_loss,
    train,
    train_baseline,
    vae_pretrain,
    vae_weights,
    weight_pi,
    weight_q,
    weighted_vae_loss,
)
from diveoff.env import EnvConfig, default_styles, generate_dataset, normalize_states
from diveoff.models import ModelBundle, checkpoint_bytes, params_digest
from diveoff.numerics import LOG_2PI, Mlp, fd_check, grad, rng_stream

CFG = TrainConfig()


def set_head(net: Mlp, bias):
    """Zero the final weights so the net outputs ``bias`` everywhere."""
    w, b = net.layers[-1]
    w.data[:] = 0.0
    b.data[:] = bias


def scramble(models: ModelBundle, seed: int, scale: float = 0.6):
    """Replace all weights by O(1) random values so no gradient is trivially tiny."""
    rng = np.random.default_rng(seed)
    for _, net in models.networks():
        for w, b in net.layers:
            w.data[:] = rng.normal(scale=scale, size=w.data.shape)
            b.data[:] = rng.normal(scale=0.1, size=b.data.shape)
    return models


def random_batch(rng, n=4):
    return Batch(rng.normal(size=(n, 2)), rng.uniform(-1, 1, (n, 2)), rng.normal(size=n),
                 rng.normal(size=(n, 2)), (rng.random(n) < 0.3).astype(float))


@pytest.fixture(scope="module")
def replay():
    ds = generate_dataset(EnvConfig(), default_styles(4), 5, seed=1)
    return Replay(normalize_states(ds))


# --- weights and advantage -----------------------------------------------------------


def test_weight_pi_examples():
    np.testing.assert_allclose(weight_pi([0.0, 0.5, 10.0], CFG), [1.0, np.exp(1.5), 100.0])
    assert weight_pi([0.5], CFG)[0] == pytest.approx(4.4817, abs=1e-4)


def test_weight_q_examples():
    np.testing.assert_allclose(weight_q([0.0, np.log(3.0)], CFG), [0.5, 1.5])
    np.testing.assert_array_equal(weight_q([0.7, 0.7, 0.7], CFG), [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(weight_q([4.2], CFG), [1.0])
    with pytest.raises(ValueError):
        weight_q([], CFG)


def test_weight_q_clip_then_normalize():
    w = weight_q([0.0, 10.0], CFG)  # raw [1, 100]
    np.testing.assert_allclose(w, np.array([1.0, 100.0]) / 50.5)


def test_advantage_self_comparison_is_zero():
    m = scramble(ModelBundle.init(0, 8), 1, 0.3)
    rng = np.random.default_rng(2)
    s, z, eps = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=(1, 5, 2))
    a = m.policy.sample_np(s, z, eps[0])
    np.testing.assert_allclose(advantage(m, s, a, z, eps), 0.0, atol=1e-12)


def test_advantage_with_constant_critic_is_zero():
    m = ModelBundle.init(0, 8)
    for net in (m.critics.q1, m.critics.q2, m.critics.target1, m.critics.target2):
        set_head(net, 1.7)
    rng = np.random.default_rng(3)
    adv = advantage(m, rng.normal(size=(6, 2)), rng.uniform(-1, 1, (6, 2)), rng.normal(size=(6, 2)),
                    rng.normal(size=(4, 6, 2)))
    np.testing.assert_array_equal(adv, 0.0)


def test_advantage_of_preferred_action_is_positive():
    # Q = 2 within 0.1 of a1 and 1 elsewhere; a near-uniform policy on [-1, 1]^2
    a1 = np.array([0.4, -0.2])
    critics = SimpleNamespace(min_q_np=lambda s, a, z: np.where(np.linalg.norm(a - a1, axis=-1) < 0.1, 2.0, 1.0))
    policy = SimpleNamespace(sample_np=lambda s, z, eps: np.clip(eps, -1, 1))
    m = SimpleNamespace(critics=critics, policy=policy)
    rng = np.random.default_rng(0)
    noise = rng.uniform(-1, 1, (20000, 1, 2))
    adv = advantage(m, np.zeros((1, 2)), a1[None], np.zeros((1, 2)), noise)[0]
    # V = 1 + P(hit the disc) = 1 + pi 0.01 / 4
    assert adv == pytest.approx(1.0 - np.pi * 0.01 / 4, abs=5e-3)
    assert adv > 0


# --- individual losses ----------------------------------------------------------------


def constant_critics(m, value):
    for net in (m.critics.q1, m.critics.q2, m.critics.target1, m.critics.target2):
        set_head(net, value)


def test_critic_target_arithmetic():
    m = ModelBundle.init(0, 8)
    constant_critics(m, 2.0)
    b = Batch(np.zeros((2, 2)), np.zeros((2, 2)), np.array([1.0, 1.0]), np.zeros((2, 2)), np.array([0.0, 1.0]))
    y = critic_targets(m, b, np.zeros((2, 2)), np.zeros((2, 2)), 0.99)
    np.testing.assert_allclose(y, [2.98, 1.0])
    y = critic_targets(m, b, np.zeros((2, 2)), np.zeros((2, 2)), 0.99, reward_bonus=np.array([0.5, 0.5]))
    np.testing.assert_allclose(y, [3.48, 1.5])
    y0 = critic_targets(m, b, np.zeros((2, 2)), np.zeros((2, 2)), 0.99, reward_bonus=np.zeros(2))
    assert y0.tobytes() == critic_targets(m, b, np.zeros((2, 2)), np.zeros((2, 2)), 0.99).tobytes()


def test_e_step_unit_weights_is_behavior_cloning():
    m = scramble(ModelBundle.init(0, 8), 4, 0.3)
    rng = np.random.default_rng(5)
    b, z = random_batch(rng, 6), rng.normal(size=(6, 2))
    bc = -np.mean(m.policy.log_prob(b.s, z, b.a).data)
    assert e_step_loss(m, b, z, np.ones(6)).item() == pytest.approx(bc, rel=1e-12)
    assert e_step_loss(m, b, z, 2 * np.ones(6)).item() == pytest.approx(2 * bc, rel=1e-12)


def test_posterior_loss_at_mode():
    m = scramble(ModelBundle.init(0, 8), 6, 0.3)
    rng = np.random.default_rng(6)
    s, a = rng.normal(size=(5, 2)), rng.uniform(-1, 1, (5, 2))
    mean, log_std = m.encoder.dist_np(s, a)
    expected = -np.mean(-log_std.sum(1) - LOG_2PI)
    assert posterior_wml_loss(m, s, a, mean, np.ones(5)).item() == pytest.approx(expected, rel=1e-12)


def test_vae_loss_perfect_reconstruction_standard_posterior():
    m = ModelBundle.init(0, 8)
    set_head(m.encoder.net, 0.0)
    set_head(m.decoder.net, 0.0)
    b = Batch(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.zeros((3, 2)), np.zeros(3))
    loss = weighted_vae_loss(m, b, np.zeros((1, 3, 2)))
    assert loss.item() == pytest.approx(2 * np.log(2 * np.pi), abs=1e-12)
    assert weighted_vae_loss(m, b, np.zeros((1, 3, 2)), np.ones((1, 3))).item() == loss.item()


def test_info_loss_with_input_blind_encoder():
    m = scramble(ModelBundle.init(0, 8), 7, 0.3)
    set_head(m.encoder.net, 0.0)
    rng = np.random.default_rng(7)
    assert info_loss(m, rng.normal(size=(4, 2)), np.zeros((4, 2)), rng.normal(size=(4, 2))).item() == \
        pytest.approx(LOG_2PI, abs=1e-12)


def test_info_gradient_reaches_policy():
    m = scramble(ModelBundle.init(0, 8), 8, 0.3)
    rng = np.random.default_rng(8)
    s, z, eps = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), 0.1 * rng.normal(size=(4, 2))
    grads = grad(info_loss(m, s, z, eps), m.policy.parameters())
    assert max(np.abs(g).max() for g in grads) > 0


def test_diayn_reward_at_mean():
    m = ModelBundle.init(0, 8, with_state_encoder=True)
    set_head(m.state_encoder, 0.0)
    r = diayn_reward(m.state_encoder, np.ones((3, 2)), np.zeros((3, 2)))
    np.testing.assert_allclose(r, -LOG_2PI, atol=1e-12)


# --- gradient soundness -----------------------------------------------------------------


def _loss_closures(m, batch, noise, cfg):
    """The five losses with every stop-gradient input frozen as a constant."""
    z = m.encoder.sample_np(batch.s, batch.a, noise.z)
    y = critic_targets(m, batch, z, noise.next_action, cfg.gamma)
    w_pi = weight_pi(advantage(m, batch.s, batch.a, z, noise.v), cfg)
    a_mix, z_old, w_q = posterior_inputs(m, batch, noise, cfg)
    w_vae = vae_weights(m, batch, noise.vae_z, noise.v, cfg)
    return {
        "critic": (lambda: critic_loss(m, batch, z, y), m.critics.parameters()),
        "e_step": (lambda: e_step_loss(m, batch, z, w_pi), m.policy.parameters()),
        "posterior": (lambda: posterior_wml_loss(m, batch.s, a_mix, z_old, w_q), m.encoder.parameters()),
        "vae": (lambda: weighted_vae_loss(m, batch, noise.vae_z, w_vae),
                m.encoder.parameters() + m.decoder.parameters()),
        "info": (lambda: info_loss(m, batch.s, noise.info_z, noise.info_action),
                 m.policy.parameters() + m.encoder.parameters()),
    }


@pytest.mark.parametrize("name", ["critic", "e_step", "posterior", "vae", "info"])
@pytest.mark.parametrize("seed", range(3))
def test_losses_pass_fd_check(name, seed):
    m = scramble(ModelBundle.init(seed, 8), seed + 100, 0.5)
    rng = np.random.default_rng(seed)
    batch = random_batch(rng)
    noise = StepNoise.draw(rng, 4, CFG)
    loss_fn, params = _loss_closures(m, batch, noise, CFG)[name]
    assert fd_check(loss_fn, params) < 1e-4


def test_m_info_gradient_ignores_weights():
    m = scramble(ModelBundle.init(1, 8), 11, 0.5)
    rng = np.random.default_rng(11)
    batch, noise = random_batch(rng), StepNoise.draw(rng, 4, CFG)
    params = m.policy.parameters() + m.encoder.parameters() + m.decoder.parameters()
    live = grad(m_info_losses(m, batch, noise, CFG)[0], params)
    c = _loss_closures(m, batch, noise, CFG)
    frozen = lambda: c["posterior"][0]() + c["vae"][0]() + c["info"][0]() * CFG.info_weight
    for g1, g2 in zip(live, grad(frozen(), params)):
        np.testing.assert_array_equal(g1, g2)
    assert fd_check(frozen, params) < 1e-4


# --- updates ----------------------------------------------------------------------------


def test_lambda_zero_is_plain_m_step():
    cfg = TrainConfig(info_weight=0.0)
    m = scramble(ModelBundle.init(2, 8), 12, 0.4)
    rng = np.random.default_rng(12)
    batch, noise = random_batch(rng, 8), StepNoise.draw(rng, 8, cfg)
    total, parts = m_info_losses(m, batch, noise, cfg)
    assert "info" not in parts
    assert total.item() == parts["posterior"].item() + parts["vae"].item()


def test_m_info_update_decreases_objective():
    cfg = TrainConfig(m_info_lr=1e-4)
    m = scramble(ModelBundle.init(3, 8), 13, 0.4)
    state = TrainState.create(m, cfg)
    rng = np.random.default_rng(13)
    batch, noise = random_batch(rng, 16), StepNoise.draw(rng, 16, cfg)
    c = _loss_closures(m, batch, noise, cfg)
    objective = lambda: (c["posterior"][0]() + c["vae"][0]() + c["info"][0]() * cfg.info_weight).item()
    before = objective()
    m_info_update(state, batch, noise)
    assert objective() < before
    for p in state.m_info_opt.params:
        assert np.all(np.isfinite(p.data))


def test_critic_update_counts_steps_and_moves_targets_slowly():
    m = ModelBundle.init(4, 8)
    state = TrainState.create(m, CFG)
    rng = np.random.default_rng(14)
    batch, noise = random_batch(rng, 8), StepNoise.draw(rng, 8, CFG)
    before = params_digest([m.critics.target1])
    critic_update(state, batch, rng.normal(size=(8, 2)), noise)
    assert state.step == 1
    assert params_digest([m.critics.target1]) != before


def _value_iteration(gamma, iters=2000):
    # s0 -> s1 with reward 0, s1 -> terminal with reward 1
    q = np.zeros(2)
    for _ in range(iters):
        q = np.array([0.0 + gamma * q[1], 1.0])
    return q


def test_critic_matches_value_iteration_on_chain():
    cfg = TrainConfig()
    m = ModelBundle.init(0, 64)
    # near-deterministic policy and posterior: action 0, latent 0
    set_head(m.policy.net, [0.0, 0.0, -5.0, -5.0])
    set_head(m.encoder.net, [0.0, 0.0, -5.0, -5.0])
    s0, s1 = np.array([-1.0, 0.0]), np.array([1.0, 0.0])
    batch = Batch(np.stack([s0, s1]), np.zeros((2, 2)), np.array([0.0, 1.0]), np.stack([s1, s1]),
                  np.array([0.0, 1.0]))
    state = TrainState.create(m, cfg)
    rng = rng_stream(0, "chain")
    for _ in range(5000):
        noise = StepNoise.draw(rng, 2, cfg)
        z = m.encoder.sample_np(batch.s, batch.a, noise.z)
        critic_update(state, batch, z, noise)
    oracle = _value_iteration(cfg.gamma)
    q1, q2 = m.critics.q(batch.s, batch.a, np.zeros((2, 2)))
    np.testing.assert_allclose(q1.data, oracle, atol=1e-2)
    np.testing.assert_allclose(q2.data, oracle, atol=1e-2)


def test_vae_pretrain_zero_steps_is_noop(replay):
    m = ModelBundle.init(0, 8)
    before = params_digest([m.encoder.net, m.decoder.net])
    assert vae_pretrain(m, replay, 0, CFG) == []
    assert params_digest([m.encoder.net, m.decoder.net]) == before


def test_vae_pretrain_reduces_held_out_loss(replay):
    cfg = TrainConfig(decoder_std=0.1)
    m = ModelBundle.init(0, 32, decoder_std=0.1)
    held = replay.sample(rng_stream(99, "held"), 512)
    eps = rng_stream(99, "eps").standard_normal((1, 512, 2))
    before = weighted_vae_loss(m, held, eps).item()
    vae_pretrain(m, replay, 2000, cfg)
    assert weighted_vae_loss(m, held, eps).item() < before


# --- training loop ------------------------------------------------------------------------

TINY = dict(batch_size=32, pretrain_steps=20, total_steps=40, hidden=16, log_interval=10)


def test_train_is_deterministic(replay):
    a = train(replay, TrainConfig(**TINY, seed=3))
    b = train(replay, TrainConfig(**TINY, seed=3))
    assert checkpoint_bytes(a.models, {}) == checkpoint_bytes(b.models, {})
    assert a.metrics == b.metrics
    assert a.step == 40 and [r["step"] for r in a.metrics] == [10, 20, 30, 40]


def test_zero_total_steps_returns_pretrained_models(replay):
    cfg = TrainConfig(**{**TINY, "total_steps": 0})
    st = train(replay, cfg)
    init = ModelBundle.init(cfg.seed, cfg.hidden)
    assert params_digest([st.models.policy.net]) == params_digest([init.policy.net])
    assert params_digest([st.models.encoder.net]) != params_digest([init.encoder.net])
    assert st.step == 0 and st.metrics == []


def test_baseline_freezes_pretrained_encoder(replay):
    cfg = TrainConfig(**TINY)
    pre = train(replay, TrainConfig(**{**TINY, "total_steps": 0}))
    frozen = params_digest([pre.models.encoder.net, pre.models.decoder.net])
    st = train_baseline(replay, cfg, "awacl-vae")
    assert params_digest([st.models.encoder.net, st.models.decoder.net]) == frozen
    dive = train(replay, cfg)
    assert params_digest([dive.models.encoder.net]) != frozen


def test_diayn_baseline_trains_state_encoder(replay):
    st = train_baseline(replay, TrainConfig(**TINY), "awacl-vae-diayn")
    assert st.models.state_encoder is not None
    assert "state_encoder" in st.metrics[-1]
    plain = train_baseline(replay, TrainConfig(**TINY), "awacl-vae")
    assert "m_info" not in plain.metrics[-1] and "state_encoder" not in plain.metrics[-1]


def test_unknown_algo_rejected(replay):
    with pytest.raises(ValueError):
        train(replay, TrainConfig(**TINY), "sac")
    with pytest.raises(ValueError):
        train_baseline(replay, TrainConfig(**TINY), "diveoff")


def test_replay_requires_normalized_dataset():
    ds = generate_dataset(EnvConfig(), default_styles(2), 1, seed=0)
    with pytest.raises(ValueError):
        Replay(ds)
    r = Replay(normalize_states(ds))
    assert np.abs(r.a).max() <= 1.0 + 1e-12


# --- config ---------------------------------------------------------------------------------


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(policy_interval=0)
    with pytest.raises(ValueError):
        TrainConfig(inv_alpha_pi=-1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    cfg = TrainConfig.from_dict({"total_steps": "100", "info_weight": 0})
    assert cfg.total_steps == 100 and cfg.info_weight == 0.0
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() != TrainConfig().digest()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"conditional_decoder": "yes"})
    with pytest.raises(ValueError):
        TrainConfig(decoder_std=0.0)
    assert TrainConfig.from_dict({"conditional_decoder": True}).conditional_decoder is True


def test_table_defaults():
    c = TrainConfig()
    assert (c.gamma, c.batch_size, c.critic_lr, c.actor_lr, c.tau, c.policy_interval) == \
        (0.99, 256, 3e-4, 3e-4, 5e-3, 2)
    assert (c.inv_alpha_pi, c.inv_alpha_q, c.info_weight, c.m_info_lr) == (3.0, 1.0, 2.0, 9e-5)
