"""DiveOff training: critic, E-step, M-step and mutual-information losses, the
full training loop, and the AWAC-L+VAE (+DIAYN) baselines."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .env import Dataset
from .models import LATENT_DIM, ModelBundle
from .numerics import (
    Adam,
    DiagGaussian,
    DivergenceError,
    Mlp,
    Tensor,
    check_finite,
    gaussian_log_prob,
    gaussian_sample_reparam,
    grad,
    kl_to_standard_normal,
    log_prob_np,
    polyak_update,
    rng_stream,
    square,
    tmean,
)

log = logging.getLogger(__name__)

ALGOS = ("diveoff", "awacl-vae", "awacl-vae-diayn")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 256
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    vae_lr: float = 3e-4
    m_info_lr: float = 9e-5
    tau: float = 5e-3
    policy_interval: int = 2
    inv_alpha_pi: float = 3.0
    inv_alpha_q: float = 1.0
    info_weight: float = 2.0
    pretrain_steps: int = 2000
    total_steps: int = 50000
    weight_clip: float = 100.0
    n_v: int = 1
    n_z: int = 1
    posterior_data_frac: float = 0.5
    hidden: int = 64
    decoder_std: float = 0.2
    conditional_decoder: bool = True
    log_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("critic_lr", "actor_lr", "vae_lr", "m_info_lr", "tau", "gamma"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1]")
        if self.inv_alpha_pi <= 0 or self.inv_alpha_q <= 0:
            raise ValueError("inverse temperatures must be positive")
        for name in ("policy_interval", "batch_size", "n_v", "n_z", "log_interval", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.decoder_std > 0:
            raise ValueError("decoder_std must be positive")
        if self.pretrain_steps < 0 or self.total_steps < 0:
            raise ValueError("step counts must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cast = {f.name: type(f.default) for f in fields(cls)}
        for k, v in d.items():
            if cast[k] is bool and not isinstance(v, bool):
                raise ValueError(f"{k} must be true or false")
        return cls(**{k: cast[k](v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.s)


class Replay:
    """Normalized transitions with actions rescaled to [-1, 1]."""

    def __init__(self, ds: Dataset):
        if not ds.normalized:
            raise ValueError("dataset must be normalized before training")
        scale = ds.norm.action_scale
        self.s, self.a, self.r = ds.s, ds.a / scale, ds.r
        self.s2, self.done = ds.s_next, ds.done.astype(np.float64)

    def __len__(self):
        return len(self.s)

    def sample(self, rng, n: int) -> Batch:
        idx = rng.integers(0, len(self.s), size=n)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


@dataclass
class StepNoise:
    """All standard-normal draws one training iteration needs, drawn up front
    so that every loss is a deterministic function of the parameters."""

    z: np.ndarray            # z ~ q(z|s,a) for the critic / E-step
    next_action: np.ndarray  # a' ~ pi(.|s', z)
    v: np.ndarray            # (n_v, N, A) actions for the V estimate
    info_z: np.ndarray       # z ~ p(z) for the info term
    info_action: np.ndarray
    mix_mask: np.ndarray     # True -> use the dataset action in the posterior loss
    mix_z: np.ndarray
    mix_action: np.ndarray
    old_z: np.ndarray        # z ~ q_old(z|s,a) for the posterior loss
    vae_z: np.ndarray        # (n_z, N, Z)

    @classmethod
    def draw(cls, rng, n: int, cfg: TrainConfig, action_dim: int = 2) -> "StepNoise":
        nrm = rng.standard_normal
        return cls(
            z=nrm((n, LATENT_DIM)),
            next_action=nrm((n, action_dim)),
            v=nrm((cfg.n_v, n, action_dim)),
            info_z=nrm((n, LATENT_DIM)),
            info_action=nrm((n, action_dim)),
            mix_mask=rng.random(n) < cfg.posterior_data_frac,
            mix_z=nrm((n, LATENT_DIM)),
            mix_action=nrm((n, action_dim)),
            old_z=nrm((n, LATENT_DIM)),
            vae_z=nrm((cfg.n_z, n, LATENT_DIM)),
        )


# ---------------------------------------------------------------------------
# advantage and weights (plain arrays: no gradient flows through them)


def advantage(models: ModelBundle, s, a, z, v_noise) -> np.ndarray:
    """min_j Q_j(s,a,z) minus the mean of min_j Q_j(s,ã,z) over policy samples ã."""
    q = models.critics.min_q_np(s, a, z)
    v = np.mean([models.critics.min_q_np(s, models.policy.sample_np(s, z, eps), z) for eps in v_noise], axis=0)
    return q - v


def weight_pi(adv, cfg: TrainConfig) -> np.ndarray:
    adv = check_finite(np.asarray(adv, dtype=np.float64), "advantage")
    return np.minimum(np.exp(np.minimum(cfg.inv_alpha_pi * adv, 700.0)), cfg.weight_clip)


def weight_q(adv, cfg: TrainConfig) -> np.ndarray:
    adv = check_finite(np.atleast_1d(np.asarray(adv, dtype=np.float64)), "advantage")
    if adv.size == 0:
        raise ValueError("empty advantage batch")
    raw = np.minimum(np.exp(np.minimum(cfg.inv_alpha_q * adv, 700.0)), cfg.weight_clip)
    return raw / raw.mean()


def sample_posterior_z(models: ModelBundle, s, a, noise) -> np.ndarray:
    return models.encoder.sample_np(s, a, noise)


# ---------------------------------------------------------------------------
# losses (all returned as quantities to minimize)


def critic_targets(models: ModelBundle, batch: Batch, z, next_noise, gamma: float, reward_bonus=None):
    a_next = models.policy.sample_np(batch.s2, z, next_noise)
    r = batch.r if reward_bonus is None else batch.r + reward_bonus
    return r + (1.0 - batch.done) * gamma * models.critics.target_min_q(batch.s2, a_next, z)


def critic_loss(models: ModelBundle, batch: Batch, z, y) -> Tensor:
    q1, q2 = models.critics.q(batch.s, batch.a, z)
    return tmean(square(q1 - y)) + tmean(square(q2 - y))


def e_step_loss(models: ModelBundle, batch: Batch, z, w_pi) -> Tensor:
    """Negative advantage-weighted log-likelihood of the dataset actions."""
    return -tmean(models.policy.log_prob(batch.s, z, batch.a) * w_pi)


def posterior_inputs(models: ModelBundle, batch: Batch, noise: StepNoise, cfg: TrainConfig):
    """Actions from the data/policy mixture, z from the frozen current posterior,
    and the self-normalized weights W_q."""
    pol_a = models.policy.sample_np(batch.s, noise.mix_z, noise.mix_action)
    a = np.where(noise.mix_mask[:, None], batch.a, pol_a)
    z_old = models.encoder.sample_np(batch.s, a, noise.old_z)
    w_q = weight_q(advantage(models, batch.s, a, z_old, noise.v), cfg)
    return a, z_old, w_q


def posterior_wml_loss(models: ModelBundle, s, a, z_old, w_q) -> Tensor:
    return -tmean(gaussian_log_prob(models.encoder.dist(s, a), z_old) * w_q)


def weighted_vae_loss(models: ModelBundle, batch: Batch, vae_noise, w_pi=None) -> Tensor:
    """Negative (weighted) evidence lower bound; ``w_pi=None`` is the plain VAE loss.

    ``w_pi`` has shape (n_z, N), one weight per latent sample.
    """
    q = models.encoder.dist(batch.s, batch.a)
    kl = kl_to_standard_normal(q)
    total = None
    for j, eps in enumerate(vae_noise):
        z = gaussian_sample_reparam(q, eps)
        elbo = models.decoder.log_likelihood(z, batch.s, batch.a) - kl
        term = elbo if w_pi is None else elbo * w_pi[j]
        total = term if total is None else total + term
    return -tmean(total) / float(len(vae_noise))


def vae_weights(models: ModelBundle, batch: Batch, vae_noise, v_noise, cfg: TrainConfig) -> np.ndarray:
    mean, log_std = models.encoder.dist_np(batch.s, batch.a)
    std = np.exp(log_std)
    return np.stack([
        weight_pi(advantage(models, batch.s, batch.a, mean + std * eps, v_noise), cfg) for eps in vae_noise
    ])


def info_loss(models: ModelBundle, s, z_prior, action_noise) -> Tensor:
    """Negative E[log q(z | s, ã)] with ã reparameterized from the policy."""
    a_tilde = models.policy.sample(s, z_prior, action_noise)
    return -tmean(gaussian_log_prob(models.encoder.dist(s, a_tilde), z_prior))


def diayn_reward(state_encoder: Mlp, s, z) -> np.ndarray:
    out = state_encoder.predict(s)
    return log_prob_np(out[:, :LATENT_DIM], out[:, LATENT_DIM:], z)


def state_encoder_loss(state_encoder: Mlp, s, z) -> Tensor:
    out = state_encoder(s)
    return -tmean(gaussian_log_prob(DiagGaussian(out[:, :LATENT_DIM], out[:, LATENT_DIM:]), z))


# ---------------------------------------------------------------------------
# training state and updates


@dataclass
class TrainState:
    models: ModelBundle
    cfg: TrainConfig
    critic_opt: Adam
    actor_opt: Adam
    m_info_opt: Adam
    state_enc_opt: Adam | None = None
    step: int = 0
    metrics: list = field(default_factory=list)

    @classmethod
    def create(cls, models: ModelBundle, cfg: TrainConfig) -> "TrainState":
        m_info_params = models.policy.parameters() + models.encoder.parameters() + models.decoder.parameters()
        return cls(
            models=models,
            cfg=cfg,
            critic_opt=Adam(models.critics.parameters(), cfg.critic_lr),
            actor_opt=Adam(models.policy.parameters(), cfg.actor_lr),
            m_info_opt=Adam(m_info_params, cfg.m_info_lr),
            state_enc_opt=Adam(models.state_encoder.parameters(), cfg.vae_lr) if models.state_encoder else None,
        )


def _step(opt: Adam, loss: Tensor) -> float:
    opt.step(grad(loss, opt.params))
    return loss.item()


def critic_update(state: TrainState, batch: Batch, z, noise: StepNoise, reward_bonus=None) -> float:
    m, cfg = state.models, state.cfg
    y = critic_targets(m, batch, z, noise.next_action, cfg.gamma, reward_bonus)
    value = _step(state.critic_opt, critic_loss(m, batch, z, y))
    polyak_update(m.critics.target1, m.critics.q1, cfg.tau)
    polyak_update(m.critics.target2, m.critics.q2, cfg.tau)
    state.step += 1
    return value


def e_step_update(state: TrainState, batch: Batch, z, noise: StepNoise) -> tuple:
    w = weight_pi(advantage(state.models, batch.s, batch.a, z, noise.v), state.cfg)
    return _step(state.actor_opt, e_step_loss(state.models, batch, z, w)), w


def m_info_losses(models: ModelBundle, batch: Batch, noise: StepNoise, cfg: TrainConfig):
    """(total, components) of the posterior + weighted-VAE + info objective."""
    a_mix, z_old, w_q = posterior_inputs(models, batch, noise, cfg)
    w_vae = vae_weights(models, batch, noise.vae_z, noise.v, cfg)
    posterior = posterior_wml_loss(models, batch.s, a_mix, z_old, w_q)
    vae = weighted_vae_loss(models, batch, noise.vae_z, w_vae)
    total = posterior + vae
    parts = {"posterior": posterior, "vae": vae}
    if cfg.info_weight != 0.0:
        info = info_loss(models, batch.s, noise.info_z, noise.info_action)
        total = total + info * cfg.info_weight
        parts["info"] = info
    return total, parts


def m_info_update(state: TrainState, batch: Batch, noise: StepNoise) -> dict:
    total, parts = m_info_losses(state.models, batch, noise, state.cfg)
    _step(state.m_info_opt, total)
    out = {k: v.item() for k, v in parts.items()}
    out["m_info"] = total.item()
    return out


def vae_pretrain(models: ModelBundle, replay: Replay, steps: int, cfg: TrainConfig) -> list:
    """Plain VAE training of encoder + decoder; returns the loss trace."""
    if steps <= 0:
        return []
    rng = rng_stream(cfg.seed, "pretrain")
    opt = Adam(models.encoder.parameters() + models.decoder.parameters(), cfg.vae_lr)
    trace = []
    for _ in range(steps):
        batch = replay.sample(rng, cfg.batch_size)
        eps = rng.standard_normal((cfg.n_z, len(batch), LATENT_DIM))
        trace.append(_step(opt, weighted_vae_loss(models, batch, eps)))
    return trace


def _snapshot(models: ModelBundle) -> ModelBundle:
    return copy.deepcopy(models)


class TrainingDiverged(DivergenceError):
    def __init__(self, msg, last_good: ModelBundle, step: int):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


def train(replay_or_ds, cfg: TrainConfig, algo: str = "diveoff",
          on_metrics: Callable[[dict], None] | None = None) -> TrainState:
    """Pretrain the VAE, then run the critic / E-step / M-info loop.

    ``algo`` selects DiveOff or one of the baselines, which freeze the
    pretrained encoder and skip the M-step and info term.
    """
    if algo not in ALGOS:
        raise ValueError(f"unknown algo {algo!r}; expected one of {ALGOS}")
    replay = replay_or_ds if isinstance(replay_or_ds, Replay) else Replay(replay_or_ds)
    models = ModelBundle.init(cfg.seed, cfg.hidden, with_state_encoder=algo == "awacl-vae-diayn",
                              decoder_std=cfg.decoder_std, conditional_decoder=cfg.conditional_decoder)
    pretrain = vae_pretrain(models, replay, cfg.pretrain_steps, cfg)
    state = TrainState.create(models, cfg)
    if pretrain:
        log.info("vae pretrain: loss %.4f -> %.4f", pretrain[0], pretrain[-1])
    rng = rng_stream(cfg.seed, "train")
    last_good = _snapshot(models)
    acc: dict = {}

    def add(k, v):
        acc.setdefault(k, []).append(float(v))

    try:
        for t in range(1, cfg.total_steps + 1):
            batch = replay.sample(rng, cfg.batch_size)
            noise = StepNoise.draw(rng, len(batch), cfg)
            z = sample_posterior_z(models, batch.s, batch.a, noise.z)
            bonus = None
            if algo == "awacl-vae-diayn":
                add("state_encoder", _step(state.state_enc_opt, state_encoder_loss(models.state_encoder, batch.s, z)))
                bonus = diayn_reward(models.state_encoder, batch.s2, z)
            add("critic", critic_update(state, batch, z, noise, bonus))
            if t % cfg.policy_interval == 0:
                e_loss, w = e_step_update(state, batch, z, noise)
                add("e_step", e_loss)
                add("w_pi_mean", w.mean())
                add("w_pi_max", w.max())
                if algo == "diveoff":
                    for k, v in m_info_update(state, batch, noise).items():
                        add(k, v)
            if t % cfg.log_interval == 0 or t == cfg.total_steps:
                rec = {"step": t}
                rec.update({k: float(np.mean(v)) for k, v in sorted(acc.items())})
                if "w_pi_max" in acc:
                    rec["w_pi_max"] = float(np.max(acc["w_pi_max"]))
                acc = {}
                state.metrics.append(rec)
                log.info("step %d critic %.4f e_step %s", t, rec.get("critic", float("nan")),
                         f"{rec['e_step']:.4f}" if "e_step" in rec else "-")
                if on_metrics:
                    on_metrics(rec)
                last_good = _snapshot(models)
    except DivergenceError as e:
        raise TrainingDiverged(f"training diverged at step {state.step}: {e}", last_good, state.step) from e
    return state


def train_baseline(replay_or_ds, cfg: TrainConfig, variant: str = "awacl-vae", on_metrics=None) -> TrainState:
    if variant not in ALGOS[1:]:
        raise ValueError(f"unknown baseline {variant!r}")
    return train(replay_or_ds, cfg, variant, on_metrics)
