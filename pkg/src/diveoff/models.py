"""The networks DiveOff trains and their probabilistic heads.

All networks consume normalized states and actions scaled to [-1, 1]
(raw displacement divided by the environment's step cap).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import ACTION_DIM, STATE_DIM
from .numerics import (
    LOG_2PI,
    LOG_STD_MAX,
    LOG_STD_MIN,
    DiagGaussian,
    Mlp,
    Tensor,
    as_tensor,
    clip,
    concat,
    gaussian_log_prob,
    gaussian_sample_reparam,
    rng_stream,
    square,
    tsum,
)

LATENT_DIM = 2
CKPT_MAGIC = b"DIVEOFFCKPT1"
CKPT_VERSION = 1
FINAL_SCALE = 1e-3
# sampled actions are clamped to the scaled action box; the environment would clip them anyway
ACTION_BOUND = 1.0


class CheckpointFormatError(ValueError):
    pass


def _split_gaussian(out: Tensor, dim: int) -> DiagGaussian:
    return DiagGaussian(out[:, :dim], out[:, dim:])


def _split_np(out: np.ndarray, dim: int):
    return out[:, :dim], np.clip(out[:, dim:], LOG_STD_MIN, LOG_STD_MAX)


@dataclass
class LatentPolicy:
    net: Mlp

    @classmethod
    def init(cls, rng, hidden: int = 64, final_scale: float = FINAL_SCALE):
        return cls(Mlp.init([STATE_DIM + LATENT_DIM, hidden, hidden, 2 * ACTION_DIM], rng, final_scale))

    def parameters(self):
        return self.net.parameters()

    def dist(self, s, z) -> DiagGaussian:
        return _split_gaussian(self.net(concat([as_tensor(s), as_tensor(z)])), ACTION_DIM)

    def dist_np(self, s, z):
        return _split_np(self.net.predict(np.concatenate([s, z], axis=-1)), ACTION_DIM)

    def log_prob(self, s, z, a) -> Tensor:
        return gaussian_log_prob(self.dist(s, z), a)

    def sample(self, s, z, noise) -> Tensor:
        return clip(gaussian_sample_reparam(self.dist(s, z), noise), -ACTION_BOUND, ACTION_BOUND)

    def sample_np(self, s, z, noise) -> np.ndarray:
        mean, log_std = self.dist_np(s, z)
        return np.clip(mean + np.exp(log_std) * noise, -ACTION_BOUND, ACTION_BOUND)

    def mean_action(self, s, z) -> np.ndarray:
        return self.dist_np(np.atleast_2d(s), np.atleast_2d(z))[0]


@dataclass
class CriticPair:
    q1: Mlp
    q2: Mlp
    target1: Mlp = None
    target2: Mlp = None

    def __post_init__(self):
        if self.target1 is None:
            self.target1 = self.q1.copy()
        if self.target2 is None:
            self.target2 = self.q2.copy()

    @classmethod
    def init(cls, rng, hidden: int = 64):
        sizes = [STATE_DIM + ACTION_DIM + LATENT_DIM, hidden, hidden, 1]
        return cls(Mlp.init(sizes, rng), Mlp.init(sizes, rng))

    def parameters(self):
        return self.q1.parameters() + self.q2.parameters()

    def q(self, s, a, z):
        x = concat([as_tensor(s), as_tensor(a), as_tensor(z)])
        return self.q1(x)[:, 0], self.q2(x)[:, 0]

    def min_q_np(self, s, a, z) -> np.ndarray:
        x = np.concatenate([s, a, z], axis=-1)
        return np.minimum(self.q1.predict(x), self.q2.predict(x))[:, 0]

    def target_min_q(self, s, a, z) -> np.ndarray:
        x = np.concatenate([s, a, z], axis=-1)
        return np.minimum(self.target1.predict(x), self.target2.predict(x))[:, 0]


def critic_q(critics: CriticPair, s, a, z):
    return critics.q(s, a, z)


def target_min_q(critics: CriticPair, s, a, z) -> np.ndarray:
    return critics.target_min_q(s, a, z)


@dataclass
class PosteriorEncoder:
    net: Mlp

    @classmethod
    def init(cls, rng, hidden: int = 64, final_scale: float = FINAL_SCALE):
        return cls(Mlp.init([STATE_DIM + ACTION_DIM, hidden, hidden, 2 * LATENT_DIM], rng, final_scale))

    def parameters(self):
        return self.net.parameters()

    def dist(self, s, a) -> DiagGaussian:
        return _split_gaussian(self.net(concat([as_tensor(s), as_tensor(a)])), LATENT_DIM)

    def dist_np(self, s, a):
        return _split_np(self.net.predict(np.concatenate([s, a], axis=-1)), LATENT_DIM)

    def sample_np(self, s, a, noise) -> np.ndarray:
        mean, log_std = self.dist_np(s, a)
        return mean + np.exp(log_std) * noise


@dataclass
class LikelihoodDecoder:
    """Gaussian likelihood with a learned mean and a fixed isotropic std.

    The joint form models p(s, a | z) from z alone. The conditional form models
    p(a | s, z), which is the joint likelihood up to the parameter-free factor
    p(s) when z is independent of s.
    """

    net: Mlp
    std: float = 1.0
    conditional: bool = False

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("decoder std must be positive")

    @classmethod
    def init(cls, rng, hidden: int = 64, std: float = 1.0, conditional: bool = False):
        if conditional:
            sizes = [STATE_DIM + LATENT_DIM, hidden, hidden, ACTION_DIM]
        else:
            sizes = [LATENT_DIM, hidden, hidden, STATE_DIM + ACTION_DIM]
        return cls(Mlp.init(sizes, rng), std, conditional)

    def parameters(self):
        return self.net.parameters()

    def log_likelihood(self, z, s, a) -> Tensor:
        if self.conditional:
            target, pred = as_tensor(a), self.net(concat([as_tensor(s), as_tensor(z)]))
        else:
            target, pred = concat([as_tensor(s), as_tensor(a)]), self.net(z)
        d = target.shape[-1]
        const = -0.5 * d * LOG_2PI - d * np.log(self.std)
        return tsum(square(target - pred), axis=-1) * (-0.5 / self.std ** 2) + const


def policy_dist(policy, s, z):
    return policy.dist(s, z)


def policy_log_prob(policy, s, z, a):
    return policy.log_prob(s, z, a)


def policy_sample(policy, s, z, noise):
    return policy.sample(s, z, noise)


def policy_mean_action(policy, s, z):
    return policy.mean_action(s, z)


def posterior_dist(encoder, s, a):
    return encoder.dist(s, a)


def decoder_log_likelihood(decoder, z, s, a):
    return decoder.log_likelihood(z, s, a)


@dataclass
class ModelBundle:
    policy: LatentPolicy
    critics: CriticPair
    encoder: PosteriorEncoder
    decoder: LikelihoodDecoder
    # state-only encoder q(z|s), used by the DIAYN baseline only
    state_encoder: Mlp | None = None
    hidden: int = 64

    @classmethod
    def init(cls, seed: int, hidden: int = 64, with_state_encoder: bool = False,
             decoder_std: float = 1.0, conditional_decoder: bool = False) -> "ModelBundle":
        rng = rng_stream(seed, "init")
        bundle = cls(
            policy=LatentPolicy.init(rng, hidden),
            critics=CriticPair.init(rng, hidden),
            encoder=PosteriorEncoder.init(rng, hidden),
            decoder=LikelihoodDecoder.init(rng, hidden, decoder_std, conditional_decoder),
            hidden=hidden,
        )
        if with_state_encoder:
            bundle.state_encoder = Mlp.init([STATE_DIM, hidden, hidden, 2 * LATENT_DIM], rng, FINAL_SCALE)
        return bundle

    def networks(self) -> list:
        """(name, Mlp) pairs in checkpoint order."""
        nets = [
            ("policy", self.policy.net),
            ("critic1", self.critics.q1),
            ("critic2", self.critics.q2),
            ("target1", self.critics.target1),
            ("target2", self.critics.target2),
            ("encoder", self.encoder.net),
            ("decoder", self.decoder.net),
        ]
        if self.state_encoder is not None:
            nets.append(("state_encoder", self.state_encoder))
        return nets


def params_digest(nets) -> str:
    h = hashlib.sha256()
    for net in nets:
        for p in net.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    models: ModelBundle
    header: dict = field(default_factory=dict)


def checkpoint_bytes(models: ModelBundle, header: dict) -> bytes:
    nets = models.networks()
    layout = [{"name": name, "sizes": net.sizes} for name, net in nets]
    full = dict(header, version=CKPT_VERSION, hidden=models.hidden, latent_dim=LATENT_DIM,
                decoder_std=models.decoder.std, decoder_conditional=models.decoder.conditional,
                state_dim=STATE_DIM, action_dim=ACTION_DIM, networks=layout,
                order="per network: W0, b0, W1, b1, W2, b2 (W is in x out, row-major)")
    text = json.dumps(full, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<Q", len(text)), text]
    for _, net in nets:
        for p in net.parameters():
            parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_write(models: ModelBundle, header: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(models, header))
    tmp.replace(path)


def checkpoint_read(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    n = len(CKPT_MAGIC)
    if buf[:n] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if len(buf) < n + 8:
        raise CheckpointFormatError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", buf[n:n + 8])
    try:
        header = json.loads(buf[n + 8:n + 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable header: {e}") from e
    if header.get("version") != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported version {header.get('version')}")
    off = n + 8 + hlen
    nets = {}
    for entry in header["networks"]:
        sizes = entry["sizes"]
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            arrs = []
            for shape in ((n_in, n_out), (n_out,)):
                count = int(np.prod(shape))
                if off + 8 * count > len(buf):
                    raise CheckpointFormatError("truncated parameter data")
                arrs.append(np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(np.float64))
                off += 8 * count
            layers.append((Tensor(arrs[0], True), Tensor(arrs[1], True)))
        nets[entry["name"]] = Mlp(layers)
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after parameter data")
    models = ModelBundle(
        policy=LatentPolicy(nets["policy"]),
        critics=CriticPair(nets["critic1"], nets["critic2"], nets["target1"], nets["target2"]),
        encoder=PosteriorEncoder(nets["encoder"]),
        decoder=LikelihoodDecoder(nets["decoder"], header.get("decoder_std", 1.0),
                                  header.get("decoder_conditional", False)),
        state_encoder=nets.get("state_encoder"),
        hidden=header["hidden"],
    )
    return Checkpoint(models, header)

