"""Rollout evaluation, normalized scores, the determinant diversity score, the
GMM state-entropy bound and few-shot latent selection."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .env import (
    EnvConfig,
    NormStats,
    default_styles,
    env_reset,
    random_policy,
    run_episode,
    scripted_policy,
)
from .models import ModelBundle
from .numerics import rng_stream

log = logging.getLogger(__name__)

UPPER, LOWER, STALLED = "UPPER", "LOWER", "STALLED"
COV_FLOOR = 1e-6


class GmmFitError(RuntimeError):
    pass


def z_grid(n: int = 3) -> np.ndarray:
    """n x n uniform grid over [-1, 1]^2, row-major in (z0, z1)."""
    ticks = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    return np.array([[a, b] for a in ticks for b in ticks])


def latent_policy_fn(models: ModelBundle, norm: NormStats, z):
    """Deterministic (mean-action) controller in raw environment units."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)

    def act(state):
        s = norm.normalize(np.asarray(state).reshape(1, -1))
        return models.policy.mean_action(s, z)[0] * norm.action_scale

    return act


@dataclass
class Episode:
    states: np.ndarray  # visited states, including the initial and final one
    ret: float
    success: bool


def _episode(policy, env_config: EnvConfig, start) -> Episode:
    S, A, R, S2, D = run_episode(policy, env_config, start)
    states = np.vstack([np.asarray(start).reshape(1, -1), S2]) if len(S2) else np.asarray(start).reshape(1, -1)
    return Episode(states, float(R.sum()), bool(D[-1]) if len(D) else False)


def rollout(models: ModelBundle, norm: NormStats, z, env_config: EnvConfig, episodes: int, seed: int,
            jitter: bool = False) -> list:
    rng = rng_stream(seed, "rollout")
    policy = latent_policy_fn(models, norm, z)
    return [_episode(policy, env_config, env_reset(env_config, rng, jitter)) for _ in range(episodes)]


def normalized_score(raw, min_return: float, max_return: float):
    if not max_return > min_return:
        raise ValueError("max_return must exceed min_return")
    return 100.0 * (np.asarray(raw, dtype=np.float64) - min_return) / (max_return - min_return)


def toy_score_anchors(env_config: EnvConfig, seed: int, episodes: int = 100) -> tuple:
    """(mean return of a uniform-random policy, best mean return among the scripted arcs)."""
    rng = rng_stream(seed, "anchors")
    rand = [_episode(lambda s: random_policy(s, env_config, rng), env_config, env_reset(env_config)).ret
            for _ in range(episodes)]
    best = -np.inf
    for style in default_styles(4):
        rets = [_episode(lambda s: scripted_policy(style, s, env_config, rng), env_config,
                         env_reset(env_config, rng, jitter=True)).ret for _ in range(episodes)]
        best = max(best, float(np.mean(rets)))
    return float(np.mean(rand)), best


@dataclass
class PolicyEmbedding:
    phi: np.ndarray
    episodes: int
    z: np.ndarray


def embedding_from_episodes(episodes: list, z) -> PolicyEmbedding:
    if not episodes:
        raise ValueError("need at least one episode")
    states = np.vstack([ep.states for ep in episodes])
    return PolicyEmbedding(states.mean(axis=0), len(episodes), np.asarray(z, dtype=np.float64))


def policy_embedding(models, norm, z, env_config, episodes: int, seed: int) -> PolicyEmbedding:
    return embedding_from_episodes(rollout(models, norm, z, env_config, episodes, seed), z)


def se_kernel(phi_i, phi_j, h: float) -> float:
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    d = np.asarray(phi_i, dtype=np.float64) - np.asarray(phi_j, dtype=np.float64)
    return float(np.exp(-(d @ d) / (2.0 * h * h)))


def median_bandwidth(phis) -> float:
    phis = np.asarray(phis, dtype=np.float64)
    dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(phis, 2)]
    med = float(np.median(dists)) if dists else 0.0
    return med if med > 0 else 1.0


def diversity_score(embeddings, h: float | None = None) -> float:
    """det of the squared-exponential Gram matrix over policy embeddings."""
    phis = np.array([e.phi if isinstance(e, PolicyEmbedding) else e for e in embeddings], dtype=np.float64)
    if len(phis) < 1:
        raise ValueError("need at least one embedding")
    if h is None:
        h = median_bandwidth(phis)
    sq = ((phis[:, None, :] - phis[None, :, :]) ** 2).sum(-1)
    gram = np.exp(-sq / (2.0 * h * h))
    return max(0.0, float(np.linalg.det(gram)))


def trajectory_mode_label(states) -> str:
    states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
    n = len(states)
    lo, hi = n // 3, max(2 * n // 3, n // 3 + 1)
    mid_y = states[lo:hi, 1].mean()
    if mid_y > 0.55:
        return UPPER
    if mid_y < 0.45:
        return LOWER
    return STALLED


# ---------------------------------------------------------------------------
# Gaussian mixture + entropy bound


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    loglik: float = float("nan")
    bic: float = float("nan")
    ll_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(len(self.weights), self.dim, self.dim)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)


def _floor_cov(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, COV_FLOOR)) @ vecs.T


def _component_logpdf(x, mean, cov):
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (x - mean).T)
    return -0.5 * (sol * sol).sum(0) - np.log(np.diag(chol)).sum() - 0.5 * d * np.log(2 * np.pi)


def _log_resp(x, w, means, covs):
    lp = np.stack([np.log(w[k]) + _component_logpdf(x, means[k], covs[k]) for k in range(len(w))], axis=1)
    mx = lp.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(lp - mx).sum(axis=1))
    return lp - lse[:, None], float(lse.sum())


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min([((x - c) ** 2).sum(1) for c in centers], axis=0)
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def gmm_fit(x, k: int, rng, max_iter: int = 100, tol: float = 1e-6) -> GmmModel:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    means = _kmeanspp(x, k, rng)
    labels = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    resp = np.eye(k)[labels]
    trace = []
    w = means_ = covs = None
    for _ in range(max_iter):
        nk = resp.sum(0) + 10 * np.finfo(float).eps
        w = nk / n
        means_ = (resp.T @ x) / nk[:, None]
        covs = np.array([_floor_cov(((resp[:, j:j + 1] * (x - means_[j])).T @ (x - means_[j])) / nk[j])
                         for j in range(k)])
        log_r, ll = _log_resp(x, w, means_, covs)
        resp = np.exp(log_r)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
    n_params = k * d + k * d * (d + 1) / 2 + (k - 1)
    return GmmModel(w, means_, covs, trace[-1], -2.0 * trace[-1] + n_params * np.log(n), trace)


def gmm_fit_bic(samples, max_components: int, seed: int) -> GmmModel:
    """EM fits for 1..max_components; returns the BIC-minimizing model."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n <= d * max_components:
        raise ValueError("too few samples for the requested component count")
    rng = rng_stream(seed, "gmm")
    best = None
    for k in range(1, max_components + 1):
        try:
            model = gmm_fit(x, k, rng)
        except np.linalg.LinAlgError as e:
            log.debug("gmm k=%d failed: %s", k, e)
            continue
        if not np.isfinite(model.bic):
            continue
        if best is None or model.bic < best.bic:
            best = model
    if best is None:
        raise GmmFitError("every mixture fit was degenerate")
    return best


def entropy_upper_bound(gmm: GmmModel) -> float:
    """sum_i w_i ((D/2) log(1 + 2 pi) + 0.5 log det S_i - log w_i)."""
    d = gmm.dim
    total = 0.0
    for w, cov in zip(gmm.weights, gmm.covs):
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0 or np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) <= 0):
            raise ValueError("covariance is not positive definite")
        total += w * (0.5 * d * np.log(1.0 + 2.0 * np.pi) + 0.5 * logdet - np.log(w))
    return float(total)


# ---------------------------------------------------------------------------
# few-shot adaptation


@dataclass
class AdaptResult:
    z_max: np.ndarray
    probe_z: np.ndarray
    probe_returns: np.ndarray
    adapted_returns: np.ndarray
    adapted_labels: list

    @property
    def adapted_mean(self) -> float:
        return float(np.mean(self.adapted_returns))

    @property
    def probe_mean(self) -> float:
        return float(np.mean(self.probe_returns))

    def to_dict(self) -> dict:
        return {
            "z_max": self.z_max.tolist(),
            "probe_z": self.probe_z.tolist(),
            "probe_returns": self.probe_returns.tolist(),
            "adapted_returns": self.adapted_returns.tolist(),
            "adapted_labels": self.adapted_labels,
            "probe_mean": self.probe_mean,
            "adapted_mean": self.adapted_mean,
        }


def few_shot_adapt(models: ModelBundle, norm: NormStats, env_config: EnvConfig, budget: int = 25,
                   seed: int = 0, eval_episodes: int = 10) -> AdaptResult:
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = rng_stream(seed, "adapt")
    zs = rng.uniform(-1.0, 1.0, size=(budget, 2))
    probes = np.array([rollout(models, norm, z, env_config, 1, seed)[0].ret for z in zs])
    best = int(np.argmax(probes))  # first maximal return wins
    z_max = zs[best]
    eps = rollout(models, norm, z_max, env_config, eval_episodes, seed + 1)
    return AdaptResult(z_max, zs, probes, np.array([e.ret for e in eps]),
                       [trajectory_mode_label(e.states) for e in eps])


# ---------------------------------------------------------------------------
# report


def summarize(cells: list, anchors: tuple, h: float | None) -> dict:
    returns = [r for c in cells for r in c["returns"]]
    succ = [s for c in cells for s in c["successes"]]
    labels = [lab for c in cells for lab in c["mode_labels"]]
    phis = [c["embedding"] for c in cells]
    bandwidth = median_bandwidth(phis) if h is None else float(h)
    hist = {k: labels.count(k) for k in (UPPER, LOWER, STALLED)}
    mean_ret = float(np.mean(returns)) if returns else 0.0
    return {
        "mean_return": mean_ret,
        "success_rate": float(np.mean(succ)) if succ else 0.0,
        "normalized_score": float(normalized_score(mean_ret, *anchors)),
        "diversity_score": diversity_score(phis, bandwidth) if phis else 0.0,
        "bandwidth": bandwidth,
        "bandwidth_rule": "median" if h is None else "fixed",
        "mode_histogram": hist,
        "successful_modes": sorted({lab for c in cells for lab, s in zip(c["mode_labels"], c["successes"]) if s}),
    }


def evaluate(models: ModelBundle, norm: NormStats, env_config: EnvConfig, episodes: int = 10,
             grid: int = 3, seed: int = 0, h: float | None = None, anchors: tuple | None = None) -> dict:
    """Roll out the policy on a z grid and assemble the report document."""
    if anchors is None:
        anchors = toy_score_anchors(env_config, seed)
    cells = []
    for z in z_grid(grid):
        eps = rollout(models, norm, z, env_config, episodes, seed)
        cells.append({
            "z": z.tolist(),
            "returns": [e.ret for e in eps],
            "successes": [e.success for e in eps],
            "mode_labels": [trajectory_mode_label(e.states) for e in eps],
            "embedding": embedding_from_episodes(eps, z).phi.tolist(),
            "trajectory": eps[0].states.tolist(),
        })
    return {
        "meta": {"seed": seed, "episodes": episodes, "grid": grid, "env": env_config.to_dict(),
                 "anchors": {"min_return": anchors[0], "max_return": anchors[1]}, "fixed_bandwidth": h},
        "cells": cells,
        "summary": summarize(cells, anchors, h),
    }
