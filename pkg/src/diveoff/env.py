"""2D point-mass path-planning task, scripted arc-following behavior policies and
the offline dataset they produce."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import rng_stream

log = logging.getLogger(__name__)

STATE_DIM = 2
ACTION_DIM = 2
STD_FLOOR = 1e-3
DATASET_MAGIC = b"DIVEOFF1"
DATASET_VERSION = 1


class Variant(str, Enum):
    NONE = "none"
    WALL_UPPER = "wall-upper"
    WALL_LOWER = "wall-lower"


# x extent of the wall block; the y extent depends on the variant
WALL_X = (0.45, 0.55)


class DatasetFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    start: tuple = (0.1, 0.5)
    goal: tuple = (0.9, 0.5)
    goal_radius: float = 0.05
    max_step: float = 0.05
    horizon: int = 100
    step_cost: float = -0.01
    goal_reward: float = 1.0
    variant: Variant = Variant.NONE
    bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        lo, hi = self.bounds
        for p in (self.start, self.goal):
            if not all(lo <= c <= hi for c in p):
                raise ValueError("start and goal must lie inside the bounds")
        if self.goal_radius >= np.hypot(*np.subtract(self.goal, self.start)):
            raise ValueError("goal_radius must be smaller than the start-goal distance")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        object.__setattr__(self, "variant", Variant(self.variant))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["start"], d["goal"], d["bounds"] = list(self.start), list(self.goal), list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        for k in ("start", "goal", "bounds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_variant(self, variant) -> "EnvConfig":
        return replace(self, variant=Variant(variant))

    @property
    def wall_y(self):
        if self.variant is Variant.WALL_UPPER:
            return (0.5, 1.0)
        if self.variant is Variant.WALL_LOWER:
            return (0.0, 0.5)
        return None


def env_reset(config: EnvConfig, rng: np.random.Generator | None = None, jitter: bool = False) -> np.ndarray:
    state = np.array(config.start, dtype=np.float64)
    if jitter:
        if rng is None:
            raise ValueError("jittered reset needs an rng")
        state = state + rng.uniform(-0.02, 0.02, size=STATE_DIM)
    return np.clip(state, *config.bounds)


def _resolve_wall(state: np.ndarray, proposed: np.ndarray, config: EnvConfig) -> np.ndarray:
    # Axis-by-axis sweep (x first) against the open wall rectangle; a blocked
    # sweep stops on the wall face, which is walkable.
    wy = config.wall_y
    if wy is None:
        return proposed
    x0, y0 = state
    x1, y1 = proposed
    (xa, xb), (ya, yb) = WALL_X, wy
    if ya < y0 < yb and min(x0, x1) < xb and max(x0, x1) > xa:
        x1 = xa if x0 <= xa else xb
    if xa < x1 < xb and min(y0, y1) < yb and max(y0, y1) > ya:
        y1 = ya if y0 <= ya else yb
    return np.array([x1, y1])


def env_step(state, action, config: EnvConfig):
    """Returns (next_state, reward, done)."""
    state = np.asarray(state, dtype=np.float64)
    lo, hi = config.bounds
    if np.any(state < lo) or np.any(state > hi):
        raise ValueError(f"state {state} outside bounds")
    a = np.clip(np.asarray(action, dtype=np.float64), -config.max_step, config.max_step)
    proposed = np.clip(state + a, lo, hi)
    nxt = _resolve_wall(state, proposed, config)
    if np.hypot(*(nxt - np.asarray(config.goal))) <= config.goal_radius:
        return nxt, config.goal_reward, True
    return nxt, config.step_cost, False


@dataclass(frozen=True)
class BehaviorStyle:
    waypoint_offset: float
    noise_std: float = 0.01

    def __post_init__(self):
        if not -0.35 <= self.waypoint_offset <= 0.35:
            raise ValueError("waypoint_offset must lie in [-0.35, 0.35]")


def default_styles(n: int = 4, noise_std: float = 0.01) -> list:
    offsets = [0.0] if n == 1 else np.linspace(-0.3, 0.3, n)
    return [BehaviorStyle(round(float(o), 10), noise_std) for o in offsets]


def arc_y(x, offset: float, config: EnvConfig):
    """Height of the quadratic arc through start and goal peaking at mid-course."""
    x0, x1 = config.start[0], config.goal[0]
    mid, half = 0.5 * (x0 + x1), 0.5 * (x1 - x0)
    u = np.clip((np.asarray(x) - mid) / half, -1.0, 1.0)
    base = config.start[1] + (config.goal[1] - config.start[1]) * (np.asarray(x) - x0) / (x1 - x0)
    return base + offset * (1.0 - u * u)


_LOOKAHEAD = np.linspace(1.0, 0.02, 50)


def scripted_policy(style: BehaviorStyle, state, config: EnvConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pursue the furthest arc point reachable within one capped step."""
    state = np.asarray(state, dtype=np.float64)
    m = config.max_step
    xs = np.minimum(state[0] + m * _LOOKAHEAD, config.goal[0])
    ys = arc_y(xs, style.waypoint_offset, config)
    ok = np.abs(ys - state[1]) <= m + 1e-12
    i = int(np.argmax(ok)) if ok.any() else len(xs) - 1
    action = np.array([xs[i], ys[i]]) - state
    if style.noise_std > 0:
        if rng is None:
            raise ValueError("noisy policy needs an rng")
        action = action + rng.normal(0.0, style.noise_std, size=ACTION_DIM)
    return np.clip(action, -m, m)


def random_policy(state, config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-config.max_step, config.max_step, size=ACTION_DIM)


def run_episode(policy, config: EnvConfig, start: np.ndarray):
    """Roll ``policy(state) -> action`` from ``start``.

    Returns (states, actions, rewards, next_states, dones) as arrays.
    """
    S, A, R, S2, D = [], [], [], [], []
    s = np.asarray(start, dtype=np.float64)
    for _ in range(config.horizon):
        a = np.clip(policy(s), -config.max_step, config.max_step)
        s2, r, done = env_step(s, a, config)
        S.append(s); A.append(a); R.append(r); S2.append(s2); D.append(done)
        s = s2
        if done:
            break
    k = len(S)
    return (np.reshape(S, (k, STATE_DIM)), np.reshape(A, (k, ACTION_DIM)),
            np.asarray(R, dtype=np.float64), np.reshape(S2, (k, STATE_DIM)), np.asarray(D, dtype=bool))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    action_scale: float

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "action_scale": self.action_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   float(d["action_scale"]))

    def normalize(self, s):
        return (np.asarray(s) - self.mean) / self.std

    def denormalize(self, s):
        return np.asarray(s) * self.std + self.mean


def compute_norm_stats(states: np.ndarray, action_scale: float) -> NormStats:
    if len(states) == 0:
        return NormStats(np.zeros(STATE_DIM), np.ones(STATE_DIM), action_scale)
    return NormStats(states.mean(axis=0), np.maximum(states.std(axis=0), STD_FLOOR), action_scale)


@dataclass
class Dataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    norm: NormStats
    meta: dict = field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        n = len(self.s)
        if not all(len(x) == n for x in (self.a, self.r, self.s_next, self.done)):
            raise ValueError("transition arrays differ in length")

    def __len__(self) -> int:
        return len(self.s)

    def raw_states(self) -> np.ndarray:
        return self.norm.denormalize(self.s) if self.normalized else self.s


def generate_dataset(config: EnvConfig, styles: list, episodes_per_style: int, seed: int) -> Dataset:
    if episodes_per_style < 1:
        raise ValueError("episodes_per_style must be >= 1")
    rng = rng_stream(seed, "data")
    chunks = []
    for style in styles:
        kept = attempts = 0
        budget = 10 * episodes_per_style
        while kept < episodes_per_style:
            if attempts >= budget:
                raise GenerationError(f"retry budget exhausted for style offset={style.waypoint_offset}")
            attempts += 1
            start = env_reset(config, rng, jitter=True)
            ep = run_episode(lambda s: scripted_policy(style, s, config, rng), config, start)
            if ep[2].sum() < 0:
                continue
            chunks.append(ep)
            kept += 1
        log.debug("style %+.2f: kept %d of %d episodes", style.waypoint_offset, kept, attempts)
    cat = [np.concatenate([c[i] for c in chunks]) if chunks else None for i in range(5)]
    if not chunks:
        cat = [np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0, bool)]
    meta = {
        "env": config.to_dict(),
        "env_hash": config.digest(),
        "styles": [asdict(s) for s in styles],
        "seed": int(seed),
        "episodes": len(chunks),
    }
    return Dataset(*cat, norm=compute_norm_stats(cat[0], config.max_step), meta=meta)


def normalize_states(ds: Dataset) -> Dataset:
    if len(ds) == 0:
        raise ValueError("cannot normalize an empty dataset")
    raw_s, raw_s2 = ds.raw_states(), ds.norm.denormalize(ds.s_next) if ds.normalized else ds.s_next
    norm = compute_norm_stats(raw_s, ds.norm.action_scale)
    return Dataset(norm.normalize(raw_s), ds.a.copy(), ds.r.copy(), norm.normalize(raw_s2), ds.done.copy(),
                   norm=norm, meta=dict(ds.meta), normalized=True)


def _header(ds: Dataset) -> dict:
    return {
        "version": DATASET_VERSION,
        "count": len(ds),
        "state_dim": STATE_DIM,
        "action_dim": ACTION_DIM,
        "normalized": ds.normalized,
        "norm_stats": ds.norm.to_dict(),
        "meta": ds.meta,
    }


def dataset_bytes(ds: Dataset) -> bytes:
    header = json.dumps(_header(ds), sort_keys=True).encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("<Q", len(header)), header]
    for arr in (ds.s, ds.a, ds.r, ds.s_next):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(ds.done, dtype=np.uint8).tobytes())
    return b"".join(parts)


def dataset_write(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def dataset_read(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic bytes")
    if len(buf) < 16:
        raise DatasetFormatError("truncated header length")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"unreadable header: {e}") from e
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {header.get('version')}")
    n, ds_, da = header["count"], header["state_dim"], header["action_dim"]
    sizes = [n * ds_ * 8, n * da * 8, n * 8, n * ds_ * 8, n]
    off = 16 + hlen
    if len(buf) != off + sum(sizes):
        raise DatasetFormatError("file length does not match header")
    arrays = []
    for size, shape, dtype in zip(sizes, [(n, ds_), (n, da), (n,), (n, ds_), (n,)],
                                  ["<f8", "<f8", "<f8", "<f8", np.uint8]):
        arrays.append(np.frombuffer(buf, dtype=dtype, count=size // np.dtype(dtype).itemsize, offset=off)
                      .reshape(shape).copy())
        off += size
    arrays[0:4] = [a.astype(np.float64) for a in arrays[0:4]]
    arrays[4] = arrays[4].astype(bool)
    return Dataset(*arrays, norm=NormStats.from_dict(header["norm_stats"]), meta=header["meta"],
                   normalized=header["normalized"])
