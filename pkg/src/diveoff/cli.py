"""Command-line entry points: gen-data, train, eval, adapt, dataset-entropy, replay.

Every command is a pure function of its flags, the optional TOML config file,
the bytes of its input files and ``--seed``. Each run writes a JSON manifest
next to its primary output recording the effective configuration and the
SHA-256 of every input and output file.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .algorithm import ALGOS, TrainConfig, TrainingDiverged, train
from .env import (
    DatasetFormatError,
    EnvConfig,
    GenerationError,
    NormStats,
    Variant,
    dataset_read,
    dataset_write,
    default_styles,
    generate_dataset,
    normalize_states,
)
from .evaluation import (
    GmmFitError,
    entropy_upper_bound,
    evaluate,
    few_shot_adapt,
    gmm_fit_bic,
)
from .models import CheckpointFormatError, checkpoint_read, checkpoint_write
from .numerics import NonFiniteError, rng_stream

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("diveoff")

CKPT_NAME = "ckpt.bin"
METRICS_NAME = "metrics.jsonl"
ENTROPY_BATCHES = 5
ENTROPY_BATCH_SIZE = 5000


class UsageError(Exception):
    """Bad flags or config contents; maps to exit code 2."""


class RunError(Exception):
    """Runtime failure; maps to exit code 1."""


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise RunError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}") from e
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise UsageError(f"config must be flat key = value pairs; found tables {nested}")
    return data


def train_config(args) -> TrainConfig:
    values = load_config(args.config)
    if args.steps is not None:
        values["total_steps"] = args.steps
    values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from e


def write_manifest(path, command: str, argv: list, config: dict, seed, inputs: list, outputs: list,
                   started: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "tool_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    atomic_write_text(path, dump_json(manifest))


def read_manifest(path) -> dict:
    """Load a manifest and check that its inputs still hash to the recorded values."""
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    for p, digest in manifest["inputs"].items():
        if not Path(p).exists():
            raise RunError(f"manifest input {p} is missing")
        if sha256_file(p) != digest:
            raise RunError(f"manifest input {p} changed since the run")
    return manifest


def read_dataset(path):
    try:
        return dataset_read(path)
    except OSError as e:
        raise RunError(f"cannot read dataset {path}: {e}") from e


def read_checkpoint(path):
    try:
        ckpt = checkpoint_read(path)
    except OSError as e:
        raise RunError(f"cannot read checkpoint {path}: {e}") from e
    for key in ("env", "norm_stats"):
        if key not in ckpt.header:
            raise RunError(f"checkpoint {path} lacks '{key}' in its header")
    try:
        env = EnvConfig.from_dict(ckpt.header["env"])
        norm = NormStats.from_dict(ckpt.header["norm_stats"])
    except (TypeError, ValueError, KeyError) as e:
        raise RunError(f"checkpoint {path} has an inconsistent header: {e}") from e
    if norm.mean.shape != (ckpt.header["state_dim"],):
        raise RunError("checkpoint normalization stats do not match the state dimension")
    return ckpt, env, norm


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv) -> dict:
    started = time.time()
    if args.styles < 1 or args.episodes < 1:
        raise UsageError("--styles and --episodes must be >= 1")
    cfg = EnvConfig()
    try:
        ds = normalize_states(generate_dataset(cfg, default_styles(args.styles), args.episodes, args.seed))
    except GenerationError as e:
        raise RunError(str(e)) from e
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_write(ds, out)
    config = {"env": cfg.to_dict(), "styles": args.styles, "episodes_per_style": args.episodes}
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", argv, config, args.seed, [], [out],
                   started)
    return {"out": str(out), "transitions": len(ds), "sha256": sha256_file(out)}


def cmd_train(args, argv) -> dict:
    started = time.time()
    cfg = train_config(args)
    data = Path(args.data)
    ds = read_dataset(data)
    if not ds.normalized:
        ds = normalize_states(ds)
    env = ds.meta.get("env")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, metrics_path = out / CKPT_NAME, out / METRICS_NAME

    def header(step):
        return {"algo": args.algo, "step": step, "config": cfg.to_dict(), "config_hash": cfg.digest(),
                "env": env if env is not None else EnvConfig().to_dict(), "norm_stats": ds.norm.to_dict(),
                "dataset_sha256": sha256_file(data)}

    with open(metrics_path, "w", encoding="utf-8") as mf:
        def emit(rec):
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
            mf.flush()

        try:
            state = train(ds, cfg, args.algo, on_metrics=emit)
        except TrainingDiverged as e:
            checkpoint_write(e.last_good, header(e.step), ckpt_path)
            raise RunError(f"{e}; last good checkpoint kept at {ckpt_path}") from e
    checkpoint_write(state.models, header(state.step), ckpt_path)
    write_manifest(out / "manifest.json", "train", argv, {"algo": args.algo, **cfg.to_dict()}, args.seed,
                   [data], [ckpt_path, metrics_path], started)
    return {"checkpoint": str(ckpt_path), "metrics": str(metrics_path), "steps": state.step,
            "sha256": sha256_file(ckpt_path)}


def cmd_eval(args, argv) -> dict:
    started = time.time()
    if args.episodes < 1 or args.z_grid < 1:
        raise UsageError("--episodes and --z-grid must be >= 1")
    if args.bandwidth is not None and args.bandwidth <= 0:
        raise UsageError("--bandwidth must be positive")
    ckpt, env, norm = read_checkpoint(args.ckpt)
    report = evaluate(ckpt.models, norm, env, episodes=args.episodes, grid=args.z_grid, seed=args.seed,
                      h=args.bandwidth)
    report["meta"]["checkpoint_sha256"] = sha256_file(args.ckpt)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, dump_json(report))
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", argv,
                   {"episodes": args.episodes, "z_grid": args.z_grid, "bandwidth": args.bandwidth}, args.seed,
                   [Path(args.ckpt)], [out], started)
    return report["summary"]


def cmd_adapt(args, argv) -> dict:
    started = time.time()
    if args.budget < 1:
        raise UsageError("--budget must be >= 1")
    ckpt, env, norm = read_checkpoint(args.ckpt)
    env = env.with_variant(Variant(args.variant))
    res = few_shot_adapt(ckpt.models, norm, env, budget=args.budget, seed=args.seed)
    report = {"meta": {"variant": args.variant, "budget": args.budget, "seed": args.seed,
                       "eval_episodes": len(res.adapted_returns), "checkpoint_sha256": sha256_file(args.ckpt)},
              "result": res.to_dict()}
    summary = {"z_max": res.z_max.tolist(), "probe_mean": res.probe_mean, "adapted_mean": res.adapted_mean}
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out, dump_json(report))
        write_manifest(out.with_name(out.name + ".manifest.json"), "adapt", argv,
                       {"variant": args.variant, "budget": args.budget}, args.seed, [Path(args.ckpt)], [out],
                       started)
    return summary


def dataset_entropy(ds, max_components: int, seed: int, batches: int = ENTROPY_BATCHES,
                    batch_size: int = ENTROPY_BATCH_SIZE) -> dict:
    """Entropy bound of raw states over several random batches."""
    states = ds.raw_states()
    if len(states) == 0:
        raise RunError("dataset is empty")
    rng = rng_stream(seed, "entropy")
    values, comps = [], []
    for b in range(batches):
        idx = rng.choice(len(states), size=batch_size, replace=len(states) < batch_size)
        gmm = gmm_fit_bic(states[idx], max_components, seed + b)
        values.append(entropy_upper_bound(gmm))
        comps.append(gmm.n_components)
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "values": values,
            "components": comps, "batch_size": batch_size, "batches": batches}


def cmd_dataset_entropy(args, argv) -> dict:
    started = time.time()
    if args.max_components < 1:
        raise UsageError("--max-components must be >= 1")
    ds = read_dataset(args.data)
    try:
        result = dataset_entropy(ds, args.max_components, args.seed)
    except (GmmFitError, ValueError) as e:
        raise RunError(f"mixture fit failed: {e}") from e
    result.update({"data_sha256": sha256_file(args.data), "max_components": args.max_components,
                   "seed": args.seed})
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out, dump_json(result))
        write_manifest(out.with_name(out.name + ".manifest.json"), "dataset-entropy", argv,
                       {"max_components": args.max_components}, args.seed, [Path(args.data)], [out], started)
    return result


def cmd_replay(args, argv) -> dict:
    """Re-run the command recorded in a manifest and compare output hashes."""
    manifest = read_manifest(args.manifest)
    code = main(manifest["argv"])
    if code != 0:
        raise RunError(f"replayed command exited with {code}")
    mismatched = [p for p, d in manifest["outputs"].items() if sha256_file(p) != d]
    if mismatched:
        raise RunError(f"replay produced different outputs: {mismatched}")
    return {"replayed": manifest["command"], "outputs_match": True}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diveoff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"diveoff {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and normalize the offline dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--styles", type=int, default=4, help="number of arc styles (default 4)")
    g.add_argument("--episodes", type=int, default=250, help="episodes per style (default 250)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train DiveOff or a baseline")
    t.add_argument("--algo", choices=ALGOS, default="diveoff")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--steps", type=int, default=None, help="overrides total_steps")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", default=None, help="flat TOML file of training settings")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out the latent grid and score diversity")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--z-grid", type=int, default=3, help="grid side; 3 gives 9 latent values")
    e.add_argument("--bandwidth", type=float, default=None, help="fixed kernel bandwidth (default: median)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("adapt", help="few-shot latent selection in a wall variant")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--variant", choices=[v.value for v in Variant if v is not Variant.NONE], required=True)
    a.add_argument("--budget", type=int, default=25)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", default=None)
    a.set_defaults(func=cmd_adapt)

    h = sub.add_parser("dataset-entropy", help="GMM entropy bound of the dataset states")
    h.add_argument("--data", required=True)
    h.add_argument("--max-components", type=int, default=10)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--report", default=None)
    h.set_defaults(func=cmd_dataset_entropy)

    r = sub.add_parser("replay", help="re-run a manifest and verify its output hashes")
    r.add_argument("--manifest", required=True)
    r.set_defaults(func=cmd_replay)
    return p


def _setup_logging() -> None:
    level = os.environ.get("DIVEOFF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        result = args.func(args, argv)
    except UsageError as e:
        print(f"diveoff {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (RunError, DatasetFormatError, CheckpointFormatError, NonFiniteError, GmmFitError, OSError) as e:
        print(f"diveoff {args.command}: error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
