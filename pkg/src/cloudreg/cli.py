"""Command-line entry point: ``cloudreg {gen,train,register,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .datagen import SHAPES, NoiseSpec, PairSpec, derive_seed, generate_dataset, read_manifest
from .geometry import (CorrespondenceSet, ParameterError, RigidTransform, mae, rmse, rotation_error,
                       translation_error)
from .io import CloudFormatError, read_cloud
from .matching import (MatchCounts, NumericalError, assignment_pairs, hard_assignment, match_counts,
                       metrics_from_counts)
from .model import PipelineConfig, predict, prepare_pair
from .pose import DegenerateError, RansacConfig, icp, kabsch, ransac_register
from .training import CheckpointError, NonFiniteGradient, TrainConfig, load_params, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cloudreg")


class ConfigError(ValueError):
    pass


def _opt_int(s):
    return None if str(s).lower() in ("", "none") else int(s)


def _opt_float(s):
    return None if str(s).lower() in ("", "none") else float(s)


def _bool(s):
    v = str(s).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default); every key may appear in a config file or as --key-name
KEYS = {
    "seed": (int, 0),
    "threads": (_opt_int, None),
    # data
    "count": (int, 100),
    "shape": (str, "composite"),
    "n_points": (int, 1024),
    "crop_keep": (_opt_int, None),
    "noise_sigma": (_opt_float, None),
    "noise_clip": (_opt_float, None),
    "rot_max": (float, 45.0),
    "trans_max": (float, 0.5),
    # network
    "d": (int, 96),
    "layers": (int, 6),
    "heads": (int, 4),
    "tau": (float, 1.0),
    "k_graph": (int, 16),
    "sinkhorn_iters": (int, 100),
    "normal_radius": (float, 0.3),
    "k_nn": (int, 128),
    "attention_scale": (str, "head"),
    "center_inputs": (_bool, True),
    # training
    "lr": (float, 1e-4),
    "epochs": (int, 30),
    "batch_size": (int, 1),
    "dtype": (str, "float32"),
    "val_fraction": (float, 0.2),
    # pose
    "k_c": (int, 256),
    "max_iters": (int, 500),
    "inlier_threshold": (float, 0.05),
    "ransac_confidence": (float, 0.999),
}

PRESETS = {
    "clean": {},
    "partial": {"crop_keep": 768},
    "partial-noisy": {"crop_keep": 768, "noise_sigma": 0.1, "noise_clip": 0.05, "epochs": 80},
    "toy": {"n_points": 64, "count": 200, "normal_radius": 0.5},
}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse(key, value, f"{path}:{lineno}")
    return out


def _parse(key, value, where):
    try:
        return KEYS[key][0](value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


@dataclass
class RunConfig:
    """Resolved settings (CLI > file > preset > default) with cross-field checks done up front."""

    values: dict
    pair_spec: PairSpec = field(init=False)
    pipeline: PipelineConfig = field(init=False)
    train: TrainConfig = field(init=False)
    ransac: RansacConfig = field(init=False)

    def __post_init__(self):
        v = self.values
        if v["shape"] not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}")
        if (v["noise_sigma"] is None) != (v["noise_clip"] is None):
            raise ConfigError("noise_sigma and noise_clip must be given together")
        if v["dtype"] not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if v["count"] < 1:
            raise ConfigError("count must be positive")
        try:
            noise = None if v["noise_sigma"] is None else NoiseSpec(v["noise_sigma"], v["noise_clip"])
            self.pair_spec = PairSpec(v["n_points"], (0.0, v["rot_max"]), (0.0, v["trans_max"]),
                                      v["crop_keep"], noise, v["seed"])
            self.pipeline = PipelineConfig(d=v["d"], layers=v["layers"], heads=v["heads"], tau=v["tau"],
                                           k_graph=v["k_graph"], normal_radius=v["normal_radius"],
                                           k_nn=v["k_nn"], sinkhorn_iters=v["sinkhorn_iters"],
                                           scale=v["attention_scale"], center_inputs=v["center_inputs"])
            self.train = TrainConfig(lr=v["lr"], epochs=v["epochs"], batch_size=v["batch_size"],
                                     seed=v["seed"], val_fraction=v["val_fraction"], dtype=v["dtype"])
            self.ransac = RansacConfig(k_c=v["k_c"], max_iters=v["max_iters"],
                                       inlier_threshold=v["inlier_threshold"], seed=v["seed"],
                                       confidence=v["ransac_confidence"])
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        if self.pipeline.scale not in ("head", "model"):
            raise ConfigError("attention_scale must be 'head' or 'model'")

    @classmethod
    def resolve(cls, args: argparse.Namespace) -> "RunConfig":
        values = {k: default for k, (_, default) in KEYS.items()}
        if getattr(args, "preset", None):
            values.update(PRESETS[args.preset])
        if getattr(args, "config", None):
            values.update(read_config_file(args.config))
        for key in KEYS:
            cli = getattr(args, key, None)
            if cli is not None:
                values[key] = _parse(key, cli, f"--{key.replace('_', '-')}")
        return cls(values)


# --------------------------------------------------------------------------- #
# formatting

def fmt(v, unit: str = "") -> str:
    if v is None:
        return "n/a"
    return f"{v:.6g}" + (f" {unit}" if unit else "")


def print_table(rows: list[tuple[str, str]]) -> None:
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k.ljust(width)}  {v}")


def print_record(record: dict) -> None:
    print(json.dumps(record, sort_keys=False, separators=(",", ":")))


# --------------------------------------------------------------------------- #
# commands

def cmd_gen(args, cfg: RunConfig) -> int:
    sources = [Path(s) for s in args.source] if args.source else None
    manifest = generate_dataset(args.out, cfg.values["count"], cfg.pair_spec, cfg.values["shape"], sources=sources)
    pairs = read_manifest(manifest)
    overlap = [float(np.mean(p.gt.source_to_target >= 0)) for _, p in pairs]
    print_table([("pairs", str(len(pairs))),
                 ("points per cloud", str(len(pairs[0][1].X))),
                 ("mean overlap", fmt(100 * float(np.mean(overlap)), "%")),
                 ("min overlap", fmt(100 * float(np.min(overlap)), "%")),
                 ("manifest", str(manifest))])
    print_record({"pairs": len(pairs), "mean_overlap_pct": round(100 * float(np.mean(overlap)), 6),
                  "manifest": str(manifest)})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    pairs = [p for _, p in read_manifest(_existing(args.manifest))]
    if not pairs:
        raise ConfigError(f"{args.manifest}: empty manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(pairs, cfg.train, cfg.pipeline, checkpoint_dir=out, log_path=out / "train.log")
    last = result.history[-1]
    print_table([("epochs", str(last.epoch)),
                 ("train loss", fmt(last.train_loss)),
                 ("val loss", fmt(last.val_loss)),
                 ("val F1", fmt(last.f1, "%")),
                 ("checkpoint", str(out / "last.params"))])
    return EXIT_OK


def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    return path


def _predicted_correspondences(pair, net, use_normals: bool):
    C = predict(pair, net, use_normals).numpy()
    A = hard_assignment(C)
    pairs, scores = assignment_pairs(A, C)
    return A, CorrespondenceSet(pairs, scores)


def _estimate(estimator: str, corr: CorrespondenceSet, X, Y, cfg: RunConfig):
    """Returns (transform, inlier count or None)."""
    if estimator == "icp":
        return icp(X, Y).transform, None
    if estimator == "svd":
        if len(corr) < 3:
            raise DegenerateError(f"{len(corr)} correspondences, need 3")
        return kabsch(X[corr.pairs[:, 0]], Y[corr.pairs[:, 1]]), None
    res = ransac_register(corr, X, Y, cfg.ransac)
    return res.transform, int(res.inliers.sum())


def cmd_register(args, cfg: RunConfig) -> int:
    X = read_cloud(_existing(args.x)).points
    Y = read_cloud(_existing(args.y)).points
    n_matches = None
    corr = CorrespondenceSet(np.zeros((0, 2)))
    if args.estimator != "icp":
        if not args.checkpoint:
            raise ConfigError(f"--estimator {args.estimator} needs --checkpoint")
        net = load_params(_existing(args.checkpoint))
        pair = prepare_pair(X, Y, None, net.cfg, net.slack.dtype)
        _, corr = _predicted_correspondences(pair, net, not args.no_normals)
        n_matches = len(corr)
    T, inliers = _estimate(args.estimator, corr, X, Y, cfg)
    R = T.rotation.reshape(-1).tolist()
    t = T.translation.tolist()
    print_table([("estimator", args.estimator),
                 ("R (row-major)", " ".join(fmt(v) for v in R)),
                 ("t", " ".join(fmt(v) for v in t) + " m"),
                 ("matches", "n/a" if n_matches is None else str(n_matches)),
                 ("inliers", "n/a" if inliers is None else str(inliers))])
    print_record({"estimator": args.estimator, "rotation": [float(f"{v:.6g}") for v in R],
                  "translation_m": [float(f"{v:.6g}") for v in t], "matches": n_matches, "inliers": inliers})
    return EXIT_OK


def contaminate(corr: CorrespondenceSet, fraction: float, seed: int) -> CorrespondenceSet:
    """Reassign the targets of a random ``fraction`` of pairs by a cyclic shift, so each becomes wrong."""
    n = len(corr)
    k = int(round(fraction * n))
    if k < 2:
        return corr
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    pairs = corr.pairs.copy()
    pairs[chosen, 1] = np.roll(pairs[chosen, 1], 1)
    return CorrespondenceSet(pairs, corr.scores)


def cmd_eval(args, cfg: RunConfig) -> int:
    entries = read_manifest(_existing(args.manifest))
    if not entries:
        raise ConfigError(f"{args.manifest}: empty manifest")
    net = None
    if not args.oracle_matches and args.estimator != "icp":
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --oracle-matches or --estimator icp")
        net = load_params(_existing(args.checkpoint))
    use_normals = args.ablate is None
    rot_err, trans_err = [], []
    counts = MatchCounts(0, 0, 0, 0)
    failures = 0
    for k, (pid, pair) in enumerate(entries):
        X, Y = pair.X.points, pair.Y.points
        if args.oracle_matches:
            corr = CorrespondenceSet(pair.gt.pairs(), np.ones(len(pair.gt.pairs())))
        elif net is not None:
            prepared = prepare_pair(X, Y, pair.gt, net.cfg, net.slack.dtype)
            A, corr = _predicted_correspondences(prepared, net, use_normals)
            counts = counts + match_counts(A, pair.gt)
        else:
            corr = CorrespondenceSet(np.zeros((0, 2)))
        if args.outliers:
            corr = contaminate(corr, args.outliers, derive_seed(cfg.values["seed"], k))
        try:
            T, _ = _estimate(args.estimator, corr, X, Y, cfg)
        except DegenerateError as exc:
            log.warning("%s: %s; scoring identity transform", pid, exc)
            T, failures = RigidTransform.identity(), failures + 1
        rot_err.append(rotation_error(T.rotation, pair.T_gt.rotation))
        trans_err.append(translation_error(T.translation, pair.T_gt.translation))
    m = metrics_from_counts(counts) if net is not None else None
    record = {
        "pairs": len(entries),
        "estimator": args.estimator,
        "ablate": args.ablate,
        "oracle_matches": bool(args.oracle_matches),
        "RMSE_R_deg": rmse(rot_err), "MAE_R_deg": mae(rot_err),
        "RMSE_t_m": rmse(trans_err), "MAE_t_m": mae(trans_err),
        "P": m.precision if m else None, "A": m.accuracy if m else None,
        "R": m.recall if m else None, "F1": m.f1 if m else None,
        "failures": failures,
    }
    rows = [("pairs", str(len(entries))),
            ("RMSE(R)", fmt(record["RMSE_R_deg"], "deg")),
            ("MAE(R)", fmt(record["MAE_R_deg"], "deg")),
            ("RMSE(t)", fmt(record["RMSE_t_m"], "m")),
            ("MAE(t)", fmt(record["MAE_t_m"], "m"))]
    if m is not None:
        rows += [("P", fmt(m.precision, "%")), ("A", fmt(m.accuracy, "%")),
                 ("R", fmt(m.recall, "%")), ("F1", fmt(m.f1, "%"))]
    rows.append(("pose failures", str(failures)))
    print_table(rows)
    print_record({k: (float(f"{v:.6g}") if isinstance(v, float) else v) for k, v in record.items()})
    if args.report:
        Path(args.report).write_text(json.dumps(record, separators=(",", ":")) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# argument parsing

def _add_keys(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V")


DATA_KEYS = ["count", "shape", "n_points", "crop_keep", "noise_sigma", "noise_clip", "rot_max", "trans_max"]
NET_KEYS = ["d", "layers", "heads", "tau", "k_graph", "sinkhorn_iters", "normal_radius", "k_nn",
            "attention_scale", "center_inputs"]
TRAIN_KEYS = ["lr", "epochs", "batch_size", "dtype", "val_fraction"]
POSE_KEYS = ["k_c", "max_iters", "inlier_threshold", "ransac_confidence"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--preset", choices=sorted(PRESETS))
    _add_keys(common, ["seed", "threads"])

    parser = argparse.ArgumentParser(prog="cloudreg", description="Learned point cloud registration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic pair dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--source", nargs="*", help="XYZ/PLY clouds to sample from instead of synthetic shapes")
    _add_keys(g, DATA_KEYS)

    t = sub.add_parser("train", parents=[common], help="train on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="directory for checkpoints and train.log")
    _add_keys(t, NET_KEYS + TRAIN_KEYS)

    r = sub.add_parser("register", parents=[common], help="register two cloud files")
    r.add_argument("x")
    r.add_argument("y")
    r.add_argument("--checkpoint")
    r.add_argument("--estimator", choices=["ransac", "svd", "icp"], default="ransac")
    r.add_argument("--no-normals", action="store_true", help="disable the normal-angle key bias")
    _add_keys(r, POSE_KEYS)

    e = sub.add_parser("eval", parents=[common], help="pose and matching metrics over a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--estimator", choices=["ransac", "svd", "icp"], default="ransac")
    e.add_argument("--oracle-matches", action="store_true", help="use ground-truth correspondences")
    e.add_argument("--ablate", choices=["no-normals", "mdgat-attention-off"])
    e.add_argument("--outliers", type=float, default=0.0, help="fraction of correspondences made wrong")
    e.add_argument("--report", help="also write the JSON record to this file")
    _add_keys(e, POSE_KEYS)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "register": cmd_register, "eval": cmd_eval}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.resolve(args)
        if getattr(args, "outliers", 0) and not 0 <= args.outliers <= 1:
            raise ConfigError("--outliers must lie in [0, 1]")
        if cfg.values["threads"]:
            torch.set_num_threads(cfg.values["threads"])
        torch.manual_seed(cfg.values["seed"])
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ParameterError) as exc:
        print(f"cloudreg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, NonFiniteGradient, DegenerateError, ArithmeticError) as exc:
        print(f"cloudreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CloudFormatError, CheckpointError, ValueError) as exc:
        print(f"cloudreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
