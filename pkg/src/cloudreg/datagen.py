"""Synthetic shapes and registration pairs with cropping and clipped noise."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import ParameterError, PointCloud, RigidTransform, euler_to_matrix
from .io import read_cloud, write_xyz
from .matching import GroundTruthMatches

SHAPES = ("plane", "sphere", "torus", "box", "composite")


def derive_seed(base_seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{base_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus(rng, n, major=1.0, minor=0.35):
    u = rng.uniform(0, 2 * np.pi, n)
    v = rng.uniform(0, 2 * np.pi, n)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _box(rng, n, half=(1.0, 1.0, 1.0)):
    half = np.asarray(half, dtype=np.float64)
    areas = 4 * np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    side = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = side * half[axis]
    return pts


def synth_shapes(kind: str, n: int, seed: int = 0) -> PointCloud:
    if n < 8:
        raise ParameterError("need at least 8 points")
    rng = np.random.default_rng(seed)
    if kind == "plane":
        xy = rng.uniform(-1, 1, size=(n, 2))
        pts = np.column_stack([xy, np.zeros(n)])
    elif kind == "sphere":
        pts = _sphere(rng, n)
    elif kind == "torus":
        pts = _torus(rng, n)
    elif kind == "box":
        pts = _box(rng, n)
    elif kind == "composite":
        # tilted torus plus an off-centre cuboid: no rotational symmetry left
        n_torus = n // 2
        torus = _torus(rng, n_torus, major=0.5, minor=0.18) @ euler_to_matrix((30.0, 0.0, 0.0)).T
        box = _box(rng, n - n_torus, half=(0.35, 0.2, 0.12)) @ euler_to_matrix((0.0, 20.0, 35.0)).T
        pts = np.vstack([torus + [-0.35, 0.0, 0.0], box + [0.45, 0.3, -0.15]])
    else:
        raise ParameterError(f"unknown shape {kind!r}; expected one of {SHAPES}")
    return PointCloud(pts)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.1
    clip: float = 0.05


@dataclass(frozen=True)
class PairSpec:
    n_points: int = 1024
    rot_range_deg: tuple = (0.0, 45.0)
    trans_range_m: tuple = (0.0, 0.5)
    crop_keep: Optional[int] = None
    noise: Optional[NoiseSpec] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 3:
            raise ParameterError("n_points must be at least 3")
        if self.crop_keep is not None and not 3 <= self.crop_keep <= self.n_points:
            raise ParameterError("crop_keep must lie in [3, n_points]")
        if self.noise is not None and (self.noise.sigma < 0 or self.noise.clip < 0):
            raise ParameterError("noise sigma and clip must be nonnegative")


@dataclass
class RegistrationPair:
    X: PointCloud
    Y: PointCloud
    T_gt: RigidTransform
    gt: GroundTruthMatches


def unit_sphere(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    return centered / radius if radius > 0 else centered


def random_transform(rng, rot_range_deg=(0.0, 45.0), trans_range_m=(0.0, 0.5)) -> RigidTransform:
    angles = rng.uniform(rot_range_deg[0], rot_range_deg[1], size=3)
    t = rng.uniform(trans_range_m[0], trans_range_m[1], size=3)
    return RigidTransform(euler_to_matrix(angles), t)


def _crop(points: np.ndarray, keep: int, rng) -> np.ndarray:
    anchor = points[rng.integers(points.shape[0])]
    d2 = ((points - anchor) ** 2).sum(-1)
    return np.sort(np.argsort(d2, kind="stable")[:keep])


def _noise(shape, spec: NoiseSpec, rng) -> np.ndarray:
    return np.clip(rng.normal(0.0, spec.sigma, size=shape), -spec.clip, spec.clip)


def make_pair(source: PointCloud, spec: PairSpec) -> RegistrationPair:
    """Build (X, Y, T_gt, gt) with Y a permuted, transformed copy of X.

    Ground truth comes from index bookkeeping: x_i and y_j match when both
    descend from the same subsampled source point and survived their crops.
    """
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    if src.shape[0] < spec.n_points:
        raise ParameterError(f"source has {src.shape[0]} points, spec needs {spec.n_points}")
    rng = np.random.default_rng(spec.seed)
    pick = np.sort(rng.choice(src.shape[0], size=spec.n_points, replace=False))
    X = unit_sphere(src[pick])
    T = random_transform(rng, spec.rot_range_deg, spec.trans_range_m)
    perm = rng.permutation(spec.n_points)  # y_k = T(x_perm[k])
    Y = T.apply(X)[perm]
    x_ids = np.arange(spec.n_points)
    y_ids = perm
    if spec.crop_keep is not None:
        kx = _crop(X, spec.crop_keep, rng)
        ky = _crop(Y, spec.crop_keep, rng)
        X, x_ids = X[kx], x_ids[kx]
        Y, y_ids = Y[ky], y_ids[ky]
    if spec.noise is not None:
        X = X + _noise(X.shape, spec.noise, rng)
        Y = Y + _noise(Y.shape, spec.noise, rng)
    where_x = np.full(spec.n_points, -1, dtype=np.int64)
    where_x[x_ids] = np.arange(x_ids.size)
    t2s = where_x[y_ids]
    s2t = np.full(x_ids.size, -1, dtype=np.int64)
    s2t[t2s[t2s >= 0]] = np.flatnonzero(t2s >= 0)
    return RegistrationPair(PointCloud(X), PointCloud(Y), T, GroundTruthMatches(s2t, t2s))


# --------------------------------------------------------------------------- #
# presets and manifests

PRESETS = {
    "clean": dict(n_points=1024),
    "partial": dict(n_points=1024, crop_keep=768),
    "partial-noisy": dict(n_points=1024, crop_keep=768, noise=NoiseSpec(0.1, 0.05)),
    "toy": dict(n_points=64),
}


def preset_spec(name: str, **overrides) -> PairSpec:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return PairSpec(**kw)


@dataclass
class ManifestRecord:
    pair_id: str
    x: str
    y: str
    rotation: list
    translation: list
    source_to_target: list
    target_to_source: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def generate_dataset(out_dir, count: int, spec: PairSpec, shape: str = "composite",
                     source_points: Optional[int] = None, sources=None) -> Path:
    """Write ``count`` pairs as XYZ files plus ``manifest.jsonl``; returns the manifest path.

    Pair k uses shape seed and pair seed both derived from ``spec.seed`` and k.
    ``sources`` may list user-supplied cloud files, cycled over pairs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    lines = []
    for k in range(count):
        seed = derive_seed(spec.seed, k)
        if sources:
            source = read_cloud(sources[k % len(sources)])
        else:
            source = synth_shapes(shape, source_points or spec.n_points, seed)
        pair = make_pair(source, replace(spec, seed=seed))
        pid = f"pair_{k:05d}"
        write_xyz(out / f"{pid}_x.xyz", pair.X)
        write_xyz(out / f"{pid}_y.xyz", pair.Y)
        rec = ManifestRecord(pid, f"{pid}_x.xyz", f"{pid}_y.xyz",
                             pair.T_gt.rotation.reshape(-1).tolist(), pair.T_gt.translation.tolist(),
                             pair.gt.source_to_target.tolist(), pair.gt.target_to_source.tolist())
        lines.append(rec.to_json())
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[str, RegistrationPair]]:
    path = Path(path)
    base = path.parent
    pairs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                X = read_cloud(base / rec["x"])
                Y = read_cloud(base / rec["y"])
                T = RigidTransform(np.reshape(rec["rotation"], (3, 3)), rec["translation"])
                s2t = np.asarray(rec["source_to_target"], dtype=np.int64)
                t2s = rec.get("target_to_source")
                if not t2s:
                    t2s = np.full(len(Y), -1, dtype=np.int64)
                    t2s[s2t[s2t >= 0]] = np.flatnonzero(s2t >= 0)
                gt = GroundTruthMatches(s2t, t2s)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
            pairs.append((rec["pair_id"], RegistrationPair(X, Y, T, gt)))
    return pairs
