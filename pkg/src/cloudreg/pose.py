"""Rigid pose from correspondences: weighted Kabsch, RANSAC and an ICP baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CorrespondenceSet, ParameterError, RigidTransform, squared_distances


class DegenerateError(ValueError):
    """Point configuration does not determine a rotation (collinear or coincident)."""


@dataclass(frozen=True)
class RansacConfig:
    k_c: int = 256
    max_iters: int = 500
    inlier_threshold: float = 0.05
    sample_size: int = 3
    seed: int = 0
    confidence: float = 0.999

    def __post_init__(self):
        if self.sample_size < 3:
            raise ParameterError("sample_size must be at least 3")
        if self.k_c < self.sample_size:
            raise ParameterError("k_c must be at least sample_size")
        if self.max_iters < 1 or self.inlier_threshold <= 0:
            raise ParameterError("max_iters >= 1 and inlier_threshold > 0 required")
        if not 0 < self.confidence <= 1:
            raise ParameterError("confidence must lie in (0, 1]")


def _rank_check(centered: np.ndarray, rel_tol: float = 1e-10) -> None:
    s = np.linalg.svd(centered, compute_uv=False)
    if s.size < 2 or s[0] == 0 or s[1] <= rel_tol * s[0]:
        raise DegenerateError("correspondences are collinear or coincident")


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform with R @ src_k + t ~ dst_k."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise DegenerateError("need at least 3 paired points")
    w = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0) or w.sum() <= 0:
        raise ParameterError("weights must be nonnegative and not all zero")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    cs, cd = src - mu_s, dst - mu_d
    _rank_check(cs * np.sqrt(w)[:, None])
    H = (cs * w[:, None]).T @ cd
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


def residuals(T: RigidTransform, src, dst) -> np.ndarray:
    return np.linalg.norm(T.apply(src) - np.asarray(dst), axis=1)


@dataclass
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    iterations: int
    correspondences: np.ndarray = field(repr=False)


def _needed_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio ** sample_size
    if p_good <= 0:
        return math.inf
    if confidence >= 1.0:
        return math.inf
    return math.log(1 - confidence) / math.log1p(-p_good)


def ransac_register(corr: CorrespondenceSet, X, Y, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Robust pose from the ``k_c`` best-scored correspondences.

    ``inliers`` is a mask over the kept correspondences (``result.correspondences``).
    Hypotheses are ranked by inlier count, then mean squared inlier residual, then
    iteration index. Sampling stops early once the adaptive bound for
    ``cfg.confidence`` is met.
    """
    px = np.asarray(getattr(X, "points", X), dtype=np.float64)
    py = np.asarray(getattr(Y, "points", Y), dtype=np.float64)
    corr.check_bounds(px.shape[0], py.shape[0])
    pairs = corr.pairs
    if corr.scores is not None:
        order = np.argsort(-corr.scores, kind="stable")
        pairs = pairs[order]
    pairs = pairs[:cfg.k_c]
    if pairs.shape[0] < cfg.sample_size:
        raise DegenerateError(f"{pairs.shape[0]} correspondences, need {cfg.sample_size}")
    src, dst = px[pairs[:, 0]], py[pairs[:, 1]]
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold

    best = None  # (count, -mse, -iteration), mask
    needed = math.inf
    it = 0
    while it < cfg.max_iters and it < needed:
        idx = rng.choice(pairs.shape[0], size=cfg.sample_size, replace=False)
        it += 1
        try:
            T = kabsch(src[idx], dst[idx])
        except DegenerateError:
            continue
        res = residuals(T, src, dst)
        mask = res < thr
        count = int(mask.sum())
        mse = float(np.mean(res[mask] ** 2)) if count else math.inf
        key = (count, -mse, -it)
        if best is None or key > best[0]:
            best = (key, mask)
            needed = _needed_iterations(count / pairs.shape[0], cfg.sample_size, cfg.confidence)
    if best is None:
        raise DegenerateError("every RANSAC sample was degenerate")
    mask = best[1]
    T = kabsch(src[mask], dst[mask])
    mask = residuals(T, src, dst) < thr
    if mask.sum() >= 3:
        try:
            T = kabsch(src[mask], dst[mask])
        except DegenerateError:
            pass
    return RansacResult(T, residuals(T, src, dst) < thr, it, pairs)


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    mse_history: list


def icp(X, Y, max_iters: int = 50, tol: float = 1e-10, init: Optional[RigidTransform] = None) -> IcpResult:
    """Point-to-point ICP with exhaustive nearest neighbors.

    ``mse_history[k]`` is the mean squared matching distance after the k-th
    matching step, which never increases.
    """
    px = np.asarray(getattr(X, "points", X), dtype=np.float64)
    py = np.asarray(getattr(Y, "points", Y), dtype=np.float64)
    if px.shape[0] == 0 or py.shape[0] == 0:
        raise ParameterError("ICP needs non-empty clouds")
    T = init or RigidTransform.identity()
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        moved = T.apply(px)
        d2 = squared_distances(moved, py)
        nn = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(px.shape[0]), nn].mean()))
        try:
            T_new = kabsch(px, py[nn])
        except DegenerateError:
            break
        delta = np.linalg.norm(T_new.rotation - T.rotation) + np.linalg.norm(T_new.translation - T.translation)
        T = T_new
        if delta < tol:
            break
    return IcpResult(T, it, history)
