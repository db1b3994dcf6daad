"""PCA normals with density-based sign selection and the sinusoidal normal-angle embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import ParameterError, PointCloud, squared_distances

DEFAULT_RADIUS = 0.3
DEFAULT_K_NN = 128
DEFAULT_TAU = 1.0


@dataclass(frozen=True)
class NormalField:
    """Unit normals plus per-point diagnostics.

    ``sign_sums[i]`` is sum_j z_i . (x_i - x_j) over the neighborhood, which the
    sign rule keeps non-negative. ``ambiguous`` marks points whose sum is zero up
    to round-off (e.g. perfectly planar neighborhoods), where the sign carries no
    information.
    """

    vectors: np.ndarray
    degenerate: np.ndarray
    ambiguous: np.ndarray
    sign_sums: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def reliable(self) -> np.ndarray:
        return ~(self.degenerate | self.ambiguous)


def estimate_normals(cloud, r: float = DEFAULT_RADIUS, k_nn: int = DEFAULT_K_NN) -> NormalField:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if n < 3:
        raise ParameterError("normal estimation needs at least 3 points")
    if r <= 0:
        raise ParameterError("radius must be positive")
    d2 = squared_distances(pts, pts)
    order = np.argsort(d2, axis=1, kind="stable")
    vectors = np.tile([0.0, 0.0, 1.0], (n, 1))
    degenerate = np.zeros(n, dtype=bool)
    ambiguous = np.zeros(n, dtype=bool)
    sums = np.zeros(n)
    for i in range(n):
        row = order[i]
        nbrs = row[d2[i, row] <= r * r][:k_nn]
        if nbrs.size < 3:
            degenerate[i] = True
            continue
        local = pts[nbrs]
        centered = local - local.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered / nbrs.size)
        if evals[2] <= 0 or evals[1] <= 1e-12 * evals[2]:
            degenerate[i] = True
            continue
        normal = evecs[:, 0]
        s = float(((pts[i] - local) @ normal).sum())
        if s < 0:
            normal, s = -normal, -s
        scale = np.sqrt(d2[i, nbrs].max())
        ambiguous[i] = s <= 1e-9 * nbrs.size * scale
        vectors[i] = normal
        sums[i] = s
    return NormalField(vectors, degenerate, ambiguous, sums)


def normal_angle(z_i, z_j):
    """Angle(s) in radians between unit normals; broadcasts over leading axes."""
    dot = np.sum(np.asarray(z_i, dtype=np.float64) * np.asarray(z_j, dtype=np.float64), axis=-1)
    return np.arccos(np.clip(dot, -1.0, 1.0))


def pairwise_normal_angles(normals: np.ndarray) -> np.ndarray:
    z = np.asarray(normals, dtype=np.float64)
    return np.arccos(np.clip(z @ z.T, -1.0, 1.0))


def _frequencies(d: int, tau: float) -> np.ndarray:
    if d <= 0 or d % 2:
        raise ParameterError("embedding width must be a positive even integer")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    ind = np.arange(d // 2)
    return 1.0 / (tau * 10000.0 ** (2.0 * ind / d))


def angle_embedding(angle, d: int, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Interleaved sin/cos features of the angle, shape ``angle.shape + (d,)``."""
    arg = np.asarray(angle, dtype=np.float64)[..., None] * _frequencies(d, tau)
    out = np.empty(arg.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def embed_pairs(normals, W_E: torch.Tensor, tau: float = DEFAULT_TAU, neighbor_graph=None) -> torch.Tensor:
    """Pairwise embeddings g_ij @ W_E.

    With ``neighbor_graph=None`` every ordered pair is embedded, giving (N, N, d);
    an (N, k) index table gives (N, k, d) for the listed pairs only.
    """
    if W_E.dim() != 2 or W_E.shape[0] != W_E.shape[1]:
        raise ParameterError(f"W_E must be square, got {tuple(W_E.shape)}")
    z = normals.vectors if isinstance(normals, NormalField) else np.asarray(normals)
    if neighbor_graph is None:
        angles = pairwise_normal_angles(z)
    else:
        idx = np.asarray(neighbor_graph)
        angles = normal_angle(z[:, None, :], z[idx])
    g = torch.as_tensor(angle_embedding(angles, W_E.shape[0], tau), dtype=W_E.dtype)
    return g @ W_E
