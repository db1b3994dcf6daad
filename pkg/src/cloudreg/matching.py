"""Score matrix, slack-augmented Sinkhorn, gap loss, hard assignment and matching metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .geometry import ParameterError, RigidTransform, squared_distances

DEFAULT_ALPHA = 0.5
DEFAULT_SINKHORN_ITERS = 100
DEFAULT_GT_THRESHOLD = 0.05


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GroundTruthMatches:
    """``source_to_target[i]`` is the target index of x_i or -1; likewise the reverse map."""

    source_to_target: np.ndarray
    target_to_source: np.ndarray

    def __post_init__(self):
        s2t = np.asarray(self.source_to_target, dtype=np.int64).reshape(-1)
        t2s = np.asarray(self.target_to_source, dtype=np.int64).reshape(-1)
        m, n = s2t.size, t2s.size
        if np.any((s2t < -1) | (s2t >= n)) or np.any((t2s < -1) | (t2s >= m)):
            raise ParameterError("ground-truth index out of range")
        matched = np.flatnonzero(s2t >= 0)
        if np.any(t2s[s2t[matched]] != matched) or np.sum(t2s >= 0) != matched.size:
            raise ParameterError("ground-truth maps are not mutually inverse")
        object.__setattr__(self, "source_to_target", s2t)
        object.__setattr__(self, "target_to_source", t2s)

    @classmethod
    def from_pairs(cls, pairs, m: int, n: int) -> "GroundTruthMatches":
        s2t = np.full(m, -1, dtype=np.int64)
        t2s = np.full(n, -1, dtype=np.int64)
        for i, j in np.asarray(pairs, dtype=np.int64).reshape(-1, 2):
            s2t[i], t2s[j] = j, i
        return cls(s2t, t2s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.source_to_target.size, self.target_to_source.size

    def pairs(self) -> np.ndarray:
        i = np.flatnonzero(self.source_to_target >= 0)
        return np.stack([i, self.source_to_target[i]], axis=1)

    def matrix(self) -> np.ndarray:
        m, n = self.shape
        G = np.zeros((m, n), dtype=bool)
        p = self.pairs()
        G[p[:, 0], p[:, 1]] = True
        return G


def score_matrix(h_x: torch.Tensor, h_y: torch.Tensor) -> torch.Tensor:
    if h_x.shape[-1] != h_y.shape[-1]:
        raise ParameterError("encodings must share their width")
    return h_x @ h_y.transpose(-1, -2)


def augment(C: torch.Tensor, slack_score) -> torch.Tensor:
    m, n = C.shape
    slack = torch.as_tensor(slack_score, dtype=C.dtype).reshape(())
    col = slack.expand(m, 1)
    row = slack.expand(1, n + 1)
    return torch.cat([torch.cat([C, col], dim=1), row], dim=0)


def log_sinkhorn(C: torch.Tensor, slack_score, iters: int = DEFAULT_SINKHORN_ITERS) -> torch.Tensor:
    """Log of the slack-augmented assignment matrix, shape (M+1, N+1).

    Target marginals: 1 for each real row/column, N for the slack row and M for
    the slack column. Each round normalizes rows then columns in log space.
    """
    if iters < 1:
        raise ParameterError("sinkhorn needs at least one iteration")
    if not torch.isfinite(C).all() or not torch.isfinite(torch.as_tensor(slack_score)).all():
        raise NumericalError("non-finite score matrix")
    m, n = C.shape
    Z = augment(C, slack_score)
    log_mu = torch.zeros(m + 1, dtype=C.dtype)
    log_nu = torch.zeros(n + 1, dtype=C.dtype)
    log_mu[m] = np.log(n) if n else -np.inf
    log_nu[n] = np.log(m) if m else -np.inf
    u = torch.zeros(m + 1, dtype=C.dtype)
    v = torch.zeros(n + 1, dtype=C.dtype)
    for _ in range(iters):
        u = log_mu - torch.logsumexp(Z + v[None, :], dim=1)
        v = log_nu - torch.logsumexp(Z + u[:, None], dim=0)
    return Z + u[:, None] + v[None, :]


def sinkhorn(C: torch.Tensor, slack_score, iters: int = DEFAULT_SINKHORN_ITERS) -> torch.Tensor:
    return log_sinkhorn(C, slack_score, iters).exp()


def _slack_targets(gt: GroundTruthMatches):
    m, n = gt.shape
    rows = np.where(gt.source_to_target >= 0, gt.source_to_target, n)
    cols = np.where(gt.target_to_source >= 0, gt.target_to_source, m)
    return torch.as_tensor(rows), torch.as_tensor(cols)


def gap_loss_log(log_C: torch.Tensor, gt: GroundTruthMatches, alpha: float = DEFAULT_ALPHA,
                 record: Optional[list] = None) -> torch.Tensor:
    """Gap loss evaluated on log-probabilities (M+1, N+1)."""
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    m, n = gt.shape
    if tuple(log_C.shape) != (m + 1, n + 1):
        raise ParameterError(f"expected a {(m + 1, n + 1)} matrix, got {tuple(log_C.shape)}")
    rows, cols = _slack_targets(gt)
    true_row = log_C[torch.arange(m), rows]
    true_col = log_C[cols, torch.arange(n)]
    row_hinge = log_C[:m, :] - true_row[:, None] + alpha
    col_hinge = log_C[:, :n] - true_col[None, :] + alpha
    if record is not None:
        record.append(row_hinge.detach() > 0)
        record.append(col_hinge.detach() > 0)
    row_terms = torch.log(torch.relu(row_hinge).sum(dim=1) + 1.0)
    col_terms = torch.log(torch.relu(col_hinge).sum(dim=0) + 1.0)
    return row_terms.sum() + col_terms.sum()


def gap_loss(C_bar: torch.Tensor, gt: GroundTruthMatches, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    if (C_bar <= 0).any():
        raise NumericalError("assignment probabilities must be strictly positive")
    return gap_loss_log(torch.log(C_bar), gt, alpha)


def hard_assignment(C_bar) -> np.ndarray:
    """Mutual-argmax binary matrix (M, N); argmaxes span the slack row/column."""
    P = C_bar.detach().cpu().numpy() if isinstance(C_bar, torch.Tensor) else np.asarray(C_bar)
    m, n = P.shape[0] - 1, P.shape[1] - 1
    best_col = np.argmax(P[:m, :], axis=1)
    best_row = np.argmax(P[:, :n], axis=0)
    A = np.zeros((m, n), dtype=bool)
    i = np.flatnonzero(best_col < n)
    j = best_col[i]
    keep = best_row[j] == i
    A[i[keep], j[keep]] = True
    return A


def assignment_pairs(A: np.ndarray, C_bar=None):
    """Matched (i, j) pairs of a hard assignment and, optionally, their probabilities."""
    i, j = np.nonzero(A)
    pairs = np.stack([i, j], axis=1)
    if C_bar is None:
        return pairs, None
    P = C_bar.detach().cpu().numpy() if isinstance(C_bar, torch.Tensor) else np.asarray(C_bar)
    return pairs, P[i, j]


def gt_correspondences(X, Y, T_gt: RigidTransform, dist_threshold: float = DEFAULT_GT_THRESHOLD
                       ) -> GroundTruthMatches:
    """Mutual nearest neighbors between T_gt(X) and Y closer than the threshold."""
    if dist_threshold <= 0:
        raise ParameterError("threshold must be positive")
    px = getattr(X, "points", X)
    py = getattr(Y, "points", Y)
    d2 = squared_distances(T_gt.apply(px), py)
    nn_xy = np.argmin(d2, axis=1)
    nn_yx = np.argmin(d2, axis=0)
    m, n = d2.shape
    i = np.arange(m)
    ok = (nn_yx[nn_xy] == i) & (d2[i, nn_xy] < dist_threshold ** 2)
    s2t = np.where(ok, nn_xy, -1)
    t2s = np.full(n, -1, dtype=np.int64)
    t2s[s2t[ok]] = i[ok]
    return GroundTruthMatches(s2t, t2s)


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MatchingMetrics:
    """Percentages; ``None`` where the denominator is zero."""

    precision: Optional[float]
    accuracy: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def as_dict(self) -> dict:
        return {"P": self.precision, "A": self.accuracy, "R": self.recall, "F1": self.f1}


def match_counts(A: np.ndarray, gt: GroundTruthMatches) -> MatchCounts:
    A = np.asarray(A, dtype=bool)
    G = gt.matrix()
    if A.shape != G.shape:
        raise ParameterError(f"assignment shape {A.shape} != ground truth {G.shape}")
    tp = int(np.sum(A & G))
    fp = int(np.sum(A & ~G))
    fn = int(np.sum(~A & G))
    return MatchCounts(tp, fp, fn, int(A.size) - tp - fp - fn)


def metrics_from_counts(c: MatchCounts) -> MatchingMetrics:
    def pct(num, den):
        return 100.0 * num / den if den else None

    p = pct(c.tp, c.tp + c.fp)
    r = pct(c.tp, c.tp + c.fn)
    f1 = pct(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    a = pct(c.tp + c.tn, c.tp + c.fp + c.fn + c.tn)
    return MatchingMetrics(p, a, r, f1)


def matching_metrics(A: np.ndarray, gt: GroundTruthMatches) -> MatchingMetrics:
    return metrics_from_counts(match_counts(A, gt))
