"""Full matching network: descriptor, normal-biased attention, Sinkhorn head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .attention import AttentionStack
from .descriptor import DGCNN, glorot_
from .geometry import ParameterError
from .matching import (DEFAULT_ALPHA, DEFAULT_SINKHORN_ITERS, GroundTruthMatches, gap_loss_log,
                       log_sinkhorn, score_matrix)
from .normals import (DEFAULT_K_NN, DEFAULT_RADIUS, DEFAULT_TAU, NormalField, angle_embedding,
                      estimate_normals, pairwise_normal_angles)


@dataclass(frozen=True)
class PipelineConfig:
    d: int = 96
    layers: int = 6
    heads: int = 4
    edge_widths: tuple = (32, 64)
    k_graph: int = 16
    tau: float = DEFAULT_TAU
    normal_radius: float = DEFAULT_RADIUS
    k_nn: int = DEFAULT_K_NN
    sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS
    alpha: float = DEFAULT_ALPHA
    scale: str = "head"
    slack_init: float = 1.0
    center_inputs: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ParameterError(f"heads={self.heads} must divide d={self.d}")
        if self.d % 2:
            raise ParameterError("d must be even for the angle embedding")
        if self.layers < 0 or self.k_graph < 1 or self.sinkhorn_iters < 1:
            raise ParameterError("layers >= 0, k_graph >= 1 and sinkhorn_iters >= 1 required")


class RegistrationNet(nn.Module):
    """All learnable tensors; ``named_parameters`` order is the checkpoint order."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        super().__init__()
        self.cfg = cfg
        self.descriptor = DGCNN(cfg.edge_widths, cfg.d, cfg.k_graph)
        self.W_E = nn.Parameter(glorot_(torch.empty(cfg.d, cfg.d)))
        self.attention = AttentionStack(cfg.d, cfg.layers, cfg.heads, cfg.scale)
        self.slack = nn.Parameter(torch.tensor(float(cfg.slack_init)))

    def encode(self, X: torch.Tensor, Y: torch.Tensor, z_x, z_y, use_normals: bool = True,
               record: Optional[list] = None):
        if self.cfg.center_inputs:
            X = X - X.mean(dim=0)
            Y = Y - Y.mean(dim=0)
        f_x = self.descriptor(X, record)
        f_y = self.descriptor(Y, record)
        g_x = self.angle_features(z_x, X.dtype)
        g_y = self.angle_features(z_y, X.dtype)
        return self.attention(f_x, f_y, use_bias=use_normals, record=record, g_x=g_x, g_y=g_y, W_E=self.W_E)

    def angle_features(self, z, dtype) -> torch.Tensor:
        if isinstance(z, torch.Tensor):
            return z.to(dtype)
        return torch.as_tensor(angle_embedding(pairwise_normal_angles(z), self.cfg.d, self.cfg.tau), dtype=dtype)

    def log_assignment(self, X, Y, z_x, z_y, use_normals=True, record=None) -> torch.Tensor:
        h_x, h_y = self.encode(X, Y, z_x, z_y, use_normals, record)
        return log_sinkhorn(score_matrix(h_x, h_y), self.slack, self.cfg.sinkhorn_iters)


@dataclass
class PreparedPair:
    """Model inputs for one pair; normals are fixed preprocessing.

    ``z_x``/``z_y`` hold either unit normals (N, 3) or their precomputed pairwise
    angle features (N, N, d).
    """

    X: torch.Tensor
    Y: torch.Tensor
    z_x: object
    z_y: object
    gt: Optional[GroundTruthMatches] = None
    normals_x: Optional[NormalField] = field(default=None, repr=False)
    normals_y: Optional[NormalField] = field(default=None, repr=False)


def prepare_pair(X, Y, gt: Optional[GroundTruthMatches], cfg: PipelineConfig,
                 dtype=torch.float64) -> PreparedPair:
    px = np.asarray(getattr(X, "points", X), dtype=np.float64)
    py = np.asarray(getattr(Y, "points", Y), dtype=np.float64)
    nx = estimate_normals(px, cfg.normal_radius, cfg.k_nn)
    ny = estimate_normals(py, cfg.normal_radius, cfg.k_nn)

    def features(z):
        return torch.as_tensor(angle_embedding(pairwise_normal_angles(z), cfg.d, cfg.tau), dtype=dtype)

    return PreparedPair(torch.tensor(px, dtype=dtype), torch.tensor(py, dtype=dtype),
                        features(nx.vectors), features(ny.vectors), gt, nx, ny)


@dataclass
class Tape:
    loss: torch.Tensor
    log_assignment: torch.Tensor
    params: list
    names: list


def forward_loss(pair: PreparedPair, params: RegistrationNet, use_normals: bool = True,
                 record: Optional[list] = None):
    """Loss and the tape needed by :func:`backward`."""
    if pair.gt is None:
        raise ParameterError("pair has no ground truth")
    X = pair.X.to(params.slack.dtype)
    Y = pair.Y.to(params.slack.dtype)
    log_C = params.log_assignment(X, Y, pair.z_x, pair.z_y, use_normals, record)
    loss = gap_loss_log(log_C, pair.gt, params.cfg.alpha, record)
    names, tensors = zip(*params.named_parameters())
    return loss, Tape(loss, log_C, list(tensors), list(names))


def backward(tape: Tape) -> dict:
    """Reverse-mode gradients of the tape's loss for every parameter (zeros if unused)."""
    grads = torch.autograd.grad(tape.loss, tape.params, retain_graph=True, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(tape.names, tape.params, grads)}


@torch.no_grad()
def predict(pair: PreparedPair, params: RegistrationNet, use_normals: bool = True) -> torch.Tensor:
    """Soft assignment C_bar (M+1, N+1)."""
    X = pair.X.to(params.slack.dtype)
    Y = pair.Y.to(params.slack.dtype)
    return params.log_assignment(X, Y, pair.z_x, pair.z_y, use_normals).exp()
