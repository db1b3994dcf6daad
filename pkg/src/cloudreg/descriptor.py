"""Dynamic-graph EdgeConv feature extractor."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
from torch import nn

from .geometry import ParameterError

LEAKY_SLOPE = 0.2


def glorot_(weight: torch.Tensor) -> torch.Tensor:
    fan_out, fan_in = weight.shape[-2], weight.shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


def leaky_relu(x: torch.Tensor, record: Optional[list] = None) -> torch.Tensor:
    if record is not None:
        record.append(x.detach() > 0)
    return torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)


def pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Squared distances from explicit differences, chunked over rows of ``a``."""
    out = torch.empty(a.shape[0], b.shape[0], dtype=a.dtype)
    for s in range(0, a.shape[0], chunk):
        out[s:s + chunk] = ((a[s:s + chunk, None, :] - b[None, :, :]) ** 2).sum(-1)
    return out


def build_feature_graph(features: torch.Tensor, k_graph: int) -> torch.Tensor:
    """(N, k) k-NN table in feature space, self excluded, ties to lower index."""
    n = features.shape[0]
    if not 1 <= k_graph < n:
        raise ParameterError(f"k_graph={k_graph} must satisfy 1 <= k < {n}")
    with torch.no_grad():
        d2 = pairwise_sq_dists(features.detach(), features.detach())
        d2.fill_diagonal_(float("inf"))
        return torch.argsort(d2, dim=1, stable=True)[:, :k_graph]


class EdgeConv(nn.Module):
    """out_i = max_j MLP([f_i, f_j - f_i]) over the graph neighbors of i."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.lin1 = nn.Linear(2 * c_in, c_out)
        self.lin2 = nn.Linear(c_out, c_out)
        for lin in (self.lin1, self.lin2):
            glorot_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, features: torch.Tensor, graph: torch.Tensor,
                record: Optional[list] = None) -> torch.Tensor:
        center = features[:, None, :].expand(-1, graph.shape[1], -1)
        edge = torch.cat([center, features[graph] - center], dim=-1)
        h = self.lin2(leaky_relu(self.lin1(edge), record))
        out, arg = h.max(dim=1)
        if record is not None:
            record.append(arg)
        return out


def edge_conv(features: torch.Tensor, graph: torch.Tensor, layer: EdgeConv) -> torch.Tensor:
    return layer(features, graph)


class DGCNN(nn.Module):
    """Two EdgeConv layers (graph rebuilt in feature space before each) and a pointwise fusion."""

    def __init__(self, widths: Sequence[int] = (32, 64), d: int = 96, k_graph: int = 16):
        super().__init__()
        self.k_graph = k_graph
        dims = [3, *widths]
        self.convs = nn.ModuleList(EdgeConv(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.fuse = nn.Linear(sum(widths), d)
        glorot_(self.fuse.weight)
        nn.init.zeros_(self.fuse.bias)

    @property
    def d(self) -> int:
        return self.fuse.out_features

    def forward(self, points: torch.Tensor, record: Optional[list] = None) -> torch.Tensor:
        k = min(self.k_graph, points.shape[0] - 1)
        x = points
        outs = []
        for conv in self.convs:
            graph = build_feature_graph(x, k)
            if record is not None:
                record.append(graph)
            x = conv(x, graph, record)
            outs.append(x)
        return self.fuse(torch.cat(outs, dim=-1))


def dgcnn_forward(points: torch.Tensor, params: DGCNN) -> torch.Tensor:
    return params(points)
