"""Normal-biased self-attention and cross-attention, stacked in alternating layers."""
from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .descriptor import glorot_, leaky_relu
from .geometry import ParameterError


def _head_weights(h: int, dh: int) -> nn.Parameter:
    w = torch.empty(h, dh, dh)
    for i in range(h):
        glorot_(w[i])
    return nn.Parameter(w)


class MessageMLP(nn.Module):
    """Residual message: MLP(concat(f, attention output)), 2d -> 2d -> d."""

    def __init__(self, d: int):
        super().__init__()
        self.lin1 = nn.Linear(2 * d, 2 * d)
        self.lin2 = nn.Linear(2 * d, d)
        for lin in (self.lin1, self.lin2):
            glorot_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, f, message, record=None):
        return self.lin2(leaky_relu(self.lin1(torch.cat([f, message], dim=-1)), record))


class AttentionBlock(nn.Module):
    """One attention layer with per-head projections and an output fusion.

    ``biased=True`` adds the normal-embedding term to the keys (self layers).
    """

    def __init__(self, d: int, heads: int, biased: bool, scale: str = "head"):
        super().__init__()
        if d % heads:
            raise ParameterError(f"head count {heads} must divide width {d}")
        if scale not in ("head", "model"):
            raise ParameterError("scale must be 'head' or 'model'")
        self.heads, self.dh = heads, d // heads
        self.scale = math.sqrt(self.dh if scale == "head" else d)
        self.W_Q = _head_weights(heads, self.dh)
        self.W_K = _head_weights(heads, self.dh)
        self.W_V = _head_weights(heads, self.dh)
        self.W_R = _head_weights(heads, self.dh) if biased else None
        self.merge = nn.Linear(d, d)
        glorot_(self.merge.weight)
        nn.init.zeros_(self.merge.bias)
        self.mlp = MessageMLP(d)

    def split(self, f: torch.Tensor) -> torch.Tensor:
        return f.reshape(f.shape[0], self.heads, self.dh)

    def attend(self, f_query, f_source, embeddings=None, use_bias=True, angle_features=None, W_E=None):
        """Returns (merged attention output (N, d), probabilities (H, N, M)).

        The key bias comes either from explicit pairwise ``embeddings`` (N, M, d)
        or, without materialising them, from ``angle_features`` g (N, M, d) and
        ``W_E`` via q_i . (g_ij W_E W_R) = g_ij . (W_E W_R q_i).
        """
        q = torch.einsum("nhd,hde->nhe", self.split(f_query), self.W_Q)
        k = torch.einsum("mhd,hde->mhe", self.split(f_source), self.W_K)
        v = torch.einsum("mhd,hde->mhe", self.split(f_source), self.W_V)
        logits = torch.einsum("nhe,mhe->hnm", q, k)
        if self.W_R is not None and use_bias:
            qr = torch.einsum("nhe,hde->nhd", q, self.W_R)
            if embeddings is not None:
                e = embeddings.reshape(*embeddings.shape[:2], self.heads, self.dh)
                logits = logits + torch.einsum("nhd,nmhd->hnm", qr, e)
            elif angle_features is not None and W_E is not None:
                w = W_E.reshape(W_E.shape[0], self.heads, self.dh)
                s = torch.einsum("chd,nhd->nch", w, qr)
                logits = logits + torch.bmm(angle_features, s).permute(2, 0, 1)
            else:
                raise ParameterError("biased attention needs pairwise embeddings")
        prob = torch.softmax(logits / self.scale, dim=-1)
        out = torch.einsum("hnm,mhe->nhe", prob, v).reshape(f_query.shape[0], -1)
        return self.merge(out), prob

    def forward(self, f_query, f_source, embeddings=None, use_bias=True, record=None,
                angle_features=None, W_E=None):
        message, _ = self.attend(f_query, f_source, embeddings, use_bias, angle_features, W_E)
        return f_query + self.mlp(f_query, message, record)


class AttentionStack(nn.Module):
    def __init__(self, d: int = 96, layers: int = 6, heads: int = 4, scale: str = "head"):
        super().__init__()
        self.d, self.heads = d, heads
        self.self_layers = nn.ModuleList(AttentionBlock(d, heads, True, scale) for _ in range(layers))
        self.cross_layers = nn.ModuleList(AttentionBlock(d, heads, False, scale) for _ in range(layers))

    def forward(self, f_x, f_y, e_x=None, e_y=None, use_bias=True, record=None,
                g_x=None, g_y=None, W_E=None):
        """Pass either embeddings ``e_x, e_y`` or angle features ``g_x, g_y`` with ``W_E``."""
        for s, c in zip(self.self_layers, self.cross_layers):
            f_x = s(f_x, f_x, e_x, use_bias, record, g_x, W_E)
            f_y = s(f_y, f_y, e_y, use_bias, record, g_y, W_E)
            f_x, f_y = c(f_x, f_y, record=record), c(f_y, f_x, record=record)
        return f_x, f_y


def self_attention(F: torch.Tensor, E: torch.Tensor, block: AttentionBlock, use_bias: bool = True):
    """Merged self-attention output and per-head probabilities for one cloud."""
    return block.attend(F, F, E, use_bias)


def cross_attention(F_X: torch.Tensor, F_Y: torch.Tensor, block: AttentionBlock):
    """Queries from ``F_X``, keys and values from ``F_Y``."""
    return block.attend(F_X, F_Y)


def transformer_forward(F_X, F_Y, E_X, E_Y, params: AttentionStack, use_bias: bool = True):
    return params(F_X, F_Y, E_X, E_Y, use_bias)
