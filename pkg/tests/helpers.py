"""Shared oracles for the test suite."""
import math

import numpy as np
import torch

from cloudreg.model import backward, forward_loss


def naive_gap_loss(P, gt, alpha):
    """Hinge loss over a probability table given as nested lists, one point at a time."""
    m, n = gt.shape
    total = 0.0
    for i in range(m):
        ib = gt.source_to_target[i] if gt.source_to_target[i] >= 0 else n
        s = sum(max(-math.log(P[i][ib]) + math.log(P[i][c]) + alpha, 0.0) for c in range(n + 1))
        total += math.log(s + 1)
    for j in range(n):
        jb = gt.target_to_source[j] if gt.target_to_source[j] >= 0 else m
        s = sum(max(-math.log(P[jb][j]) + math.log(P[r][j]) + alpha, 0.0) for r in range(m + 1))
        total += math.log(s + 1)
    return total


def naive_sinkhorn(C, slack, iters):
    """Plain scaling iterations in probability space."""
    m, n = C.shape
    K = np.exp(np.block([[C, np.full((m, 1), slack)], [np.full((1, n), slack), np.full((1, 1), slack)]]))
    a = np.r_[np.ones(m), n]
    b = np.r_[np.ones(n), m]
    for _ in range(iters):
        K = K * (a / K.sum(1))[:, None]
        K = K * (b / K.sum(0))[None, :]
    return K


def _signature(pair, net):
    record = []
    with torch.no_grad():
        loss, _ = forward_loss(pair, net, record=record)
    return float(loss), b"".join(r.cpu().numpy().tobytes() for r in record)


def fd_gradient_errors(net, pair, entries=3, rel_h=1e-4, seed=0, max_tries=5):
    """Relative error of autograd vs central differences for every parameter tensor.

    Each tensor is probed along a random direction and at a few sampled entries.
    Probes whose +/- evaluations change any recorded branch (activation sign,
    max index, neighbor graph, hinge mask) straddle a kink and are redrawn.
    """
    rng = np.random.default_rng(seed)
    loss, tape = forward_loss(pair, net)
    grads = backward(tape)
    _, base_sig = _signature(pair, net)
    errors = {}
    for name, p in net.named_parameters():
        g = grads[name].reshape(-1).numpy()
        scale = max(float(p.detach().abs().mean()), 1.0)
        analytic, numeric = [], []
        probes = [None] + [int(k) for k in rng.choice(p.numel(), size=min(entries, p.numel()), replace=False)]
        for probe in probes:
            for attempt in range(max_tries):
                h = rel_h * scale / (4 ** attempt)
                if probe is None:
                    d = rng.normal(size=p.numel())
                    d /= np.linalg.norm(d)
                else:
                    d = np.zeros(p.numel())
                    d[probe] = 1.0
                step = torch.as_tensor(h * d, dtype=p.dtype).reshape(p.shape)
                with torch.no_grad():
                    p.add_(step)
                    up, sig_up = _signature(pair, net)
                    p.sub_(2 * step)
                    down, sig_down = _signature(pair, net)
                    p.add_(step)
                if sig_up == base_sig and sig_down == base_sig:
                    break
            analytic.append(float(g @ d))
            numeric.append((up - down) / (2 * h))
        a, f = np.array(analytic), np.array(numeric)
        denom = max(np.linalg.norm(f), np.linalg.norm(a))
        errors[name] = 0.0 if denom < 1e-9 else float(np.linalg.norm(a - f) / denom)
    return errors
