"""Adam, the training loop, evaluation helpers and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import ParameterError
from .matching import MatchCounts, hard_assignment, match_counts, metrics_from_counts
from .model import (PipelineConfig, PreparedPair, RegistrationNet, backward, forward_loss,
                    predict, prepare_pair)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "cloudreg-params"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


# --------------------------------------------------------------------------- #
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, cfg: AdamConfig = AdamConfig()) -> AdamState:
    """In-place bias-corrected Adam update of every tensor in ``params``.

    A non-finite gradient rejects the whole step before anything is modified.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step rejected")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return state


# --------------------------------------------------------------------------- #
# checkpoints

def save_params(params: RegistrationNet, path) -> None:
    """Header (JSON line) with config and tensor manifest, then raw little-endian data."""
    manifest = []
    blobs = []
    for name, p in params.named_parameters():
        arr = p.detach().cpu().numpy()
        code = {np.float32: "f4", np.float64: "f8"}[arr.dtype.type]
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.astype("<" + code, copy=False).tobytes(order="C"))
    cfg = asdict(params.cfg)
    header = json.dumps({"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
                         "config": cfg, "tensors": manifest}, sort_keys=True)
    body = b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
    tmp.replace(path)


def load_params(path, expect: Optional[RegistrationNet] = None) -> RegistrationNet:
    """Rebuild the network from a checkpoint; nothing is returned on any error."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl])
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: unreadable header") from None
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {header.get('version')} != {CHECKPOINT_VERSION}")
    cfg_dict = header["config"]
    cfg_dict["edge_widths"] = tuple(cfg_dict["edge_widths"])
    cfg = PipelineConfig(**cfg_dict)
    if len(raw) < nl + 9:
        raise CheckpointError(f"{path}: truncated file")
    (size,) = struct.unpack("<Q", raw[nl + 1:nl + 9])
    body = raw[nl + 9:]
    if len(body) != size:
        raise CheckpointError(f"{path}: truncated data ({len(body)} of {size} bytes)")
    net = RegistrationNet(cfg)
    own = dict(net.named_parameters())
    entries = header["tensors"]
    if [e["name"] for e in entries] != list(own):
        missing = set(own) ^ {e["name"] for e in entries}
        raise CheckpointError(f"{path}: tensor set mismatch, offending: {sorted(missing)[:3]}")
    if expect is not None:
        exp = dict(expect.named_parameters())
        for e in entries:
            if list(exp[e["name"]].shape) != e["shape"]:
                raise CheckpointError(f"{path}: shape mismatch for tensor {e['name']!r}")
    values = {}
    offset = 0
    for e in entries:
        if list(own[e["name"]].shape) != e["shape"]:
            raise CheckpointError(f"{path}: shape mismatch for tensor {e['name']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        dt = np.dtype("<" + e["dtype"])
        chunk = body[offset:offset + count * dt.itemsize]
        if len(chunk) != count * dt.itemsize:
            raise CheckpointError(f"{path}: truncated data in tensor {e['name']!r}")
        values[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"])
        offset += len(chunk)
    dtype = {"f4": torch.float32, "f8": torch.float64}[entries[0]["dtype"]]
    net = net.to(dtype)
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.from_numpy(values[name].astype(values[name].dtype.newbyteorder("="))))
    return net


# --------------------------------------------------------------------------- #
# training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("lr >= 0, epochs >= 1 and batch_size >= 1 required")
        if not 0 <= self.val_fraction < 1:
            raise ParameterError("val_fraction must lie in [0, 1)")


EPOCH_PRESETS = {"clean": 30, "noisy": 80}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    precision: Optional[float]
    accuracy: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def to_line(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class TrainResult:
    params: RegistrationNet
    history: list


def torch_dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def split_indices(n: int, val_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@torch.no_grad()
def evaluate_matching(pairs: Sequence[PreparedPair], params: RegistrationNet, use_normals: bool = True):
    """Mean loss and pooled P/A/R/F1 over ``pairs``."""
    if not pairs:
        return math.nan, metrics_from_counts(MatchCounts(0, 0, 0, 0))
    total = MatchCounts(0, 0, 0, 0)
    losses = []
    for pair in pairs:
        loss, tape = forward_loss(pair, params, use_normals)
        losses.append(float(loss))
        total = total + match_counts(hard_assignment(tape.log_assignment.exp()), pair.gt)
    return float(np.mean(losses)), metrics_from_counts(total)


def train(pairs: Sequence, cfg: TrainConfig, pipeline: PipelineConfig = PipelineConfig(),
          checkpoint_dir=None, log_path=None, init: Optional[RegistrationNet] = None) -> TrainResult:
    """Train on a list of ``RegistrationPair``s (or ``PreparedPair``s).

    A ``val_fraction`` share of the pairs is held out. Epoch 0 in the history is
    the untrained model; each later record follows one pass over the shuffled
    training split.
    """
    if not pairs:
        raise ParameterError("empty training set")
    dtype = torch_dtype(cfg.dtype)
    torch.manual_seed(cfg.seed)
    params = init if init is not None else RegistrationNet(pipeline)
    params = params.to(dtype)
    prepared = [p if isinstance(p, PreparedPair) else prepare_pair(p.X, p.Y, p.gt, params.cfg, dtype)
                for p in pairs]
    train_idx, val_idx = split_indices(len(prepared), cfg.val_fraction, cfg.seed)
    train_set = [prepared[i] for i in train_idx]
    val_set = [prepared[i] for i in val_idx]
    named = dict(params.named_parameters())
    state = AdamState()
    adam = AdamConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    def record(epoch, train_loss):
        val_loss, m = evaluate_matching(val_set, params)
        rec = EpochRecord(epoch, train_loss, val_loss, m.precision, m.accuracy, m.recall, m.f1)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f F1 %s", epoch, train_loss, val_loss, m.f1)
        if log_fh:
            log_fh.write(rec.to_line() + "\n")
            log_fh.flush()

    try:
        init_loss = float(np.mean([float(forward_loss(p, params)[0].detach()) for p in train_set]))
        record(0, init_loss)
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            acc = None
            for step, k in enumerate(order, 1):
                loss, tape = forward_loss(train_set[k], params)
                grads = backward(tape)
                losses.append(float(loss.detach()))
                if acc is None:
                    acc = grads
                else:
                    for n in acc:
                        acc[n] = acc[n] + grads[n]
                if step % cfg.batch_size == 0 or step == len(order):
                    adam_step(named, acc, state, adam)
                    acc = None
            record(epoch, float(np.mean(losses)))
            if ckdir:
                save_params(params, ckdir / f"epoch_{epoch:03d}.params")
                save_params(params, ckdir / "last.params")
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params, history)
