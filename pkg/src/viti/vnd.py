"""Head-level linear probes that flag visual neglect from head activations."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from viti._io import atomic_write_bytes
from viti.errors import ConfigError, DatasetError, FormatError, ShapeError, TrainingError
from viti.linalg import make_rng, sigmoid

BANK_MAGIC = b"VPRB"
BANK_VERSION = 1
P_CLIP = 1e-7


@dataclass
class Probe:
    layer: int
    head: int
    theta: np.ndarray
    bias: float = 0.0
    val_accuracy: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float32)
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise ValueError(f"val_accuracy {self.val_accuracy} outside [0, 1]")

    def __eq__(self, other):
        return (
            isinstance(other, Probe)
            and (self.layer, self.head) == (other.layer, other.head)
            and np.array_equal(self.theta, other.theta)
            and np.float32(self.bias) == np.float32(other.bias)
            and np.float32(self.val_accuracy) == np.float32(other.val_accuracy)
        )


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 0.05
    epochs: int = 500
    l2: float = 1e-4
    split_ratio: float = 0.8
    seed: int = 0


@dataclass
class ProbeBank:
    n_layers: int
    n_heads: int
    head_dim: int
    config_digest: bytes
    probes: list  # row-major over (layer, head)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.probes) != self.n_layers * self.n_heads:
            raise DatasetError(f"bank needs {self.n_layers * self.n_heads} probes, got {len(self.probes)}")

    def probe(self, layer: int, head: int) -> Probe:
        return self.probes[layer * self.n_heads + head]

    def sorted_accuracies(self) -> list:
        return sorted((p.val_accuracy for p in self.probes), reverse=True)

    def thetas(self) -> np.ndarray:
        return np.stack([p.theta for p in self.probes]).reshape(self.n_layers, self.n_heads, self.head_dim)

    def biases(self) -> np.ndarray:
        return np.array([p.bias for p in self.probes], dtype=np.float64).reshape(self.n_layers, self.n_heads)

    def __eq__(self, other):
        return (
            isinstance(other, ProbeBank)
            and (self.n_layers, self.n_heads, self.head_dim) == (other.n_layers, other.n_heads, other.head_dim)
            and self.config_digest == other.config_digest
            and self.probes == other.probes
            and self.metadata == other.metadata
        )


_P_LO, _P_HI = np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg


def open_unit(p):
    """Keep probabilities strictly inside (0, 1); float64 sigmoid saturates to 1.0 near logit 37."""
    # ufuncs rather than np.clip, whose wrapper overhead shows up in the decode hook
    return np.minimum(np.maximum(p, _P_LO), _P_HI)


def probe_score(p: Probe, o) -> float:
    o = np.asarray(o, dtype=np.float64)
    if o.shape != p.theta.shape:
        raise ShapeError(f"activation shape {o.shape} vs probe {p.theta.shape}")
    return float(open_unit(sigmoid(float(np.dot(p.theta.astype(np.float64), o)) + float(p.bias))))


def bce_loss(p, c):
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
    c = np.asarray(c, dtype=np.float64)
    out = -(c * np.log(p) + (1.0 - c) * np.log1p(-p))
    return out if out.ndim else float(out)


def bce_objective(theta, bias, X, y, l2: float = 0.0) -> float:
    """Mean BCE of sigmoid(X theta + bias) against y, plus 0.5 * l2 * |theta|^2."""
    p = sigmoid(X @ theta + bias)
    return float(np.mean(bce_loss(p, y)) + 0.5 * l2 * float(theta @ theta))


def bce_gradient(theta, bias, X, y, l2: float = 0.0):
    r = sigmoid(X @ theta + bias) - y
    return X.T @ r / len(y) + l2 * theta, float(r.mean())


def _split(n: int, ratio: float, seed: int):
    perm = make_rng(seed, 0x5917).permutation(n)
    cut = int(round(ratio * n))
    return perm[:cut], perm[cut:]


def train_probe(X, y, hyper: ProbeHyper = ProbeHyper(), layer: int = 0, head: int = 0,
                history: list | None = None) -> Probe:
    """Full-batch gradient descent on mean BCE + L2 for one head.

    Features are standardized with training-split statistics during
    optimisation and the scaling is folded back into theta and bias, so the
    returned probe scores raw activations.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    train, val = _split(len(y), hyper.split_ratio, hyper.seed)
    ytr = y[train]
    if min(int((ytr == 0).sum()), int((ytr == 1).sum())) < 2:
        raise TrainingError(f"probe ({layer},{head}) needs at least 2 rows of each class in the training split")
    mean = X[train].mean(axis=0)
    scale = X[train].std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X[train] - mean) / scale

    theta = np.zeros(X.shape[1])
    bias = 0.0
    for _ in range(hyper.epochs):
        if history is not None:
            history.append(bce_objective(theta, bias, Z, ytr, hyper.l2))
        g_theta, g_bias = bce_gradient(theta, bias, Z, ytr, hyper.l2)
        theta = theta - hyper.lr * g_theta
        bias = bias - hyper.lr * g_bias
    if not np.all(np.isfinite(theta)):
        raise TrainingError(f"probe ({layer},{head}) diverged")

    raw_theta = (theta / scale).astype(np.float32)
    raw_bias = np.float32(bias - float(np.dot(theta, mean / scale)))
    eval_idx = val if len(val) else train
    pred = sigmoid(X[eval_idx] @ raw_theta.astype(np.float64) + float(raw_bias)) > 0.5
    acc = float(np.float32(np.mean(pred == (y[eval_idx] == 1))))
    return Probe(layer, head, raw_theta, float(raw_bias), acc)


def train_probe_bank(dataset, hyper: ProbeHyper = ProbeHyper()) -> ProbeBank:
    """One probe per (layer, head) from a ProbeDataset."""
    L, H, D = dataset.n_layers, dataset.n_heads, dataset.head_dim
    acts = dataset.activations
    if acts.shape[1:] != (L, H, D):
        raise DatasetError(f"dataset activations {acts.shape[1:]} do not cover all (layer, head) pairs of {(L, H, D)}")
    if acts.shape[0] == 0:
        raise DatasetError("empty probe dataset")
    probes = [
        train_probe(acts[:, l, h], dataset.labels, hyper, l, h)
        for l in range(L)
        for h in range(H)
    ]
    meta = {
        "seed": hyper.seed, "split_ratio": hyper.split_ratio, "epochs": hyper.epochs,
        "lr": hyper.lr, "l2": hyper.l2, "rows": int(acts.shape[0]),
    }
    return ProbeBank(L, H, D, dataset.config_digest, probes, meta)


def select_top_beta(bank: ProbeBank, beta: float) -> list:
    """The max(1, floor(beta * L * H)) most accurate heads as sorted (layer, head) pairs."""
    if not 0.0 < beta <= 1.0:
        raise ConfigError("beta", f"must be in (0, 1], got {beta}")
    total = bank.n_layers * bank.n_heads
    k = max(1, math.floor(beta * total + 1e-9))
    ranked = sorted(bank.probes, key=lambda p: (-p.val_accuracy, p.layer, p.head))
    return sorted((p.layer, p.head) for p in ranked[:k])


# ----------------------------------------------------------------------------
# file format


def dump_bank(bank: ProbeBank) -> bytes:
    """Magic, u16 version, 8-byte model digest, u16 L/H/D, then per probe
    (u16 layer, u16 head, f32 val_accuracy, f32 bias, D x f32 theta), then a
    trailer of u32 length + UTF-8 JSON training metadata."""
    out = [BANK_MAGIC, struct.pack("<H", BANK_VERSION), bank.config_digest,
           struct.pack("<3H", bank.n_layers, bank.n_heads, bank.head_dim)]
    for p in bank.probes:
        out.append(struct.pack("<2H2f", p.layer, p.head, p.val_accuracy, p.bias))
        out.append(np.asarray(p.theta, dtype="<f4").tobytes())
    meta = json.dumps(bank.metadata, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(out)


def parse_bank(data: bytes) -> ProbeBank:
    if data[:4] != BANK_MAGIC:
        raise FormatError("not a probe bank (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported probe bank version {version}")
    digest = data[6:14]
    L, H, D = struct.unpack_from("<3H", data, 14)
    off = 20
    probes = []
    for _ in range(L * H):
        layer, head, acc, bias = struct.unpack_from("<2H2f", data, off)
        off += 12
        theta = np.frombuffer(data, dtype="<f4", count=D, offset=off).astype(np.float32)
        off += 4 * D
        probes.append(Probe(layer, head, theta, bias, acc))
    (n,) = struct.unpack_from("<I", data, off)
    meta = json.loads(data[off + 4:off + 4 + n].decode("utf-8"))
    return ProbeBank(L, H, D, digest, probes, meta)


def save_bank(bank: ProbeBank, path) -> None:
    atomic_write_bytes(path, dump_bank(bank))


def load_bank(path) -> ProbeBank:
    return parse_bank(Path(path).read_bytes())
