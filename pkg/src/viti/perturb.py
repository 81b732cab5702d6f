"""Positive (visual-neglect) samples: forward-diffusion noise on the visual
embeddings, and replacement of the most-attended visual embeddings."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from viti._io import atomic_write_bytes
from viti.errors import ConfigError, FormatError, InputError
from viti.linalg import make_rng
from viti.runtime import Model, VisualSpan, forward

DATASET_MAGIC = b"VPDS"
DATASET_VERSION = 1

CLEAN, GAUSSIAN, REPLACEMENT = 0, 1, 2


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 5e-3
    schedule: str = "linear"

    def __post_init__(self):
        if self.schedule != "linear":
            raise ConfigError("schedule", f"unsupported schedule {self.schedule!r}")
        if self.total_steps <= 0:
            raise ConfigError("total_steps", "must be positive")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1")

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative signal fraction for t = 0..total_steps (alpha_bar[0] == 1)."""
        betas = np.linspace(self.beta_start, self.beta_end, self.total_steps)
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def gaussian_perturb(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Closed-form forward diffusion: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    if not 0 <= t <= schedule.total_steps:
        raise ConfigError("t", f"step {t} outside [0, {schedule.total_steps}]")
    if t == 0:
        return x0.copy()
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def replaced_positions(profile, keep_fraction: float = 0.25) -> np.ndarray:
    """Indices of the most-attended floor((1 - keep) * k) tokens; ties go to the lower index."""
    profile = np.asarray(profile, dtype=np.float64)
    k = len(profile)
    n_replace = min(k - 1, math.floor((1.0 - keep_fraction) * k + 1e-9))
    order = np.lexsort((np.arange(k), -profile))
    return np.sort(order[:n_replace])


def attention_replacement_perturb(visual_embeddings, attention_profile, keep_fraction: float = 0.25) -> np.ndarray:
    """Overwrite the most-attended visual embeddings with the mean of the least-attended ones."""
    emb = np.asarray(visual_embeddings, dtype=np.float64)
    profile = np.asarray(attention_profile, dtype=np.float64)
    if emb.shape[0] < 2:
        raise InputError("attention replacement needs at least 2 visual tokens")
    if len(profile) != emb.shape[0]:
        raise InputError(f"profile length {len(profile)} != {emb.shape[0]} visual tokens")
    if not 0.0 < keep_fraction < 1.0:
        raise ConfigError("keep_fraction", "must be in (0, 1)")
    top = replaced_positions(profile, keep_fraction)
    out = emb.copy()
    if len(top):
        kept = np.setdiff1d(np.arange(len(profile)), top)
        out[top] = emb[kept].mean(axis=0)
    return out


def attention_profile(model: Model, tokens, span: VisualSpan, taps=None) -> np.ndarray:
    """Mean attention each visual token receives in the middle layer (all heads,
    all query rows after the image)."""
    if taps is None:
        taps = []
        forward(model, tokens, taps=taps)
    a = taps[model.config.n_layers // 2].attn  # (H, n, n)
    return a[:, span.end:, span.start:span.end].mean(axis=(0, 1))


# ----------------------------------------------------------------------------
# probe dataset


@dataclass
class ProbeDataset:
    """Last-prompt-position head activations with neglect labels.

    ``activations`` is (rows, L, H, D); rows alternate clean / perturbed per
    source sample. ``kinds`` records CLEAN, GAUSSIAN or REPLACEMENT per row.
    """

    config_digest: bytes
    schedule: NoiseSchedule
    mix: float
    seed: int
    activations: np.ndarray
    labels: np.ndarray
    kinds: np.ndarray

    @property
    def n_layers(self):
        return self.activations.shape[1]

    @property
    def n_heads(self):
        return self.activations.shape[2]

    @property
    def head_dim(self):
        return self.activations.shape[3]

    def __eq__(self, other):
        return (
            isinstance(other, ProbeDataset)
            and self.config_digest == other.config_digest
            and self.schedule == other.schedule
            and self.mix == other.mix
            and self.seed == other.seed
            and np.array_equal(self.activations, other.activations)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.kinds, other.kinds)
        )


def perturb_sample(model: Model, sample, kind: int, schedule: NoiseSchedule, rng, taps=None,
                   steps: int | None = None) -> np.ndarray:
    """Prompt content embeddings with the visual span perturbed by ``kind``."""
    tokens = sample.prompt
    span = sample.span
    content = model.f64["tok_emb"][np.asarray(tokens)].copy()
    vis = content[span.start:span.end]
    if kind == GAUSSIAN:
        content[span.start:span.end] = gaussian_perturb(
            vis, schedule.total_steps if steps is None else steps, schedule, rng
        )
    elif kind == REPLACEMENT:
        content[span.start:span.end] = attention_replacement_perturb(
            vis, attention_profile(model, tokens, span, taps)
        )
    return content


def _last_row(taps) -> np.ndarray:
    return np.stack([t.o[:, -1, :] for t in taps])  # (L, H, D)


def build_probe_dataset(model: Model, samples, schedule: NoiseSchedule = NoiseSchedule(), mix: float = 0.5,
                        seed: int = 0) -> ProbeDataset:
    """One clean (label 0) and one perturbed (label 1) row per sample.

    The perturbation is Gaussian with probability ``mix`` and attention
    replacement otherwise, drawn from the sample's own RNG stream.
    """
    samples = list(samples)
    if not samples:
        raise InputError("no samples to build a probe dataset from")
    if not 0.0 <= mix <= 1.0:
        raise ConfigError("mix", "must be in [0, 1]")
    acts, labels, kinds = [], [], []
    for i, s in enumerate(samples):
        rng = make_rng(seed, i)
        taps = []
        forward(model, s.prompt, taps=taps)
        acts.append(_last_row(taps))
        labels.append(0)
        kinds.append(CLEAN)
        kind = GAUSSIAN if rng.random() < mix else REPLACEMENT
        content = perturb_sample(model, s, kind, schedule, rng, taps)
        taps_p = []
        forward(model, s.prompt, content=content, taps=taps_p)
        acts.append(_last_row(taps_p))
        labels.append(1)
        kinds.append(kind)
    return ProbeDataset(
        model.config.digest(), schedule, float(mix), int(seed),
        np.asarray(acts, dtype=np.float32), np.asarray(labels, dtype=np.uint8), np.asarray(kinds, dtype=np.uint8),
    )


def dump_probe_dataset(ds: ProbeDataset) -> bytes:
    """Header: magic, u16 version, 8-byte model digest, u32 total_steps,
    f64 beta_start, f64 beta_end, f64 mix, u64 seed, u16 L/H/D, u32 rows,
    rows x u8 perturbation kind. Then one record per (row, layer, head):
    u16 layer, u16 head, u8 label, D x f32 activation."""
    rows, L, H, D = ds.activations.shape
    s = ds.schedule
    head = [
        DATASET_MAGIC, struct.pack("<H", DATASET_VERSION), ds.config_digest,
        struct.pack("<I3dQ3HI", s.total_steps, s.beta_start, s.beta_end, ds.mix, ds.seed, L, H, D, rows),
        ds.kinds.astype(np.uint8).tobytes(),
    ]
    rec = np.dtype([("layer", "<u2"), ("head", "<u2"), ("label", "u1"), ("act", "<f4", (D,))])
    body = np.zeros((rows, L, H), dtype=rec)
    body["layer"] = np.arange(L)[None, :, None]
    body["head"] = np.arange(H)[None, None, :]
    body["label"] = ds.labels[:, None, None]
    body["act"] = ds.activations
    return b"".join(head) + body.tobytes()


def parse_probe_dataset(data: bytes) -> ProbeDataset:
    if data[:4] != DATASET_MAGIC:
        raise FormatError("not a probe dataset (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported probe dataset version {version}")
    digest = data[6:14]
    fmt = "<I3dQ3HI"
    if len(data) < 14 + struct.calcsize(fmt):
        raise FormatError("truncated probe dataset header")
    total, b0, b1, mix, seed, L, H, D, rows = struct.unpack_from(fmt, data, 14)
    off = 14 + struct.calcsize(fmt)
    rec = np.dtype([("layer", "<u2"), ("head", "<u2"), ("label", "u1"), ("act", "<f4", (D,))])
    if len(data) != off + rows + rows * L * H * rec.itemsize:
        raise FormatError("probe dataset length does not match its header")
    kinds = np.frombuffer(data, dtype=np.uint8, count=rows, offset=off).copy()
    off += rows
    body = np.frombuffer(data, dtype=rec, count=rows * L * H, offset=off).reshape(rows, L, H)
    return ProbeDataset(
        digest, NoiseSchedule(total, b0, b1), mix, seed,
        body["act"].astype(np.float32), body["label"][:, 0, 0].astype(np.uint8), kinds,
    )


def save_probe_dataset(ds: ProbeDataset, path) -> None:
    atomic_write_bytes(path, dump_probe_dataset(ds))


def load_probe_dataset(path) -> ProbeDataset:
    return parse_probe_dataset(Path(path).read_bytes())
