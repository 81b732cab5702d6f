"""Toy decoder-only transformer with per-head activation taps.

Layout per layer (pre-norm)::

    h       = X + concat_h(A_h V_h) W_O        A_h = softmax(Q_h K_h^T / sqrt(D)), causal
    X_next  = h + silu(LN2(h) W_1) W_2^T       Q_h, K_h, V_h = LN1(X) W_{Q,K,V}^h

An optional intervenor sees each layer's attention rows, value cache and
head outputs before the W_O projection and may return modified head outputs.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from viti._io import atomic_write_bytes
from viti.errors import ConfigError, FormatError, GenerationError, InputError
from viti.linalg import layer_norm, make_rng, silu, softmax_rows

CHECKPOINT_MAGIC = b"VITI"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5

# intervenor(layer, attn (H,m,n), values (H,n,D), o (H,m,D)) -> o_hat (H,m,D)
Intervenor = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    vocab_size: int
    max_seq: int
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "max_seq", "ffn_mult"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(name, "must be positive")

    @property
    def hidden(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def ffn_width(self) -> int:
        return self.ffn_mult * self.hidden

    def pack(self) -> bytes:
        return struct.pack(
            "<6I", self.n_layers, self.n_heads, self.head_dim,
            self.ffn_mult, self.vocab_size, self.max_seq,
        )

    def digest(self) -> bytes:
        """8-byte fingerprint used to tie probe banks and datasets to a model shape."""
        return hashlib.sha256(self.pack()).digest()[:8]

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "head_dim": self.head_dim,
            "ffn_mult": self.ffn_mult, "vocab_size": self.vocab_size, "max_seq": self.max_seq,
        }


@dataclass(frozen=True)
class VisualSpan:
    """Half-open range [start, end) of visual token positions."""

    start: int
    end: int

    def validate(self, n: int) -> "VisualSpan":
        if not (0 <= self.start < self.end <= n):
            raise ConfigError("span", f"[{self.start}, {self.end}) outside context of length {n}")
        return self

    def __len__(self):
        return self.end - self.start


@dataclass(eq=False)
class LayerWeights:
    w_q: np.ndarray  # (H, HD, D)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (HD, HD)
    w_1: np.ndarray  # (HD, mHD)
    w_2: np.ndarray  # (HD, mHD), applied transposed
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    FIELDS = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_1", "w_2")

    @cached_property
    def f64(self) -> dict:
        w = {k: np.asarray(getattr(self, k), dtype=np.float64) for k in self.FIELDS}
        H, hd, D = w["w_q"].shape
        # fused (HD, 3*H*D) projection; column blocks q | k | v, head-major inside each
        w["w_qkv"] = np.concatenate(
            [w[k].transpose(1, 0, 2).reshape(hd, H * D) for k in ("w_q", "w_k", "w_v")], axis=1
        )
        w["w_2t"] = np.ascontiguousarray(w["w_2"].T)
        return w


@dataclass(eq=False)
class Model:
    config: ModelConfig
    tok_emb: np.ndarray  # (vocab, HD)
    pos_emb: np.ndarray  # (max_seq, HD)
    layers: list
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_out: np.ndarray  # (HD, vocab)

    def __post_init__(self):
        if len(self.layers) != self.config.n_layers:
            raise ConfigError("n_layers", f"{len(self.layers)} layer weights for L={self.config.n_layers}")

    @cached_property
    def f64(self) -> dict:
        return {
            k: np.asarray(getattr(self, k), dtype=np.float64)
            for k in ("tok_emb", "pos_emb", "lnf_g", "lnf_b", "w_out")
        }

    def arrays(self) -> list:
        """All weights in checkpoint order."""
        out = [self.tok_emb, self.pos_emb]
        for lw in self.layers:
            out.extend(getattr(lw, k) for k in LayerWeights.FIELDS)
        out.extend([self.lnf_g, self.lnf_b, self.w_out])
        return out

    def equals(self, other: "Model") -> bool:
        return self.config == other.config and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class ActivationRecord:
    layer: int
    head: int
    attn_row: np.ndarray
    o: np.ndarray
    mu: np.ndarray


@dataclass
class LayerTap:
    attn: np.ndarray  # (H, m, n)
    values: np.ndarray  # (H, n, D)
    o: np.ndarray  # (H, m, D) before intervention
    o_hat: np.ndarray  # (H, m, D) after intervention


@dataclass
class StepRecord:
    token: int
    visual_mass: float
    seconds: float
    probe_scores: dict = field(default_factory=dict)  # (layer, head) -> p
    gates: dict = field(default_factory=dict)  # (layer, head) -> fired


@dataclass
class GenerationTrace:
    tokens: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    logits: list = field(default_factory=list)

    @property
    def gate_counts(self) -> list:
        return [sum(s.gates.values()) for s in self.steps]


# ----------------------------------------------------------------------------
# construction and persistence


def _shapes(cfg: ModelConfig) -> list:
    hd, ff, H, D = cfg.hidden, cfg.ffn_width, cfg.n_heads, cfg.head_dim
    per_layer = [(hd,), (hd,), (H, hd, D), (H, hd, D), (H, hd, D), (hd, hd), (hd,), (hd,), (hd, ff), (hd, ff)]
    return (
        [(cfg.vocab_size, hd), (cfg.max_seq, hd)]
        + per_layer * cfg.n_layers
        + [(hd,), (hd,), (hd, cfg.vocab_size)]
    )


def model_from_arrays(cfg: ModelConfig, arrays: list) -> Model:
    expected = _shapes(cfg)
    if len(arrays) != len(expected):
        raise FormatError(f"expected {len(expected)} weight arrays, got {len(arrays)}")
    arrays = [np.ascontiguousarray(a, dtype=np.float32).reshape(s) for a, s in zip(arrays, expected)]
    it = iter(arrays)
    tok, pos = next(it), next(it)
    layers = []
    for _ in range(cfg.n_layers):
        kw = {k: next(it) for k in LayerWeights.FIELDS}
        layers.append(LayerWeights(**kw))
    lnf_g, lnf_b, w_out = next(it), next(it), next(it)
    return Model(cfg, tok, pos, layers, lnf_g, lnf_b, w_out)


def init_model(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Model:
    rng = make_rng(seed, 0x1417)
    arrays = []
    for shape, name in zip(_shapes(cfg), _names(cfg)):
        if name.endswith("_g"):
            arrays.append(np.ones(shape))
        elif name.endswith("_b"):
            arrays.append(np.zeros(shape))
        else:
            arrays.append(rng.normal(0.0, std, size=shape))
    return model_from_arrays(cfg, arrays)


def _names(cfg: ModelConfig) -> list:
    return ["tok_emb", "pos_emb"] + list(LayerWeights.FIELDS) * cfg.n_layers + ["lnf_g", "lnf_b", "w_out"]


def dump_checkpoint(model: Model) -> bytes:
    """Checkpoint bytes: magic, u16 version, six u32 config fields
    (L, H, D, m, vocab, max_seq), then every weight as little-endian f32 in
    the order tok_emb, pos_emb, per layer (ln1_g, ln1_b, w_q, w_k, w_v, w_o,
    ln2_g, ln2_b, w_1, w_2), lnf_g, lnf_b, w_out.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), model.config.pack()]
    parts.extend(np.asarray(a, dtype="<f4").tobytes() for a in model.arrays())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> Model:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    L, H, D, m, vocab, max_seq = struct.unpack_from("<6I", data, 6)
    cfg = ModelConfig(n_layers=L, n_heads=H, head_dim=D, ffn_mult=m, vocab_size=vocab, max_seq=max_seq)
    offset = 6 + 24
    arrays = []
    for shape in _shapes(cfg):
        count = int(np.prod(shape))
        if offset + 4 * count > len(data):
            raise FormatError("truncated checkpoint")
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape))
        offset += 4 * count
    if offset != len(data):
        raise FormatError("trailing bytes in checkpoint")
    return model_from_arrays(cfg, arrays)


def save_model(model: Model, path) -> None:
    atomic_write_bytes(path, dump_checkpoint(model))


def load_model(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# forward pass


def attend(attn_rows, values) -> np.ndarray:
    """Head activation: attention-weighted sum of value rows."""
    return np.asarray(attn_rows, dtype=np.float64) @ np.asarray(values, dtype=np.float64)


def embed(model: Model, tokens, start: int = 0, content: Optional[np.ndarray] = None) -> np.ndarray:
    """Input embeddings for ``tokens`` at positions start.. .

    ``content`` replaces the token-table lookup (used to feed perturbed
    visual embeddings); positional embeddings are always added afterwards.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if start + n > model.config.max_seq:
        raise InputError(f"sequence length {start + n} exceeds max_seq {model.config.max_seq}")
    w = model.f64
    x = w["tok_emb"][tokens] if content is None else np.asarray(content, dtype=np.float64)
    return x + w["pos_emb"][start:start + n]


class KVCache:
    """Per-generation key/value store, preallocated to max_seq positions.

    Layout is (H, n, D) per layer so attention is a batched matmul.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        shape = (cfg.n_layers, cfg.n_heads, cfg.max_seq, cfg.head_dim)
        self._k = np.empty(shape)
        self._v = np.empty(shape)
        self.lengths = [0] * cfg.n_layers

    def __len__(self):
        return self.lengths[0]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        n0 = self.lengths[layer]
        n1 = n0 + k.shape[1]
        self._k[layer, :, n0:n1] = k
        self._v[layer, :, n0:n1] = v
        self.lengths[layer] = n1
        return self._k[layer, :, :n1], self._v[layer, :, :n1]


def _attention(xn: np.ndarray, lw: LayerWeights, cache: Optional[KVCache], layer: int):
    """Causal multi-head attention for m new rows; returns (A (H,m,n), V (H,n,D), o (H,m,D))."""
    w = lw.f64
    m = xn.shape[0]
    H, D = lw.w_q.shape[0], lw.w_q.shape[2]
    qkv = (xn @ w["w_qkv"]).reshape(m, 3, H, D).transpose(1, 2, 0, 3)  # (3, H, m, D)
    q, k_new, v_new = qkv[0], qkv[1], qkv[2]
    if cache is None:
        keys, values = k_new, v_new
    else:
        keys, values = cache.append(layer, k_new, v_new)
    n = keys.shape[1]
    scores = (q @ keys.transpose(0, 2, 1)) / np.sqrt(D)
    if m > 1:
        offset = n - m
        mask = np.arange(n)[None, :] > (offset + np.arange(m))[:, None]
        scores = np.where(mask[None], -np.inf, scores)
    attn = softmax_rows(scores.reshape(H * m, n)).reshape(H, m, n)
    o = attn @ values
    return attn, values, o


def layer_forward(
    X: np.ndarray,
    lw: LayerWeights,
    layer: int = 0,
    intervenor: Optional[Intervenor] = None,
    cache: Optional[KVCache] = None,
    taps: Optional[list] = None,
) -> np.ndarray:
    """Advance hidden rows ``X`` (m, HD) through one layer.

    Without a cache the rows are the whole causal context; with a cache they
    are appended after the cached positions.
    """
    w = lw.f64
    X = np.asarray(X, dtype=np.float64)
    xn = layer_norm(X, w["ln1_g"], w["ln1_b"], LN_EPS)
    attn, values, o = _attention(xn, lw, cache, layer)
    o_hat = o
    if intervenor is not None:
        try:
            o_hat = np.asarray(intervenor(layer, attn, values, o), dtype=np.float64)
        except Exception as exc:
            raise GenerationError(f"intervenor failed at layer {layer}: {exc!r}") from exc
        if o_hat.shape != o.shape:
            raise GenerationError(f"intervenor returned shape {o_hat.shape}, expected {o.shape}")
    if taps is not None:
        taps.append(LayerTap(attn, values, o, o_hat))
    H, m, D = o_hat.shape
    O = o_hat.transpose(1, 0, 2).reshape(m, H * D) @ w["w_o"]
    h = X + O
    ff = silu(layer_norm(h, w["ln2_g"], w["ln2_b"], LN_EPS) @ w["w_1"]) @ w["w_2t"]
    return h + ff


def final_logits(model: Model, X: np.ndarray) -> np.ndarray:
    w = model.f64
    return layer_norm(X, w["lnf_g"], w["lnf_b"], LN_EPS) @ w["w_out"]


def forward(
    model: Model,
    tokens,
    content: Optional[np.ndarray] = None,
    intervenor: Optional[Intervenor] = None,
    taps: Optional[list] = None,
) -> np.ndarray:
    """Full causal forward over ``tokens``; returns logits (n, vocab)."""
    if len(tokens) == 0:
        raise InputError("empty token sequence")
    X = embed(model, tokens, 0, content)
    for l, lw in enumerate(model.layers):
        X = layer_forward(X, lw, l, intervenor, None, taps)
    return final_logits(model, X)


def head_forward(X: np.ndarray, lw: LayerWeights, head: int, span: VisualSpan, layer: int = 0,
                 epsilon: float = 1e-8) -> list:
    """One head over the full causal context ``X`` (n, HD), taken as the layer input.

    Returns an ActivationRecord per query position with the attention row,
    the head activation ``o`` and its visual-only counterpart ``mu``.
    """
    from viti.vri import visual_activation

    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    span.validate(n)
    w = lw.f64
    xn = layer_norm(X, w["ln1_g"], w["ln1_b"], LN_EPS)
    attn, values, o = _attention(xn, lw, None, layer)
    out = []
    for i in range(n):
        row = attn[head, i]
        mu = visual_activation(row, values[head], span, epsilon) if i >= span.start else np.zeros_like(o[head, i])
        out.append(ActivationRecord(layer, head, row, o[head, i], mu))
    return out


def decode_greedy(
    model: Model,
    prompt,
    span: Optional[VisualSpan] = None,
    max_new: int = 1,
    intervenor: Optional[Intervenor] = None,
    content: Optional[np.ndarray] = None,
    eos: Optional[int] = None,
) -> GenerationTrace:
    """Argmax decoding with a KV cache.

    The prompt minus its last token is prefilled without intervention; the
    last prompt token and every generated token then run one decode step
    each, which is where ``intervenor`` is applied. ``content`` optionally
    overrides the prompt's token embeddings (n, HD).
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("empty prompt")
    if len(prompt) + max_new > model.config.max_seq:
        raise InputError(f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq {model.config.max_seq}")
    if span is not None:
        span.validate(len(prompt))
    trace = GenerationTrace()
    if max_new <= 0:
        return trace

    cache = KVCache(model.config)
    n0 = len(prompt) - 1
    if n0 > 0:
        X = embed(model, prompt[:n0], 0, None if content is None else content[:n0])
        for l, lw in enumerate(model.layers):
            X = layer_forward(X, lw, l, None, cache)

    log_step = getattr(intervenor, "step_log", None)
    token, pos = prompt[-1], n0
    x_content = None if content is None else content[n0:n0 + 1]
    for _ in range(max_new):
        t0 = time.perf_counter()
        X = embed(model, [token], pos, x_content)
        taps = [] if span is not None else None
        for l, lw in enumerate(model.layers):
            X = layer_forward(X, lw, l, intervenor, cache, taps)
        logits = final_logits(model, X)[0]
        token = int(np.argmax(logits))
        elapsed = time.perf_counter() - t0
        mass = float("nan")
        if taps:
            mass = float(np.mean([t.attn[:, -1, span.start:span.end].sum(axis=-1).mean() for t in taps]))
        step = StepRecord(token=token, visual_mass=mass, seconds=elapsed)
        if log_step is not None:
            step.probe_scores, step.gates = log_step()
        trace.tokens.append(token)
        trace.steps.append(step)
        trace.logits.append(logits)
        pos += 1
        x_content = None
        if eos is not None and token == eos:
            break
    return trace
