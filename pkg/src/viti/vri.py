"""Visual recall intervention: gated mixing of head activations toward their
visual-only counterpart during decoding."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np
from scipy.special import expit

from viti.errors import CompatibilityError, ConfigError
from viti.runtime import GenerationTrace, Model, VisualSpan, decode_greedy
from viti.vnd import ProbeBank, open_unit, probe_score, select_top_beta


@dataclass(frozen=True)
class InterventionConfig:
    alpha0: float = 0.20
    beta: float = 0.10
    gate_threshold: float = 0.5
    epsilon: float = 1e-8
    # ablation switches: detector=False opens the gate with alpha = alpha0;
    # recall="probe" mixes toward the probe direction rescaled to |o|
    detector: bool = True
    recall: str = "visual"

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigError("alpha0", f"must be in [0, 1], got {self.alpha0}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("beta", f"must be in (0, 1], got {self.beta}")
        if self.epsilon < 0:
            raise ConfigError("epsilon", "must be non-negative")
        if self.recall not in ("visual", "probe"):
            raise ConfigError("recall", f"unknown recall mode {self.recall!r}")

    def with_(self, **kw) -> "InterventionConfig":
        return replace(self, **kw)


def visual_activation(attn_row, value_rows, span: VisualSpan, epsilon: float = 1e-8) -> np.ndarray:
    """Attention-weighted mean of the visual value rows, weights renormalised over the span."""
    attn_row = np.asarray(attn_row, dtype=np.float64)
    value_rows = np.asarray(value_rows, dtype=np.float64)
    if span.end <= span.start:
        raise ConfigError("span", "empty visual span")
    span.validate(len(attn_row))
    a = attn_row[span.start:span.end]
    return (a / (a.sum() + epsilon)) @ value_rows[span.start:span.end]


def visual_activation_heads(attn, values, span: VisualSpan, epsilon: float = 1e-8) -> np.ndarray:
    """Vectorised form: attn (H, m, n), values (H, n, D) -> mu (H, m, D)."""
    a = attn[..., span.start:span.end]
    a = a / (a.sum(axis=-1, keepdims=True) + epsilon)
    return a @ values[:, span.start:span.end]


def gated_intervention(o, mu, p: float, cfg: InterventionConfig) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    if p <= cfg.gate_threshold or cfg.alpha0 == 0.0:
        return o
    alpha = cfg.alpha0 * p
    return (1.0 - alpha) * o + alpha * np.asarray(mu, dtype=np.float64)


def _probe_target(theta: np.ndarray, o: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(theta, axis=-1, keepdims=True)
    return theta / np.where(norm > 0, norm, 1.0) * np.linalg.norm(o, axis=-1, keepdims=True)


def viti_layer_hook(records, bank: ProbeBank, selected, cfg: InterventionConfig,
                    span: Optional[VisualSpan] = None, values=None, decisions: Optional[dict] = None) -> dict:
    """Reference (per-record) form of one layer's intervention.

    ``records`` are ActivationRecords for the current query position. Returns
    {(layer, head): o_hat}. Selected heads go through probe scoring and the
    gated mix; the rest pass through. ``decisions`` collects
    {(layer, head): (p, fired)} for selected heads.
    """
    selected = set(selected)
    out = {}
    for r in records:
        key = (r.layer, r.head)
        if key not in selected:
            out[key] = r.o
            continue
        probe = bank.probe(r.layer, r.head)
        p = probe_score(probe, r.o)
        if cfg.recall == "probe":
            target = _probe_target(probe.theta.astype(np.float64), np.asarray(r.o, np.float64))
        else:
            target = r.mu
        if cfg.detector:
            fired = p > cfg.gate_threshold and cfg.alpha0 > 0
            o_hat = gated_intervention(r.o, target, p, cfg)
        else:
            fired = cfg.alpha0 > 0
            o_hat = (1.0 - cfg.alpha0) * np.asarray(r.o) + cfg.alpha0 * target if fired else r.o
        if decisions is not None:
            decisions[key] = (p, bool(fired))
        out[key] = o_hat
    return out


class VitiHook:
    """Runtime intervenor applying the gated mix to selected heads of every layer.

    Plugs into ``runtime.layer_forward``; per-step decisions are collected
    for the generation trace via ``step_log``.
    """

    def __init__(self, bank: ProbeBank, selected: Iterable, cfg: InterventionConfig, span: VisualSpan,
                 model: Optional[Model] = None):
        if model is not None:
            c = model.config
            if bank.config_digest != c.digest() or (bank.n_layers, bank.n_heads, bank.head_dim) != (
                c.n_layers, c.n_heads, c.head_dim
            ):
                raise CompatibilityError("probe bank was trained for a different model configuration")
        self.cfg = cfg
        self.span = span
        self.n_layers = bank.n_layers
        thetas = bank.thetas().astype(np.float64)
        biases = bank.biases()
        by_layer = {}
        for l, h in sorted(set(selected)):
            by_layer.setdefault(l, []).append(h)
        self._heads = {l: np.array(hs) for l, hs in by_layer.items()}
        # laid out for (k, m, D) @ (k, D, 1) so the decode step is one matmul
        self._theta = {l: thetas[l, hs][:, :, None] for l, hs in self._heads.items()}
        self._bias = {l: biases[l, hs][:, None, None] for l, hs in self._heads.items()}
        self._log = []

    def __call__(self, layer, attn, values, o):
        heads = self._heads.get(layer)
        if heads is None or self.cfg.alpha0 == 0.0:
            return o
        cfg, span = self.cfg, self.span
        o_sel = o[heads]  # (k, m, D)
        theta = self._theta[layer]
        # raw sigmoid here; alpha <= alpha0 holds even where it saturates, and
        # step_log applies the open-interval clip outside the timed path
        p = expit(o_sel @ theta + self._bias[layer])  # (k, m, 1)
        if cfg.detector:
            fire = p > cfg.gate_threshold
            alpha = cfg.alpha0 * p
        else:
            fire = np.ones_like(p, dtype=bool)
            alpha = np.full_like(p, cfg.alpha0)
        self._log.append((layer, heads, p, fire))
        if not fire.any():
            # nothing mixes, so the recall target is never needed
            return o
        if cfg.recall == "probe":
            target = _probe_target(theta[..., 0][:, None, :], o_sel)
        else:
            # mu with the span renormaliser applied after the weighted sum
            a = attn[heads, :, span.start:span.end]
            target = (a @ values[heads, span.start:span.end]) / (a.sum(axis=-1, keepdims=True) + cfg.epsilon)
        mixed = o_sel + alpha * (target - o_sel)
        o_hat = o.copy()
        o_hat[heads] = mixed if fire.all() else np.where(fire, mixed, o_sel)
        return o_hat

    def step_log(self):
        scores, gates = {}, {}
        for layer, heads, p, fire in self._log:
            for h, pv, fv in zip(heads.tolist(), open_unit(p[:, -1, 0]).tolist(), fire[:, -1, 0].tolist()):
                scores[(layer, h)] = pv
                gates[(layer, h)] = fv
        self._log = []
        return scores, gates


def viti_generate(model: Model, prompt, span: VisualSpan, bank: ProbeBank, cfg: InterventionConfig,
                  max_new: int = 1, selected=None, content=None, eos=None) -> GenerationTrace:
    """Greedy decoding with the intervention active on the top-beta heads."""
    if selected is None:
        selected = select_top_beta(bank, cfg.beta)
    hook = VitiHook(bank, selected, cfg, span, model)
    return decode_greedy(model, prompt, span, max_new, hook, content, eos)
