"""Experiments around the intervention: mutual-information checks,
degradation curves, ablations, hyperparameter sweeps and latency."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
import tracemalloc
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from viti.errors import ConfigError, InputError
from viti.linalg import make_rng
from viti.runtime import Model, VisualSpan, decode_greedy
from viti.synthtask import EvalResult, Perturbation, eval_task, perturbed_content
from viti.vnd import ProbeBank, select_top_beta
from viti.vri import InterventionConfig, VitiHook


# ----------------------------------------------------------------------------
# mutual information


@dataclass
class MIEstimate:
    value: float
    bins: int
    n_samples: int
    bootstrap_ci: tuple
    estimator: str = "binned-plugin"

    @property
    def ci_width(self) -> float:
        return self.bootstrap_ci[1] - self.bootstrap_ci[0]


def quantile_bins(x, bins: int) -> np.ndarray:
    """Equal-mass bin index per sample; tied values share a bin."""
    x = np.asarray(x, dtype=np.float64)
    ranks = rankdata(x, method="min") - 1
    return np.minimum((ranks * bins) // len(x), bins - 1).astype(np.int64)


def _entropy(counts, n) -> float:
    p = counts[counts > 0] / n
    return -math.fsum(p * np.log(p))


def _mi_from_bins(bx, by, bins) -> float:
    n = len(bx)
    joint = np.bincount(bx * bins + by, minlength=bins * bins)
    cx = np.bincount(bx, minlength=bins)
    cy = np.bincount(by, minlength=bins)
    mi = (_entropy(cx, n) + _entropy(cy, n)) - _entropy(joint, n)
    # Miller-Madow first-order bias correction, applied to each entropy term
    kx, ky, kxy = (int(np.count_nonzero(c)) - 1 for c in (cx, cy, joint))
    return mi + (kx + ky - kxy) / (2 * n)


def mi_binned(x, y, bins: int = 16, n_boot: int = 200, seed: int = 0) -> MIEstimate:
    """Plug-in MI (nats) on quantile-binned scalars with Miller-Madow correction.

    The interval is the point estimate +- 1.96 bootstrap standard errors over
    ``n_boot`` paired resamples of the binned data.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("mi_binned needs equal-length 1-D samples")
    n = len(x)
    if n < 30 * bins:
        raise InputError(f"need at least {30 * bins} samples for {bins} bins, got {n}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.warn("constant input column; mutual information is 0", RuntimeWarning, stacklevel=2)
        return MIEstimate(0.0, bins, n, (0.0, 0.0))
    bx, by = quantile_bins(x, bins), quantile_bins(y, bins)
    value = _mi_from_bins(bx, by, bins)
    rng = make_rng(seed, 0xB007)
    boots = [_mi_from_bins(bx[idx], by[idx], bins) for idx in rng.integers(0, n, size=(n_boot, n))]
    se = float(np.std(boots, ddof=1))
    return MIEstimate(value, bins, n, (value - 1.96 * se, value + 1.96 * se))


# ----------------------------------------------------------------------------
# Theorem check: mixing toward the visual activation never loses visual information


@dataclass
class TheoremReport:
    status: str  # pass | fail | inconclusive
    fraction: float
    pairs: int
    gated_fraction: float
    details: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"status": self.status, "fraction": self.fraction, "pairs": self.pairs,
                "gated_fraction": self.gated_fraction, "details": self.details}


class _Capture:
    """Wraps an intervenor and keeps the last-row o / o_hat of every layer."""

    def __init__(self, hook):
        self.hook = hook
        self.rows = {}

    def __call__(self, layer, attn, values, o):
        o_hat = self.hook(layer, attn, values, o)
        self.rows[layer] = (o[:, -1].copy(), o_hat[:, -1].copy())
        return o_hat

    def step_log(self):
        return self.hook.step_log()


def compare_mi(o_proj, o_hat_proj, vis, bins=16, seed=0) -> dict:
    before = mi_binned(o_proj, vis, bins, seed=seed)
    after = mi_binned(o_hat_proj, vis, bins, seed=seed)
    return {
        "mi_o": before.value, "mi_o_hat": after.value, "tolerance": before.ci_width,
        "ok": after.value >= before.value - before.ci_width,
        "strict": after.bootstrap_ci[0] > before.bootstrap_ci[1],
    }


def theorem1_check(model: Model, bank: ProbeBank, cfg: InterventionConfig, samples, projections: int = 8,
                   perturbation: Optional[Perturbation] = Perturbation("gaussian", 1000, 0),
                   bins: int = 16, seed: int = 0, threshold: float = 0.95) -> TheoremReport:
    """Fraction of (selected head, random projection) pairs with I(o_hat; X_vis) >= I(o; X_vis) - tol.

    X_vis is summarised per sample by a random projection of the mean visual
    input embedding; o and o_hat are projected onto random D-dim directions.
    """
    selected = select_top_beta(bank, cfg.beta)
    D, HD = model.config.head_dim, model.config.hidden
    o_rows, oh_rows, vis = [], [], []
    gated = 0
    for i, s in enumerate(samples):
        content = perturbed_content(model, s, perturbation, i)
        cap = _Capture(VitiHook(bank, selected, cfg, s.span, model))
        trace = decode_greedy(model, s.prompt, s.span, 1, cap, content)
        gated += any(trace.steps[0].gates.values())
        o_rows.append([cap.rows[l][0][h] for l, h in selected])
        oh_rows.append([cap.rows[l][1][h] for l, h in selected])
        emb = content if content is not None else model.f64["tok_emb"][np.asarray(s.prompt)]
        vis.append(emb[s.span.start:s.span.end].mean(axis=0))
    # with alpha0 = 0 nothing is mixed and the estimates are equal by construction
    if gated == 0 and cfg.alpha0 > 0:
        return TheoremReport("inconclusive", float("nan"), 0, 0.0)
    o_rows, oh_rows, vis = np.asarray(o_rows), np.asarray(oh_rows), np.asarray(vis)
    rng = make_rng(seed, 0x7E01)
    details = []
    for j in range(projections):
        u = rng.standard_normal(D)
        r = rng.standard_normal(HD)
        v = vis @ r
        for k, (l, h) in enumerate(selected):
            row = compare_mi(o_rows[:, k] @ u, oh_rows[:, k] @ u, v, bins, seed + j)
            details.append({"layer": l, "head": h, "projection": j, **row})
    frac = float(np.mean([d["ok"] for d in details]))
    return TheoremReport("pass" if frac >= threshold else "fail", frac, len(details),
                         gated / len(samples), details)


# ----------------------------------------------------------------------------
# degradation, ablation, sweep


def degradation_curve(model: Model, samples, steps: Sequence[int], seed: int = 0, schedule=None) -> list:
    steps = list(steps)
    if steps != sorted(steps) or 0 not in steps:
        raise InputError("steps must be ascending and include 0")
    rows = []
    for t in steps:
        res = eval_task(model, samples, None, Perturbation("gaussian", t, seed, schedule) if t else None)
        rows.append({"step": t, "accuracy": res.metrics.accuracy, "f1": res.metrics.f1,
                     "visual_mass": res.visual_mass})
    return rows


def trend(rows) -> float:
    """Spearman correlation between noise step and accuracy."""
    return float(spearmanr([r["step"] for r in rows], [r["accuracy"] for r in rows]).statistic)


def layers_of(selected) -> list:
    return sorted({l for l, _ in selected})


def ablation_suite(model: Model, bank: ProbeBank, samples, cfg: InterventionConfig = InterventionConfig(),
                   perturbation: Optional[Perturbation] = Perturbation("gaussian", 1000, 0),
                   wo_vnd_heads: str = "selected") -> dict:
    """Full method, always-on (no detector), probe-direction recall (no visual
    recall) and the plain baseline, each on perturbed and clean inputs.

    Without the detector the gate is always open with alpha = alpha0. It acts
    on the top-beta heads by default; ``wo_vnd_heads="layers"`` widens it to
    every head of the layers holding a selected head.
    """
    selected = select_top_beta(bank, cfg.beta)
    if wo_vnd_heads == "selected":
        open_heads = selected
    elif wo_vnd_heads == "layers":
        open_heads = [(l, h) for l in layers_of(selected) for h in range(model.config.n_heads)]
    else:
        raise ConfigError("wo_vnd_heads", f"expected 'selected' or 'layers', got {wo_vnd_heads!r}")
    variants = {
        "full": (bank, cfg, selected),
        "wo_vnd": (bank, cfg.with_(detector=False), open_heads),
        "wo_vri": (bank, cfg.with_(recall="probe"), selected),
        "baseline": None,
    }
    table = {}
    for name, iv in variants.items():
        table[name] = {
            "perturbed": eval_task(model, samples, iv, perturbation).to_dict(),
            "clean": eval_task(model, samples, iv, None).to_dict(),
        }
    return table


@dataclass
class SweepResult:
    alpha0s: list
    betas: list
    grid: dict  # (alpha0, beta) -> score
    best: tuple
    best_score: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha0", "beta", "score"])
        for a in self.alpha0s:
            for b in self.betas:
                w.writerow([repr(a), repr(b), repr(self.grid[(a, b)])])
        return buf.getvalue()


def sweep_score(res: EvalResult) -> float:
    """Overall exact-match accuracy across every question kind."""
    per = res.metrics.per_kind
    return float(np.mean(list(per.values()))) if per else 0.0


def sweep(model: Model, bank: ProbeBank, samples, alpha0s, betas,
          perturbation: Optional[Perturbation] = None, base: InterventionConfig = InterventionConfig()) -> SweepResult:
    alpha0s, betas = [float(a) for a in alpha0s], [float(b) for b in betas]
    if not alpha0s or not betas:
        raise InputError("sweep grids must be non-empty")
    grid = {}
    for a in alpha0s:
        for b in betas:
            grid[(a, b)] = sweep_score(eval_task(model, samples, (bank, base.with_(alpha0=a, beta=b)), perturbation))
    best = max(grid, key=lambda k: (grid[k], -k[0], -k[1]))
    return SweepResult(alpha0s, betas, grid, best, grid[best])


def pivot_sweep_csv(text: str) -> str:
    """Long (alpha0, beta, score) CSV to a matrix with alpha0 rows and beta columns."""
    rows = list(csv.DictReader(io.StringIO(text)))
    alphas = sorted({float(r["alpha0"]) for r in rows})
    betas = sorted({float(r["beta"]) for r in rows})
    cell = {(float(r["alpha0"]), float(r["beta"])): r["score"] for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha0"] + [repr(b) for b in betas])
    for a in alphas:
        w.writerow([repr(a)] + [cell.get((a, b), "") for b in betas])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# overhead


def bench_prompts(cfg, context: int, n: int = 2, seed: int = 0, visual: int = 16) -> list:
    """``n`` random prompts of length ``context`` with a visual span after a short prefix."""
    if context < visual + 6:
        raise InputError(f"context {context} too short for a {visual}-token visual span")
    rng = make_rng(seed, 0xBE7C)
    span = VisualSpan(5, 5 + visual)
    return [(rng.integers(0, cfg.vocab_size, size=context).tolist(), span) for _ in range(n)]


def overhead_benchmark(model: Model, bank: ProbeBank, cfg: InterventionConfig, prompts, repeats: int = 10,
                       max_new: int = 16) -> dict:
    """Median per-token decode latency with and without the intervention.

    ``prompts`` is a list of (tokens, VisualSpan). After one discarded warm-up
    of each path, every repeat decodes the prompt once per path back to back.
    ``ratio`` is the median over those pairs of the ratio of per-token
    medians, which is robust to the machine speeding up or slowing down
    between pairs. Memory is measured in separate traced runs so tracing does
    not distort the timings.
    """
    if repeats < 5:
        raise InputError("repeats must be >= 5")
    selected = select_top_beta(bank, cfg.beta)

    def greedy(tokens, span):
        return decode_greedy(model, tokens, span, max_new)

    def viti(tokens, span):
        return decode_greedy(model, tokens, span, max_new, VitiHook(bank, selected, cfg, span, model))

    base_t, viti_t, ratios = [], [], []
    for tokens, span in prompts:
        greedy(tokens, span)
        viti(tokens, span)
        for r in range(repeats):
            # alternate the order so slow drift in machine speed cancels across pairs
            order = (greedy, viti) if r % 2 == 0 else (viti, greedy)
            times = {fn: [s.seconds for s in fn(tokens, span).steps] for fn in order}
            base_t.extend(times[greedy])
            viti_t.extend(times[viti])
            ratios.append(statistics.median(times[viti]) / statistics.median(times[greedy]))

    def peak(fn):
        tracemalloc.start()
        for tokens, span in prompts:
            fn(tokens, span)
        _, p = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        return p

    base_med, viti_med = statistics.median(base_t), statistics.median(viti_t)
    mem_base, mem_viti = peak(greedy), peak(viti)
    return {
        "baseline_latency": base_med,
        "viti_latency": viti_med,
        "ratio": statistics.median(ratios),
        "peak_memory_delta": mem_viti - mem_base,
        "tokens_timed": len(base_t),
    }


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
