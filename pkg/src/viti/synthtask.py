"""Synthetic grid-world visual QA and the toy-model trainer.

A scene is a square grid; each cell is empty or holds one object with a
shape and a colour. The scene is serialised row-major, one visual token per
cell, between <img> and </img>. Questions ask about existence of a
colour/shape pair, the colour of a unique shape, or the count of a shape.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from viti._io import atomic_write_text
from viti.errors import InputError, TrainingError
from viti.linalg import make_rng
from viti.runtime import Model, ModelConfig, VisualSpan, decode_greedy, model_from_arrays

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "yellow", "white")
MAX_COUNT = 4
KINDS = ("existence", "color", "count")

SPECIALS = ["<pad>", "<bos>", "<eos>", "<img>", "</img>"]
SYSTEM = ["system", "look", "answer"]
VISUAL = ["v:empty"] + [f"v:{c}-{s}" for s in SHAPES for c in COLORS]
WORDS = ["is", "there", "a", "what", "color", "the", "how", "many", "?"]
ANSWERS = ["yes", "no", "0", "1", "2", "3", "4"]
TOKENS = SPECIALS + SYSTEM + VISUAL + WORDS + list(SHAPES) + list(COLORS) + ANSWERS
TOK = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)
VISUAL_IDS = np.array([TOK[v] for v in VISUAL])


def visual_token(cell) -> int:
    if cell is None:
        return TOK["v:empty"]
    shape, color = cell
    return TOK[f"v:{color}-{shape}"]


@dataclass
class Scene:
    size: int
    cells: list  # row-major; None or (shape, color)

    def objects(self):
        return [c for c in self.cells if c is not None]

    def to_json(self):
        return [None if c is None else list(c) for c in self.cells]

    @classmethod
    def from_json(cls, size, cells):
        return cls(size, [None if c is None else tuple(c) for c in cells])


@dataclass
class QASample:
    prompt: list
    span: VisualSpan
    answer: int
    kind: str
    scene: Optional[Scene] = None
    question: list = field(default_factory=list)

    @property
    def visual_tokens(self):
        return self.prompt[self.span.start:self.span.end]

    def to_json(self) -> dict:
        return {
            "tokens": self.prompt,
            "span": [self.span.start, self.span.end],
            "answer": self.answer,
            "kind": self.kind,
            "grid": self.scene.size if self.scene else None,
            "scene": self.scene.to_json() if self.scene else None,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "QASample":
        scene = Scene.from_json(rec["grid"], rec["scene"]) if rec.get("scene") is not None else None
        span = VisualSpan(*rec["span"])
        prompt = list(rec["tokens"])
        return cls(prompt, span, rec["answer"], rec["kind"], scene, prompt[span.end + 1:])


@dataclass(frozen=True)
class GridConfig:
    size: int = 4
    min_objects: int = 2
    max_objects: int = 6
    max_prefix: int = 8


DEFAULT_MIX = {"existence": 0.6, "color": 0.2, "count": 0.2}


def _random_scene(rng, grid: GridConfig) -> Scene:
    n_cells = grid.size * grid.size
    while True:
        k = int(rng.integers(grid.min_objects, grid.max_objects + 1))
        pos = rng.choice(n_cells, size=k, replace=False)
        cells = [None] * n_cells
        for p in pos:
            cells[p] = (SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))])
        counts = [sum(1 for c in cells if c and c[0] == s) for s in SHAPES]
        if max(counts) <= MAX_COUNT:
            return Scene(grid.size, cells)


def _prompt(scene: Scene, question: list, prefix: int = 0):
    """``<bos>``, ``prefix`` filler words, then image and question.

    The filler shifts the image so its position alone does not identify it.
    """
    vis = [visual_token(c) for c in scene.cells]
    filler = [TOK[SYSTEM[i % len(SYSTEM)]] for i in range(prefix)]
    head = [TOK["<bos>"]] + filler + [TOK["<img>"]]
    start = len(head)
    prompt = head + vis + [TOK["</img>"]] + [TOK[w] for w in question]
    return prompt, VisualSpan(start, start + len(vis))


def _existence(rng, scene: Scene, want_yes: bool):
    present = set(scene.objects())
    if want_yes:
        objs = sorted(present)
        shape, color = objs[rng.integers(len(objs))]
    else:
        absent = [(s, c) for s in SHAPES for c in COLORS if (s, c) not in present]
        # half the negatives share a shape or colour with something in the scene
        near = [a for a in absent if any(a[0] == p[0] or a[1] == p[1] for p in present)]
        pool = near if near and rng.random() < 0.5 else absent
        shape, color = pool[rng.integers(len(pool))]
    return ["is", "there", "a", color, shape, "?"], "yes" if want_yes else "no"


def _color(rng, scene: Scene):
    singles = [s for s in SHAPES if sum(1 for o in scene.objects() if o[0] == s) == 1]
    if not singles:
        return None
    shape = singles[rng.integers(len(singles))]
    color = next(o[1] for o in scene.objects() if o[0] == shape)
    return ["what", "color", "is", "the", shape, "?"], color


def _count(rng, scene: Scene):
    shape = SHAPES[rng.integers(len(SHAPES))]
    n = sum(1 for o in scene.objects() if o[0] == shape)
    return ["how", "many", shape, "?"], str(n)


def gen_dataset(seed: int, size: int, grid: GridConfig = GridConfig(), mix: Optional[dict] = None) -> list:
    """``size`` QA samples; existence answers alternate yes/no so they stay balanced."""
    if size <= 0:
        raise InputError("dataset size must be positive")
    mix = dict(DEFAULT_MIX if mix is None else mix)
    kinds = list(mix)
    probs = np.array([mix[k] for k in kinds], dtype=np.float64)
    probs /= probs.sum()
    out = []
    n_exist = 0
    for i in range(size):
        rng = make_rng(seed, i)
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        while True:
            scene = _random_scene(rng, grid)
            if kind == "existence":
                q = _existence(rng, scene, want_yes=(n_exist % 2 == 0))
            elif kind == "color":
                q = _color(rng, scene)
            else:
                q = _count(rng, scene)
            if q is not None:
                break
        if kind == "existence":
            n_exist += 1
        question, answer = q
        prompt, span = _prompt(scene, question, int(rng.integers(grid.max_prefix + 1)))
        out.append(QASample(prompt, span, TOK[answer], kind, scene, [TOK[w] for w in question]))
    return out


def save_dataset(samples, path) -> None:
    """Line-delimited JSON, one sample per line."""
    lines = [json.dumps(s.to_json(), separators=(",", ":")) for s in samples]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path) -> list:
    return [QASample.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


# ----------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    n: int
    per_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "n": self.n, "per_kind": self.per_kind}


def binary_metrics(pred_yes, gold_yes):
    pred_yes = np.asarray(pred_yes, dtype=bool)
    gold_yes = np.asarray(gold_yes, dtype=bool)
    tp = int(np.sum(pred_yes & gold_yes))
    fp = int(np.sum(pred_yes & ~gold_yes))
    fn = int(np.sum(~pred_yes & gold_yes))
    n = len(gold_yes)
    acc = float(np.mean(pred_yes == gold_yes)) if n else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, precision, recall, f1


def score(samples, predictions) -> Metrics:
    """Binary metrics on existence questions ("yes" positive) plus exact-match per kind."""
    per_kind = {}
    for kind in KINDS:
        idx = [i for i, s in enumerate(samples) if s.kind == kind]
        if idx:
            per_kind[kind] = float(np.mean([predictions[i] == samples[i].answer for i in idx]))
    ex = [i for i, s in enumerate(samples) if s.kind == "existence"]
    pred_yes = [predictions[i] == TOK["yes"] for i in ex]
    gold_yes = [samples[i].answer == TOK["yes"] for i in ex]
    acc, p, r, f1 = binary_metrics(pred_yes, gold_yes)
    return Metrics(acc, p, r, f1, len(ex), per_kind)


# ----------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Perturbation:
    """Evaluation-time perturbation of the visual span; ``seed`` keys per-sample noise."""

    kind: str = "gaussian"  # gaussian | replacement
    steps: int = 1000
    seed: int = 0
    schedule: object = None


@dataclass
class EvalResult:
    metrics: Metrics
    predictions: list
    visual_mass: float
    gate_rate: float = 0.0

    def to_dict(self) -> dict:
        return {**self.metrics.to_dict(), "visual_mass": self.visual_mass, "gate_rate": self.gate_rate}


def perturbed_content(model: Model, sample: QASample, perturbation: Optional[Perturbation], index: int):
    from viti.perturb import GAUSSIAN, REPLACEMENT, NoiseSchedule, perturb_sample

    if perturbation is None:
        return None
    if perturbation.kind == "gaussian" and perturbation.steps == 0:
        return None
    schedule = perturbation.schedule or NoiseSchedule()
    kind = GAUSSIAN if perturbation.kind == "gaussian" else REPLACEMENT
    rng = make_rng(perturbation.seed, 0xE7A1, index)
    return perturb_sample(model, sample, kind, schedule, rng, steps=perturbation.steps)


def _eval_range(model: Model, samples, start: int, intervention, perturbation):
    from viti.vri import VitiHook

    out = []
    for i, s in enumerate(samples, start):
        content = perturbed_content(model, s, perturbation, i)
        hook = None if intervention is None else VitiHook(*intervention[:3], s.span, model)
        step = decode_greedy(model, s.prompt, s.span, 1, hook, content).steps[0]
        out.append((step.token, step.visual_mass, sum(step.gates.values()), len(step.gates)))
    return out


def eval_task(model: Model, samples, intervention=None, perturbation: Optional[Perturbation] = None,
              workers: int = 1) -> EvalResult:
    """Greedy first-token answers for every sample.

    ``intervention`` is ``(bank, cfg)`` or ``(bank, cfg, selected_heads)``.
    Per-sample noise is keyed by the sample index, so splitting the work over
    ``workers`` processes gives the same result as a single pass.
    """
    from viti.vnd import select_top_beta

    samples = list(samples)
    if intervention is not None:
        bank, cfg = intervention[0], intervention[1]
        selected = intervention[2] if len(intervention) > 2 else select_top_beta(bank, cfg.beta)
        intervention = (bank, selected, cfg)
    if workers > 1 and len(samples) > 1:
        from concurrent.futures import ProcessPoolExecutor

        bounds = np.linspace(0, len(samples), min(workers, len(samples)) + 1).astype(int)
        with ProcessPoolExecutor(len(bounds) - 1) as pool:
            futures = [pool.submit(_eval_range, model, samples[a:b], a, intervention, perturbation)
                       for a, b in zip(bounds[:-1], bounds[1:])]
            rows = [r for f in futures for r in f.result()]
    else:
        rows = _eval_range(model, samples, 0, intervention, perturbation)
    preds = [r[0] for r in rows]
    gates, slots = sum(r[2] for r in rows), sum(r[3] for r in rows)
    return EvalResult(score(samples, preds), preds, float(np.mean([r[1] for r in rows])),
                      gates / slots if slots else 0.0)


# ----------------------------------------------------------------------------
# training (torch mirror of the numpy runtime)


VISUAL_SHARED = 0.6
VISUAL_SCALE = 3.0


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 40
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.01
    seed: int = 0
    target_accuracy: float = 0.99
    eval_every: int = 2
    visual_shared: float = VISUAL_SHARED
    visual_scale: float = VISUAL_SCALE


def _torch_model(cfg: ModelConfig, seed: int, dtype=None):
    import torch
    from torch import nn

    class ToyTransformer(nn.Module):
        def __init__(self):
            super().__init__()
            g = torch.Generator().manual_seed(seed)
            hd, ff, H, D = cfg.hidden, cfg.ffn_width, cfg.n_heads, cfg.head_dim

            def p(*shape, std=0.02):
                return nn.Parameter(torch.randn(*shape, generator=g, dtype=dtype) * std)

            self.tok_emb = p(cfg.vocab_size, hd, std=1.0)
            self.pos_emb = p(cfg.max_seq, hd, std=0.1)
            self.blocks = nn.ParameterList()
            self.names = []
            for _ in range(cfg.n_layers):
                for name, shape, std in (
                    ("ln1_g", None, None), ("ln1_b", None, None),
                    ("w_q", (H, hd, D), hd ** -0.5), ("w_k", (H, hd, D), hd ** -0.5),
                    ("w_v", (H, hd, D), hd ** -0.5), ("w_o", (hd, hd), hd ** -0.5 / cfg.n_layers),
                    ("ln2_g", None, None), ("ln2_b", None, None),
                    ("w_1", (hd, ff), hd ** -0.5), ("w_2", (hd, ff), ff ** -0.5 / cfg.n_layers),
                ):
                    if name.endswith("_g"):
                        self.blocks.append(nn.Parameter(torch.ones(hd, dtype=dtype)))
                    elif name.endswith("_b"):
                        self.blocks.append(nn.Parameter(torch.zeros(hd, dtype=dtype)))
                    else:
                        self.blocks.append(p(*shape, std=std))
            self.lnf_g = nn.Parameter(torch.ones(hd, dtype=dtype))
            self.lnf_b = nn.Parameter(torch.zeros(hd, dtype=dtype))
            self.w_out = p(hd, cfg.vocab_size, std=hd ** -0.5)

        def layer(self, l):
            return self.blocks[l * 10:(l + 1) * 10]

        def forward(self, tokens, content=None):
            import torch.nn.functional as F

            B, n = tokens.shape
            x = self.tok_emb[tokens] if content is None else content
            x = x + self.pos_emb[:n]
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool), 1)
            for l in range(cfg.n_layers):
                ln1_g, ln1_b, w_q, w_k, w_v, w_o, ln2_g, ln2_b, w_1, w_2 = self.layer(l)
                xn = F.layer_norm(x, (cfg.hidden,), ln1_g, ln1_b, 1e-5)
                q = torch.einsum("bnc,hcd->bhnd", xn, w_q)
                k = torch.einsum("bnc,hcd->bhnd", xn, w_k)
                v = torch.einsum("bnc,hcd->bhnd", xn, w_v)
                s = (q @ k.transpose(-1, -2)) / cfg.head_dim ** 0.5
                a = torch.softmax(s.masked_fill(mask, float("-inf")), dim=-1)
                o = (a @ v).transpose(1, 2).reshape(B, n, cfg.hidden)
                h = x + o @ w_o
                x = h + F.silu(F.layer_norm(h, (cfg.hidden,), ln2_g, ln2_b, 1e-5) @ w_1) @ w_2.T
            x = F.layer_norm(x, (cfg.hidden,), self.lnf_g, self.lnf_b, 1e-5)
            return x @ self.w_out

        def arrays(self):
            out = [self.tok_emb, self.pos_emb, *self.blocks, self.lnf_g, self.lnf_b, self.w_out]
            return [t.detach().cpu().numpy() for t in out]

    return ToyTransformer()


def visual_codebook(hidden: int, seed: int, shared: float = VISUAL_SHARED, scale: float = VISUAL_SCALE) -> np.ndarray:
    """Frozen embeddings for the visual vocabulary (stand-in vision encoder).

    Every row is ``shared * c + sqrt(1 - shared**2) * z_i`` with one common
    modality direction ``c`` and a token-specific ``z_i``, all unit variance
    per coordinate, all times ``scale``. The common part is what marks a token
    as visual; the scale keeps visual content above the text embeddings so it
    survives heavy forward noise.
    """
    rng = make_rng(seed, 0xC0DE)
    common = rng.standard_normal(hidden)
    own = rng.standard_normal((len(VISUAL_IDS), hidden))
    return scale * (shared * common[None, :] + np.sqrt(1.0 - shared ** 2) * own)


def _batches(samples, batch_size, rng):
    order = rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


def _pack(batch, max_seq):
    import torch

    n = max(len(s.prompt) for s in batch)
    if n > max_seq:
        raise InputError(f"prompt length {n} exceeds max_seq {max_seq}")
    toks = torch.zeros(len(batch), n, dtype=torch.long)
    last = torch.zeros(len(batch), dtype=torch.long)
    ans = torch.zeros(len(batch), dtype=torch.long)
    for i, s in enumerate(batch):
        toks[i, :len(s.prompt)] = torch.tensor(s.prompt)
        last[i] = len(s.prompt) - 1
        ans[i] = s.answer
    return toks, last, ans


def train_toy_model(samples, cfg: ModelConfig, hyper: TrainHyper = TrainHyper(),
                    val_samples=None, history: Optional[list] = None) -> Model:
    """Next-token cross-entropy on prompt -> answer with AdamW.

    Right-padded prompts are safe under the causal mask because only the last
    real prompt position is scored. Stops once clean validation accuracy on
    every question kind reaches ``target_accuracy`` or after ``epochs``.
    """
    import torch

    samples = list(samples)
    if not samples:
        raise InputError("empty training set")
    torch.manual_seed(hyper.seed)
    net = _torch_model(cfg, hyper.seed)
    with torch.no_grad():
        net.tok_emb[torch.as_tensor(VISUAL_IDS)] = torch.as_tensor(
            visual_codebook(cfg.hidden, hyper.seed, hyper.visual_shared, hyper.visual_scale), dtype=net.tok_emb.dtype
        )
    vis_mask = torch.zeros(cfg.vocab_size, 1)
    vis_mask[torch.as_tensor(VISUAL_IDS)] = 1.0
    net.tok_emb.register_hook(lambda g: g * (1.0 - vis_mask))

    decay = [p for n, p in net.named_parameters() if p.ndim >= 2 and n != "tok_emb"]
    no_decay = [p for n, p in net.named_parameters() if p.ndim < 2 or n == "tok_emb"]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": hyper.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=hyper.lr,
    )
    total_steps = hyper.epochs * ((len(samples) + hyper.batch_size - 1) // hyper.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=hyper.lr, total_steps=total_steps, pct_start=0.1)
    rng = make_rng(hyper.seed, 0x7EA1)
    val = list(val_samples) if val_samples is not None else samples[: min(len(samples), 500)]

    for epoch in range(hyper.epochs):
        net.train()
        total, count = 0.0, 0
        for batch in _batches(samples, hyper.batch_size, rng):
            toks, last, ans = _pack(batch, cfg.max_seq)
            logits = net(toks)[torch.arange(len(batch)), last]
            loss = torch.nn.functional.cross_entropy(logits, ans)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            opt.step()
            sched.step()
            total += loss.item() * len(batch)
            count += len(batch)
        if history is not None:
            history.append(total / count)
        if (epoch + 1) % hyper.eval_every == 0 or epoch == hyper.epochs - 1:
            acc = _torch_accuracy(net, val, cfg.max_seq)
            log.info("epoch %d loss %.4f val %s", epoch, total / count, acc)
            if min(acc.values()) >= hyper.target_accuracy:
                break
    return model_from_arrays(cfg, net.arrays())


def _torch_accuracy(net, samples, max_seq) -> dict:
    import torch

    net.eval()
    hits = {}
    with torch.no_grad():
        for i in range(0, len(samples), 256):
            batch = samples[i:i + 256]
            toks, last, ans = _pack(batch, max_seq)
            pred = net(toks)[torch.arange(len(batch)), last].argmax(-1)
            for s, ok in zip(batch, (pred == ans).tolist()):
                hits.setdefault(s.kind, []).append(ok)
    return {k: float(np.mean(v)) for k, v in hits.items()}
