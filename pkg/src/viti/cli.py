"""``viti`` command line: data generation, training, evaluation and reports.

Exit codes: 0 success, 2 usage or configuration error (the message names the
offending key), 3 incompatible or malformed artifact files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from viti import config as config_mod
from viti._io import atomic_write_text
from viti.errors import (
    CompatibilityError, ConfigError, DatasetError, FormatError, GenerationError, InputError, TrainingError,
)
from viti.runtime import ModelConfig, decode_greedy, load_model, save_model
from viti.synthtask import (
    VOCAB_SIZE, GridConfig, Perturbation, TrainHyper, eval_task, gen_dataset, load_dataset, save_dataset,
    train_toy_model,
)

REPORT_FORMAT_VERSION = 1
log = logging.getLogger("viti")

def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser, *paths: str, intervention=False, schedule=False, model_shape=False):
    p.add_argument("--config", help="flat JSON config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    for name in paths:
        p.add_argument(f"--{name}")
    if intervention:
        p.add_argument("--alpha0", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--gate-threshold", dest="gate_threshold", type=float)
        p.add_argument("--epsilon", type=float)
    if schedule:
        p.add_argument("--total-steps", dest="total_steps", type=int)
        p.add_argument("--beta-start", dest="beta_start", type=float)
        p.add_argument("--beta-end", dest="beta_end", type=float)
    if model_shape:
        for name in ("n_layers", "n_heads", "head_dim", "ffn_mult", "max_seq"):
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viti", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a QA dataset, or a probe dataset with --probe-data")
    _add_common(p, "model", "dataset", schedule=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--probe-data", action="store_true", help="build neglect-labelled activations from --dataset")
    p.add_argument("--mix", type=float, default=0.5, help="Gaussian share of perturbed probe rows")

    p = sub.add_parser("train-model", help="train the toy transformer")
    _add_common(p, "dataset", model_shape=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=TrainHyper.epochs)
    p.add_argument("--lr", type=float, default=TrainHyper.lr)
    p.add_argument("--batch-size", type=int, default=TrainHyper.batch_size)
    p.add_argument("--target-accuracy", type=float, default=TrainHyper.target_accuracy)

    p = sub.add_parser("train-probes", help="fit one probe per head")
    _add_common(p, "dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--l2", type=float, default=1e-4)

    p = sub.add_parser("generate", help="greedy decoding with the intervention")
    _add_common(p, "model", "probes", intervention=True)
    p.add_argument("--prompt-file", required=True, help="dataset-format JSONL; every record is decoded")
    p.add_argument("--max-new", type=int, default=1)
    p.add_argument("--report", required=True)

    p = sub.add_parser("eval", help="task metrics, optionally perturbed and/or intervened")
    _add_common(p, "model", "probes", "dataset", intervention=True, schedule=True)
    p.add_argument("--perturb-steps", type=int, default=0)
    p.add_argument("--perturb-kind", choices=("gaussian", "replacement"), default="gaussian")
    p.add_argument("--intervene", action="store_true")
    p.add_argument("--report", required=True)

    p = sub.add_parser("theorem1", help="mutual-information check of the mixing step")
    _add_common(p, "model", "probes", "dataset", intervention=True, schedule=True)
    p.add_argument("--projections", type=int, default=8)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--perturb-steps", type=int, default=1000)
    p.add_argument("--report", required=True)

    p = sub.add_parser("sweep", help="alpha0 x beta grid")
    _add_common(p, "model", "probes", "dataset", intervention=True, schedule=True)
    p.add_argument("--alpha0s", type=_floats, default=[0.0, 0.1, 0.2, 0.3])
    p.add_argument("--betas", type=_floats, default=[0.05, 0.1, 0.2])
    p.add_argument("--perturb-steps", type=int, default=1000)
    p.add_argument("--csv", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("ablate", help="full / no detector / no visual recall / baseline")
    _add_common(p, "model", "probes", "dataset", intervention=True, schedule=True)
    p.add_argument("--perturb-steps", type=int, default=1000)
    p.add_argument("--wo-vnd-heads", choices=("selected", "layers"), default="selected",
                   help="heads forced open when the detector is removed")
    p.add_argument("--report", required=True)

    p = sub.add_parser("bench", help="per-token latency with and without the intervention")
    _add_common(p, "model", "probes", intervention=True)
    p.add_argument("--context", type=int, default=256)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--report", required=True)

    p = sub.add_parser("report", help="pivot a sweep CSV into an alpha0 x beta matrix")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    return parser


# ----------------------------------------------------------------------------
# helpers


def _resolve(args) -> config_mod.RunConfig:
    flags = {k: v for k, v in vars(args).items() if k in config_mod.KEYS}
    return config_mod.resolve(flags, getattr(args, "config", None))


def _out_path(cfg: config_mod.RunConfig, name: str) -> Path:
    path = Path(name)
    return path if path.is_absolute() else Path(cfg.out_dir) / path


def _options(args) -> dict:
    # output destinations are not inputs, so reports for the same run compare equal
    skip = set(config_mod.KEYS) | {"command", "config", "verbose", "report", "out", "csv"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_report(path, command: str, cfg: config_mod.RunConfig, options: dict, result, timing=None) -> None:
    """JSON report; wall-clock figures live under "timing" so the rest is deterministic."""
    doc = {
        "format_version": REPORT_FORMAT_VERSION,
        "command": command,
        "config": cfg.to_dict(),
        "options": options,
        "result": result,
    }
    if timing is not None:
        doc["timing"] = timing
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, bytes):
        return obj.hex()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _load_bank_for(cfg, model):
    from viti.vnd import load_bank

    bank = load_bank(cfg.probes)
    if bank.config_digest != model.config.digest():
        raise CompatibilityError(f"probe bank {cfg.probes} was trained for a different model")
    return bank


def _perturbation(args, cfg):
    if not args.perturb_steps and getattr(args, "perturb_kind", "gaussian") == "gaussian":
        return None
    return Perturbation(getattr(args, "perturb_kind", "gaussian"), args.perturb_steps, cfg.seed, cfg.schedule())


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    out = _out_path(cfg, args.out)
    if args.probe_data:
        from viti.perturb import build_probe_dataset, save_probe_dataset

        cfg.require("model", "dataset")
        model = load_model(cfg.model)
        ds = build_probe_dataset(model, load_dataset(cfg.dataset), cfg.schedule(), args.mix, cfg.seed)
        save_probe_dataset(ds, out)
        log.info("wrote %d probe rows to %s", len(ds.labels), out)
    else:
        if args.size <= 0:
            raise ConfigError("size", "must be positive")
        samples = gen_dataset(cfg.seed, args.size, GridConfig(size=args.grid))
        save_dataset(samples, out)
        log.info("wrote %d samples to %s", len(samples), out)


def cmd_train_model(args, cfg):
    cfg.require("dataset")
    samples = load_dataset(cfg.dataset)
    mcfg = ModelConfig(cfg.n_layers, cfg.n_heads, cfg.head_dim, VOCAB_SIZE, cfg.max_seq, cfg.ffn_mult)
    hyper = TrainHyper(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=cfg.seed,
                       target_accuracy=args.target_accuracy)
    model = train_toy_model(samples, mcfg, hyper)
    save_model(model, _out_path(cfg, args.out))


def cmd_train_probes(args, cfg):
    from viti.perturb import load_probe_dataset
    from viti.vnd import ProbeHyper, save_bank, train_probe_bank

    cfg.require("dataset")
    ds = load_probe_dataset(cfg.dataset)
    bank = train_probe_bank(ds, ProbeHyper(lr=args.lr, epochs=args.epochs, l2=args.l2, seed=cfg.seed))
    save_bank(bank, _out_path(cfg, args.out))


def cmd_generate(args, cfg):
    from viti.vri import VitiHook
    from viti.vnd import select_top_beta

    cfg.require("model", "probes")
    if not Path(args.prompt_file).exists():
        raise ConfigError("prompt_file", f"file not found: {args.prompt_file}")
    model = load_model(cfg.model)
    bank = _load_bank_for(cfg, model)
    icfg = cfg.intervention()
    selected = select_top_beta(bank, icfg.beta)
    rows, latency = [], []
    for s in load_dataset(args.prompt_file):
        trace = decode_greedy(model, s.prompt, s.span, args.max_new, VitiHook(bank, selected, icfg, s.span, model))
        rows.append({
            "tokens": trace.tokens,
            "gate_counts": trace.gate_counts,
            "visual_mass": [st.visual_mass for st in trace.steps],
        })
        latency.append([st.seconds for st in trace.steps])
    result = {"selected_heads": [list(x) for x in selected], "outputs": rows}
    write_report(_out_path(cfg, args.report), "generate", cfg, _options(args), result, {"latency": latency})


def cmd_eval(args, cfg):
    cfg.require("model", "dataset")
    model = load_model(cfg.model)
    intervention = None
    if args.intervene:
        cfg.require("probes")
        intervention = (_load_bank_for(cfg, model), cfg.intervention())
    t0 = time.perf_counter()
    res = eval_task(model, load_dataset(cfg.dataset), intervention, _perturbation(args, cfg), cfg.workers)
    write_report(_out_path(cfg, args.report), "eval", cfg, _options(args), res.to_dict(),
                 {"seconds": time.perf_counter() - t0})


def cmd_theorem1(args, cfg):
    from viti.analysis import theorem1_check

    cfg.require("model", "probes", "dataset")
    model = load_model(cfg.model)
    pert = _perturbation(args, cfg)
    rep = theorem1_check(model, _load_bank_for(cfg, model), cfg.intervention(), load_dataset(cfg.dataset),
                         args.projections, pert, args.bins, cfg.seed)
    write_report(_out_path(cfg, args.report), "theorem1", cfg, _options(args), rep.to_dict())


def cmd_sweep(args, cfg):
    from viti.analysis import sweep

    cfg.require("model", "probes", "dataset")
    model = load_model(cfg.model)
    res = sweep(model, _load_bank_for(cfg, model), load_dataset(cfg.dataset), args.alpha0s, args.betas,
                _perturbation(args, cfg), cfg.intervention())
    atomic_write_text(_out_path(cfg, args.csv), res.to_csv())
    result = {"best": {"alpha0": res.best[0], "beta": res.best[1], "score": res.best_score},
              "grid": [{"alpha0": a, "beta": b, "score": v} for (a, b), v in res.grid.items()]}
    write_report(_out_path(cfg, args.report), "sweep", cfg, _options(args), result)


def cmd_ablate(args, cfg):
    from viti.analysis import ablation_suite

    cfg.require("model", "probes", "dataset")
    model = load_model(cfg.model)
    table = ablation_suite(model, _load_bank_for(cfg, model), load_dataset(cfg.dataset), cfg.intervention(),
                           _perturbation(args, cfg), args.wo_vnd_heads)
    write_report(_out_path(cfg, args.report), "ablate", cfg, _options(args), table)


def cmd_bench(args, cfg):
    from viti.analysis import bench_prompts, overhead_benchmark

    cfg.require("model", "probes")
    model = load_model(cfg.model)
    if args.context + args.max_new > model.config.max_seq:
        raise ConfigError("context", f"context {args.context} + max_new {args.max_new} exceeds the model's "
                                     f"max_seq {model.config.max_seq}")
    prompts = bench_prompts(model.config, args.context, n=2, seed=cfg.seed)
    res = overhead_benchmark(model, _load_bank_for(cfg, model), cfg.intervention(), prompts, args.repeats,
                             args.max_new)
    write_report(_out_path(cfg, args.report), "bench", cfg, _options(args), {"tokens_timed": res["tokens_timed"]},
                 res)


def cmd_report(args, cfg):
    from viti.analysis import pivot_sweep_csv

    src = Path(args.inp)
    if not src.exists():
        raise ConfigError("in", f"file not found: {src}")
    try:
        text = pivot_sweep_csv(src.read_text())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{src} is not a sweep CSV: {exc}") from None
    atomic_write_text(args.out, text)


COMMANDS = {
    "gen-data": cmd_gen_data, "train-model": cmd_train_model, "train-probes": cmd_train_probes,
    "generate": cmd_generate, "eval": cmd_eval, "theorem1": cmd_theorem1, "sweep": cmd_sweep,
    "ablate": cmd_ablate, "bench": cmd_bench, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _resolve(args) if args.command != "report" else config_mod.RunConfig()
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"viti: config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, CompatibilityError) as exc:
        print(f"viti: incompatible file: {exc}", file=sys.stderr)
        return 3
    except InputError as exc:
        print(f"viti: bad input: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, GenerationError, TrainingError) as exc:
        print(f"viti: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
