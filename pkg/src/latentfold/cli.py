"""Command line entry point: ``latentfold <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .corpus import LEXICONS, write_corpus
from .folding import (
    FoldingConfig,
    FoldingLayer,
    assign_clusters,
    fold,
    init_centers,
    run_flow,
    synthetic_clusters,
    update_centers,
)
from .harness import (
    ABLATIONS,
    RunConfig,
    batch_schedule,
    dumps_fixed,
    export_projection,
    load_corpus,
    make_windows,
    run_experiment,
)
from .linalg import Rng, row_normalize
from .model import OptimizerState, forward, init_params, load_params, save_params, train_step

log = logging.getLogger("latentfold")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latentfold", description="Hierarchical latent space folding experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="override model and training seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--ablate", choices=ABLATIONS, help="disable one folding component")

    common(sub.add_parser("train", help="train the folding model and save a checkpoint"))
    common(sub.add_parser("compare", help="train baseline and folding models and emit tables"))
    demo = sub.add_parser("fold-demo", help="fold synthetic clusters and print objective/energy traces")
    common(demo, needs_config=False)
    proj = sub.add_parser("project", help="export 2-D projections of a checkpoint's activations")
    common(proj)
    proj.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")
    proj.add_argument("--layer", type=int, help="single layer (default: all)")
    met = sub.add_parser("metrics", help="evaluate a checkpoint on held-out text")
    common(met)
    met.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")
    corp = sub.add_parser("corpus", help="write synthetic text corpora")
    corp.add_argument("--out", required=True)
    corp.add_argument("--seed", type=int, default=0)
    corp.add_argument("--bytes", type=int, default=250_000)
    corp.add_argument("--categories", nargs="+", default=sorted(LEXICONS), choices=sorted(LEXICONS))
    return parser


def _load_config(args) -> RunConfig:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return RunConfig.load(args.config).with_overrides(args.seed, args.out, args.ablate)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    mcfg = cfg.variant(True)
    tc = cfg.training
    data = load_corpus(cfg.data)
    windows = np.concatenate([make_windows(d.train, tc.window) for d in data.values()])
    params = init_params(mcfg)
    opt = OptimizerState(lr=tc.lr, clip_norm=tc.clip_norm, center_refresh=tc.center_refresh)
    curve = []
    for epoch in range(tc.epochs):
        losses = [train_step(params, mcfg, torch.as_tensor(b), opt)[1]
                  for b in batch_schedule(windows, tc.batch_size, tc.seed, epoch)]
        curve.append(float(np.mean(losses)))
        print(f"epoch {epoch + 1}: train nll {curve[-1]:.6f}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(params, mcfg, out / "model.ckpt")
    (out / "train_log.json").write_text(dumps_fixed({"train_nll": curve, "steps": opt.step}))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    print(f"wrote tables to {cfg.output_dir}")
    for i, (b, f) in enumerate(zip(result.baseline.variance, result.folding.variance)):
        print(f"layer {i}: variance baseline {b:.6f} hfu {f:.6f}")
    for cat in sorted(result.baseline.perplexity):
        print(f"{cat}: perplexity baseline {result.baseline.perplexity[cat]:.4f} "
              f"hfu {result.folding.perplexity[cat]:.4f}")
    return EXIT_OK


def cmd_fold_demo(args) -> int:
    seed = 0 if args.seed is None else args.seed
    cfg = FoldingConfig(clusters=3)
    if args.ablate == "attraction":
        cfg = replace(cfg, alpha=0.0)
    elif args.ablate == "cohesion":
        cfg = replace(cfg, gamma=0.0)
    elif args.ablate == "laplacian":
        cfg = replace(cfg, beta=0.0)
    rng = Rng(seed)
    X, _ = synthetic_clusters(60, 8, 3, rng)
    X = row_normalize(X)
    C = init_centers(X, cfg.clusters, rng)
    trace = fold(X, [FoldingLayer.identity(8, C) for _ in range(cfg.depth)], cfg)
    print("layer,variance,objective,energy")
    for l, (Y, obj, en) in enumerate(zip(trace.embeddings, trace.objectives, trace.energies)):
        var = float(np.sum((Y - Y.mean(0)) ** 2) / Y.size)
        print(f"{l},{var:.6f},{obj:.6f},{en:.6f}")
    a = assign_clusters(X, C)
    C = update_centers(X, a, cfg.clusters, C)
    flow = run_flow(X, C, a, cfg, steps=50)
    print("flow_step,energy")
    for k in range(0, len(flow.energies), 10):
        print(f"{k},{flow.energies[k]:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fold_demo.json").write_text(dumps_fixed({
            "objectives": trace.objectives, "energies": trace.energies, "flow_energies": flow.energies}))
    return EXIT_OK


def _checkpoint(args, cfg):
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "model.ckpt"


def _first_window(cfg: RunConfig, data):
    cat = sorted(data)[0]
    return data[cat].heldout[:cfg.training.window]


def cmd_project(args) -> int:
    cfg = _load_config(args)
    params, mcfg = load_params(_checkpoint(args, cfg))
    data = load_corpus(cfg.data)
    _, trace = forward(params, mcfg, _first_window(cfg, data))
    layers = [args.layer] if args.layer is not None else range(mcfg.n_layers)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for l in layers:
        if not 0 <= l < mcfg.n_layers:
            raise UsageError(f"layer {l} out of range")
        print(export_projection(trace, l, out / f"projection_layer{l}.csv"))
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = _load_config(args)
    params, mcfg = load_params(_checkpoint(args, cfg))
    data = load_corpus(cfg.data)
    mc = cfg.metrics
    win = cfg.training.window
    traces = []
    for cat in sorted(data):
        ho = data[cat].heldout
        for k in range(mc.eval_windows):
            w = ho[k * win:(k + 1) * win]
            if w.size >= 2:
                traces.append(forward(params, mcfg, w)[1])
    tm = M.trace_metrics(traces, mcfg.n_layers, mc.tau, mc.eps)
    tm["perplexity"] = {cat: M.perplexity(params, mcfg, data[cat].heldout, mc.stride) for cat in sorted(data)}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = dumps_fixed(tm)
    (out / "report.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_corpus(args) -> int:
    paths = write_corpus(args.out, args.categories, args.bytes, args.seed)
    print(json.dumps(paths, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "fold-demo": cmd_fold_demo,
            "project": cmd_project, "metrics": cmd_metrics, "corpus": cmd_corpus}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"latentfold: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"latentfold: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
