"""
Command-line interface: gen / train / eval / compare / gradcheck
"""
import argparse
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint
from .config import (EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION_FAILED, GRADCHECK_CHANNELS, GRADCHECK_HEADS,
                     GRADCHECK_IMAGE_SIZE, GRADCHECK_LAYERS, GRADCHECK_STEP, GRADCHECK_TOLERANCE, VARIANTS,
                     RunConfig, load_config)
from .diagnostics import evaluation_document, export_attention, export_neighbors, format_json, format_report
from .exceptions import ConfigError, GramformerError
from .model import GramformerModel, get_loss
from .synthdata import SceneSpec, dataset_summary, load_dataset, load_scene_spec, load_splits, write_dataset
from .trainer import compare_variants, evaluate, format_comparison, train
from .utils import ensure_directory, spawn_seeds


def _run_config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig().validate()


def _write_text(path: str, text: str):
    parent = os.path.dirname(path)
    if parent:
        ensure_directory(parent)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    """Write a synthetic dataset (flat, or train/ + test/ when --test-n is given)"""
    spec = load_scene_spec(args.spec) if args.spec else SceneSpec().validate()
    if args.n < 0:
        raise ConfigError(f"--n must be >= 0, got {args.n}")
    if args.test_n is None:
        names = write_dataset(args.out, spec, args.n, args.seed, verbose=True)
        scenes = load_dataset(args.out) if names else []
    else:
        if args.test_n < 0:
            raise ConfigError(f"--test-n must be >= 0, got {args.test_n}")
        train_seed, test_seed = spawn_seeds(args.seed, 2)
        write_dataset(os.path.join(args.out, "train"), spec, args.n, train_seed, verbose=True)
        write_dataset(os.path.join(args.out, "test"), spec, args.test_n, test_seed, verbose=True)
        scenes = load_dataset(os.path.join(args.out, "train"))

    total, mean = dataset_summary(scenes)
    print(f"📊 {len(scenes)} scenes, {total} heads in total, {mean:.2f} per scene")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _run_config(args.config)
    changes = {}
    if args.data:
        changes["train_data"] = args.data
    if args.out:
        changes["out_dir"] = args.out
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.seed is not None:
        changes["seed"] = args.seed
    config = config.override(**changes)
    if not config.train_data:
        raise ConfigError("no training data: pass --data or set train_data")

    # surface data errors before the first step
    train_scenes, eval_scenes = load_splits(config.train_data)
    if config.eval_data:
        _, eval_scenes = load_splits(config.eval_data)
    result = train(config, train_scenes, eval_scenes, verbose=True)
    if result.best_mae is not None:
        print(f"🏁 best eval MAE {result.best_mae:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate a checkpoint; the model config comes from --config, else config.txt beside the checkpoint"""
    config_path = args.config
    if config_path is None:
        beside = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.txt")
        config_path = beside if os.path.exists(beside) else None
    config = _run_config(config_path)
    model = load_checkpoint(args.checkpoint, GramformerModel(config.model_config(), seed=config.seed))

    _, scenes = load_splits(args.data)
    result = evaluate(model, scenes)
    print(format_report(result.errors, result.anvar))
    document = evaluation_document(result.errors, result.anvar, result.counts)
    if args.json:
        _write_text(args.json, format_json(document))
        print(f"💾 Wrote {args.json}")

    if args.export_node is not None:
        export_dir = args.export_dir or "exports"
        _, _, trace = model.forward(scenes[0].image)
        paths = export_attention(trace, args.export_node, export_dir)
        rows = export_neighbors(trace, args.export_node, os.path.join(export_dir, f"neighbors_node{args.export_node}.csv"))
        print(f"🖼️ Exported {len(paths)} attention maps and {rows} neighbor rows to {export_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _run_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)} (choose from {', '.join(VARIANTS)})")
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")

    changes = {}
    if args.no_ewr:
        changes["use_ewr"] = False
    if args.no_centrality:
        changes["use_centrality"] = False
    for key, value in (("reg_weight", args.reg_weight), ("q", args.q), ("m", args.m),
                       ("graph_mode", args.graph_mode), ("centrality_mode", args.centrality_mode),
                       ("iterations", args.iterations)):
        if value is not None:
            changes[key] = value
    if args.data:
        changes["train_data"] = args.data
    config = config.override(**changes)
    if not config.train_data:
        raise ConfigError("no training data: pass --data or set train_data")

    train_scenes, eval_scenes = load_splits(config.train_data)
    if config.eval_data:
        _, eval_scenes = load_splits(config.eval_data)
    seeds = [config.seed + i for i in range(args.seeds)]
    out_dir = args.out or os.path.join(config.out_dir, "compare")
    summaries = compare_variants(config, variants, seeds, train_scenes, eval_scenes, out_dir,
                                 jobs=args.jobs, verbose=True)
    print(format_comparison(summaries))
    if args.json:
        _write_text(args.json, json.dumps([s.as_dict() for s in summaries], indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def gradcheck_model(config: RunConfig, seed: int) -> GramformerModel:
    """Tiny model: 32x32 input at patch 8 gives N = 16 nodes"""
    tiny = replace(config.model_config(), channels=GRADCHECK_CHANNELS, heads=GRADCHECK_HEADS,
                   layers=GRADCHECK_LAYERS, patch=8)
    return GramformerModel(tiny.validate(), seed=seed)


def run_gradcheck(config: RunConfig, seed: int, fault: Optional[str] = None) -> nx.GradCheckReport:
    """Full-model gradient check with neighbor selections frozen from a first forward"""
    model = gradcheck_model(config, seed)
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(GRADCHECK_IMAGE_SIZE, GRADCHECK_IMAGE_SIZE))
    target = rng.uniform(0.0, 0.05, size=model.output_shape(image.shape))
    loss_fn = get_loss(config.loss)

    _, _, trace = model.forward(image)
    frozen = trace.selections()

    def closure():
        return model.loss(image, target, loss_fn, frozen=frozen)[0]

    if fault is None:
        return nx.grad_check(closure, model.parameters(), GRADCHECK_STEP, GRADCHECK_TOLERANCE)
    with nx.inject_backward_fault(fault):
        return nx.grad_check(closure, model.parameters(), GRADCHECK_STEP, GRADCHECK_TOLERANCE)


def cmd_gradcheck(args) -> int:
    config = _run_config(args.config)
    print(f"🧪 Gradient check: {config.variant}, N=16, C={GRADCHECK_CHANNELS}, "
          f"S={GRADCHECK_HEADS}, L={GRADCHECK_LAYERS}, seed {args.seed}")
    report = run_gradcheck(config, args.seed, args.inject_fault)
    for entry in report.entries:
        mark = "✅" if entry.max_rel_error < report.tolerance else "❌"
        print(f"  {mark} {entry}")
    print(f"📊 worst relative error {report.worst:.3e} (tolerance {report.tolerance:.0e})")
    if report.passed:
        print("✅ Gradients match")
        return EXIT_OK
    print(f"❌ {len(report.failures)} parameter(s) over tolerance")
    return EXIT_VERIFICATION_FAILED


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gramformer", description="Gramformer crowd counting on synthetic scenes")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--spec", help="scene spec file (key = value)")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--n", type=int, required=True, help="number of scenes (train scenes with --test-n)")
    gen.add_argument("--test-n", type=int, help="also write a test split of this size")
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(handler=cmd_gen)

    train_cmd = commands.add_parser("train", help="train one model")
    train_cmd.add_argument("--config", help="run config file")
    train_cmd.add_argument("--data", help="dataset directory (overrides train_data)")
    train_cmd.add_argument("--out", help="output directory (overrides out_dir)")
    train_cmd.add_argument("--iterations", type=int)
    train_cmd.add_argument("--seed", type=int)
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--data", required=True)
    eval_cmd.add_argument("--config", help="run config (default: config.txt beside the checkpoint)")
    eval_cmd.add_argument("--json", help="write the report as JSON")
    eval_cmd.add_argument("--export-node", type=int, help="export attention rows and neighbors of this node")
    eval_cmd.add_argument("--export-dir", help="directory for exports (default: exports)")
    eval_cmd.set_defaults(handler=cmd_eval)

    compare = commands.add_parser("compare", help="train variants over several seeds")
    compare.add_argument("--config")
    compare.add_argument("--data")
    compare.add_argument("--variants", default=",".join(VARIANTS))
    compare.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at the config seed")
    compare.add_argument("--no-ewr", action="store_true", help="drop the attention graph")
    compare.add_argument("--no-centrality", action="store_true", help="drop centrality embeddings")
    compare.add_argument("--lambda", dest="reg_weight", type=float, help="edge regularization weight")
    compare.add_argument("--q", type=float, help="nearest-neighbor fraction")
    compare.add_argument("--m", type=int, help="in-degree bound")
    compare.add_argument("--graph-mode", choices=("static", "dynamic"))
    compare.add_argument("--centrality-mode", choices=("static", "dynamic"))
    compare.add_argument("--iterations", type=int)
    compare.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    compare.add_argument("--out", help="directory for per-run outputs")
    compare.add_argument("--json", help="write the summary as JSON")
    compare.set_defaults(handler=cmd_compare)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every parameter")
    gradcheck.add_argument("--config")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--inject-fault", help=argparse.SUPPRESS)
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.handler(args)
    except GramformerError as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n🛑 Interrupted")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
