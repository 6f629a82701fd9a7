#!/usr/bin/env python3
"""
Directional experiments: ANVar and MAE across variants, ablation rows and lambda
"""
import argparse
import json
import os
import sys

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from crowd_gramformer.config import DEFAULT_TEST_SCENES, DEFAULT_TRAIN_SCENES, RunConfig, load_config
from crowd_gramformer.synthdata import SceneSpec, load_splits, write_dataset
from crowd_gramformer.trainer import compare_variants, format_comparison
from crowd_gramformer.utils import ensure_directory


def ensure_data(directory: str, seed: int):
    if os.path.exists(os.path.join(directory, "train", "manifest.txt")):
        return
    print(f"🗂️ Generating default dataset in {directory}")
    write_dataset(os.path.join(directory, "train"), SceneSpec(), DEFAULT_TRAIN_SCENES, seed)
    write_dataset(os.path.join(directory, "test"), SceneSpec(), DEFAULT_TEST_SCENES, seed + 1)


def wins(a, b, key, better):
    """Seeds where run a is better than run b"""
    return sum(1 for x, y in zip(a.runs, b.runs) if better(x[key], y[key]))


def lower(x, y):
    return x <= y


def higher(x, y):
    return x > y


def mae_ordered(better, worse, seeds: int) -> bool:
    """Mean MAE ordered, or at most one seed inverted"""
    return better.stat("mae")[0] <= worse.stat("mae")[0] or wins(better, worse, "mae", lower) >= seeds - 1


def check(label: str, ok: bool) -> bool:
    print(f"  {'✅' if ok else '⚠️'} {label}")
    return ok


def run_experiments(data_dir: str, out_dir: str, seeds: int, base: RunConfig, jobs: int) -> bool:
    ensure_data(data_dir, seed=0)
    train_scenes, test_scenes = load_splits(data_dir)
    seed_list = list(range(seeds))
    print(f"⚙️ {base.iterations} iterations, batch {base.batch_size}, lr {base.lr:g} ({base.lr_schedule})")

    print("\n🔬 Variants")
    gram, vanilla, graphormer = compare_variants(base, ["gramformer", "vanilla", "graphormer"], seed_list,
                                                 train_scenes, test_scenes, os.path.join(out_dir, "variants"),
                                                 jobs=jobs, verbose=True)
    print(format_comparison([gram, vanilla, graphormer]))

    print("\n🔬 Ablation rows")
    plain = base.override(use_centrality=False, reg_weight=0.0)
    (with_ewr,) = compare_variants(plain, ["gramformer"], seed_list, train_scenes, test_scenes,
                                   os.path.join(out_dir, "ewr_only"), jobs=jobs, verbose=True)
    with_ewr.label = "+ewr"
    (no_reg,) = compare_variants(base.override(reg_weight=0.0), ["gramformer"], seed_list, train_scenes,
                                 test_scenes, os.path.join(out_dir, "lambda0"), jobs=jobs, verbose=True)
    no_reg.label = "lambda=0"
    table = [vanilla, with_ewr, no_reg, gram, graphormer]
    print(format_comparison(table))

    threshold = max(1, seeds - 1)
    anvar_wins = wins(gram, vanilla, "anvar", higher)
    mae_wins = wins(gram, vanilla, "mae", lower)
    results = [
        check(f"ANVar gramformer > vanilla in {anvar_wins}/{seeds} seeds", anvar_wins >= threshold),
        check(f"full model MAE <= vanilla in {mae_wins}/{seeds} seeds", mae_wins >= threshold),
        check(f"MAE: +ewr <= baseline ({wins(with_ewr, vanilla, 'mae', lower)}/{seeds} seeds)",
              mae_ordered(with_ewr, vanilla, seeds)),
        check(f"MAE: full <= +ewr ({wins(gram, with_ewr, 'mae', lower)}/{seeds} seeds)",
              mae_ordered(gram, with_ewr, seeds)),
        check("mean MAE: graphormer >= gramformer", graphormer.stat("mae")[0] >= gram.stat("mae")[0]),
        check("mean MAE: lambda=0.1 <= lambda=0", gram.stat("mae")[0] <= no_reg.stat("mae")[0]),
    ]

    ensure_directory(out_dir)
    summary_path = os.path.join(out_dir, "experiments.json")
    with open(summary_path, "w", encoding="utf-8") as handle:
        json.dump({"iterations": base.iterations, "batch_size": base.batch_size, "lr": base.lr,
                   "lr_schedule": base.lr_schedule, "seeds": seeds, "checks_passed": sum(results),
                   "checks": len(results), "rows": [s.as_dict() for s in table]},
                  handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"\n📊 {sum(results)}/{len(results)} directional checks hold")
    print(f"💾 Wrote {summary_path}")
    return all(results)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the directional variant and ablation experiments")
    parser.add_argument("--data", default="data/default")
    parser.add_argument("--out", default="runs/experiments")
    parser.add_argument("--config", help="run config file; defaults otherwise")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    config = load_config(args.config) if args.config else RunConfig()
    changes = {key: value for key, value in (("iterations", args.iterations), ("batch_size", args.batch_size),
                                             ("lr", args.lr)) if value is not None}
    config = config.override(**changes).validate()
    success = run_experiments(args.data, args.out, args.seeds, config, args.jobs)
    exit(0 if success else 1)
