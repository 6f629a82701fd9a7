"""
Training step, seeded training loop, evaluation and multi-seed variant comparison
"""
import csv
import math
import multiprocessing as mp
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .config import RunConfig, save_config
from .diagnostics import ErrorReport, anvar, error_metrics
from .exceptions import ConfigError, ContractError
from .model import GramformerModel, LossFn, get_loss
from .synthdata import SceneSample, flip_horizontal, rescale_scene
from .utils import ensure_directory, is_finite_array, mean_std, spawn_seeds

METRICS_HEADER = ["iter", "loss", "q", "mae"]


def scheduled_lr(config: RunConfig, iteration: int) -> float:
    """Learning rate of 1-based step `iteration`: linear warmup, then cosine decay to lr_floor * lr"""
    if config.lr_schedule == "constant":
        return config.lr
    if iteration <= config.warmup:
        return config.lr * iteration / config.warmup
    span = max(1, config.iterations - config.warmup)
    progress = min(1.0, (iteration - config.warmup) / span)
    floor = config.lr_floor * config.lr
    return floor + (config.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class StepResult:
    """Batch-mean loss parts of one optimizer step"""

    def __init__(self, loss: float, density_term: float, regularization: float):
        self.loss = loss
        self.density_term = density_term
        self.regularization = regularization


def train_step(model: GramformerModel, batch: Sequence[SceneSample], optimizer: nx.Adam,
               loss_fn: LossFn) -> StepResult:
    """Forward, reverse pass and one Adam update over a batch (loss averaged over the batch)"""
    if len(batch) == 0:
        raise ContractError("train_step needs a non-empty batch")
    model.zero_grad()
    weight = 1.0 / len(batch)
    totals = np.zeros(3)
    for sample in batch:
        with nx.Tape() as tape:
            total, density_term, regularization, _ = model.loss(sample.image, sample.density, loss_fn)
            scaled = nx.scale(total, weight)
        nx.backward(scaled, tape)
        totals += (total.item(), density_term.item(),
                   0.0 if regularization is None else regularization.item())
    optimizer.step(model.parameters())
    loss, density_term, regularization = totals * weight
    return StepResult(float(loss), float(density_term), float(regularization))


class Evaluation:
    """Counting errors, dataset ANVar and per-scene counts"""

    def __init__(self, errors: ErrorReport, anvar_value: float, counts: List[Dict[str, float]],
                 degenerate_scenes: int = 0):
        self.errors = errors
        self.anvar = anvar_value
        self.counts = counts
        self.degenerate_scenes = degenerate_scenes


def evaluate(model: GramformerModel, scenes: Sequence[SceneSample]) -> Evaluation:
    """Deterministic pass over every scene; no tape is active so nothing is recorded"""
    if len(scenes) == 0:
        raise ContractError("evaluation set is empty")
    predicted, truth, scores, counts = [], [], [], []
    degenerate = 0
    for sample in scenes:
        density, _, trace = model.forward(sample.image)
        report = anvar(trace)
        if report.degenerate:
            degenerate += 1
        else:
            scores.append(report.overall)
        pred = float(density.data.sum())
        predicted.append(pred)
        truth.append(float(sample.count))
        counts.append({"scene": sample.name, "pred": pred, "gt": float(sample.count)})
    anvar_value = float(np.mean(scores)) if scores else 0.0
    return Evaluation(error_metrics(predicted, truth), anvar_value, counts, degenerate)


class TrainResult:
    """Outcome of one training run"""

    def __init__(self, model: GramformerModel, rows: List[Tuple[int, float, float, float]],
                 best_mae: Optional[float], final: Optional[Evaluation]):
        self.model = model
        self.rows = rows
        self.best_mae = best_mae
        self.final = final

    @property
    def initial_loss(self) -> Optional[float]:
        return self.rows[0][1] if self.rows else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.rows[-1][1] if self.rows else None


class Trainer:
    """Seeded training loop writing metrics.csv, best.grmf, final.grmf and config.txt"""

    def __init__(self, config: RunConfig, train_scenes: Sequence[SceneSample],
                 eval_scenes: Sequence[SceneSample], verbose: bool = False):
        self.config = config.validate()
        if len(train_scenes) == 0:
            raise ConfigError("training set is empty")
        if len(eval_scenes) == 0:
            raise ConfigError("evaluation set is empty")
        self.train_scenes = list(train_scenes)
        self.eval_scenes = list(eval_scenes)
        self.verbose = verbose
        self.loss_fn = get_loss(config.loss)

        # model init uses the run seed directly so variants share weights under one seed
        self.model = GramformerModel(config.model_config(), seed=config.seed)
        _, data_seed = spawn_seeds(config.seed, 2)
        self.rng = np.random.default_rng(data_seed)
        self.optimizer = nx.Adam(config.lr, config.betas, config.adam_eps)
        self._order: List[int] = []

    def log(self, message: str):
        if self.verbose:
            print(message)

    def _next_index(self) -> int:
        """Epoch-wise shuffled scene order"""
        if not self._order:
            self._order = list(self.rng.permutation(len(self.train_scenes)))
        return int(self._order.pop(0))

    def _augment(self, sample: SceneSample) -> SceneSample:
        # draws happen whether or not a flag is set, so flags do not shift the stream
        flip = self.rng.random() < 0.5
        factor = self.rng.uniform(self.config.scale_min, self.config.scale_max)
        if self.config.augment_scale:
            sample = rescale_scene(sample, factor)
        if self.config.augment_flip and flip:
            sample = flip_horizontal(sample)
        return sample

    def next_batch(self) -> List[SceneSample]:
        return [self._augment(self.train_scenes[self._next_index()]) for _ in range(self.config.batch_size)]

    def fit(self, out_dir: Optional[str] = None) -> TrainResult:
        """Run config.iterations steps; evaluate every eval_interval steps and at the end"""
        out_dir = self.config.out_dir if out_dir is None else out_dir
        ensure_directory(out_dir)
        save_config(self.config, os.path.join(out_dir, "config.txt"))
        best_path = os.path.join(out_dir, "best.grmf")
        final_path = os.path.join(out_dir, "final.grmf")

        self.log(f"🧠 Training {self.config.variant} ({self.model.parameter_count()} parameters, "
                 f"{len(self.train_scenes)} train / {len(self.eval_scenes)} eval scenes)")
        rows: List[Tuple[int, float, float, float]] = []
        best_mae: Optional[float] = None
        evaluation: Optional[Evaluation] = None

        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for iteration in range(1, self.config.iterations + 1):
                self.optimizer.lr = scheduled_lr(self.config, iteration)
                step = train_step(self.model, self.next_batch(), self.optimizer, self.loss_fn)
                if not is_finite_array(np.array([step.loss, step.regularization])):
                    raise ContractError(f"loss became non-finite at iteration {iteration}")
                if iteration % self.config.eval_interval and iteration != self.config.iterations:
                    continue

                evaluation = evaluate(self.model, self.eval_scenes)
                mae = evaluation.errors.mae
                rows.append((iteration, step.loss, step.regularization, mae))
                writer.writerow([iteration, repr(step.loss), repr(step.regularization), repr(mae)])
                self.log(f"📊 iter {iteration:>6d}  loss {step.loss:.5f}  Q {step.regularization:.5f}  mae {mae:.3f}")
                if best_mae is None or mae < best_mae:
                    best_mae = mae
                    save_checkpoint(best_path, self.model)

        if best_mae is None:
            save_checkpoint(best_path, self.model)
        save_checkpoint(final_path, self.model)
        self.log(f"✅ Saved checkpoints to {out_dir}")
        return TrainResult(self.model, rows, best_mae, evaluation)


def train(config: RunConfig, train_scenes: Sequence[SceneSample], eval_scenes: Sequence[SceneSample],
          out_dir: Optional[str] = None, verbose: bool = False) -> TrainResult:
    return Trainer(config, train_scenes, eval_scenes, verbose).fit(out_dir)


# ---------------------------------------------------------------- comparison

class VariantSummary:
    """Mean and std of test metrics over seeds for one variant"""

    def __init__(self, label: str, runs: List[Dict[str, float]]):
        self.label = label
        self.runs = runs

    def stat(self, key: str) -> Tuple[float, float]:
        return mean_std([run[key] for run in self.runs])

    def as_dict(self) -> Dict:
        summary = {"variant": self.label, "runs": self.runs}
        for key in ("mae", "mse", "anvar"):
            summary[key], summary[f"{key}_std"] = self.stat(key)
        return summary


def _run_one(job: Tuple[RunConfig, Sequence[SceneSample], Sequence[SceneSample], str]) -> Dict[str, float]:
    config, train_scenes, eval_scenes, out_dir = job
    result = Trainer(config, train_scenes, eval_scenes).fit(out_dir)
    final = result.final if result.final is not None else evaluate(result.model, eval_scenes)
    return {"seed": config.seed, "mae": final.errors.mae, "mse": final.errors.mse,
            "nae": final.errors.nae, "anvar": final.anvar}


def compare_variants(config: RunConfig, variants: Sequence[str], seeds: Sequence[int],
                     train_scenes: Sequence[SceneSample], eval_scenes: Sequence[SceneSample],
                     out_dir: str, jobs: int = 1, verbose: bool = False) -> List[VariantSummary]:
    """Train every variant under every seed with identical data order and collect test metrics"""
    if len(seeds) == 0:
        raise ConfigError("compare needs at least one seed")
    if len(variants) == 0:
        raise ConfigError("compare needs at least one variant")
    work = []
    for variant in variants:
        for seed in seeds:
            run_config = config.override(variant=variant, seed=seed)
            work.append((run_config, train_scenes, eval_scenes,
                         os.path.join(out_dir, f"{variant}_seed{seed}")))

    if verbose:
        print(f"🔬 Comparing {', '.join(variants)} over {len(seeds)} seed(s): {len(work)} runs")
    results = None
    if jobs > 1:
        try:
            with mp.Pool(jobs) as pool:
                results = pool.map(_run_one, work)
        except OSError as e:
            if verbose:
                print(f"⚠️ Parallel runs unavailable ({e}), continuing serially")
    if results is None:
        results = []
        for job in work:
            results.append(_run_one(job))
            if verbose:
                run = results[-1]
                print(f"   {job[0].variant:<11} seed {job[0].seed}: mae {run['mae']:.3f}  anvar {run['anvar']:.3f}")

    summaries = []
    for index, variant in enumerate(variants):
        summaries.append(VariantSummary(variant, results[index * len(seeds):(index + 1) * len(seeds)]))
    return summaries


def format_comparison(summaries: Sequence[VariantSummary]) -> str:
    """Aligned mean ± std table"""
    lines = [f"{'variant':<12}{'MAE':>18}{'MSE':>18}{'ANVar':>20}"]
    for summary in summaries:
        cells = []
        for key, width in (("mae", 18), ("mse", 18), ("anvar", 20)):
            mean, std = summary.stat(key)
            cells.append(f"{mean:.3f} ± {std:.3f}".rjust(width))
        lines.append(f"{summary.label:<12}" + "".join(cells))
    return "\n".join(lines)
