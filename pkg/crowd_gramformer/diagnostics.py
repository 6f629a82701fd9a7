"""
Attention homogenization (ANVar), counting errors and attention / neighbor exports
"""
import csv
import json
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import ContractError
from .synthdata import write_pgm
from .utils import ensure_directory, grid_position


class AnvarReport:
    """Normalized attention-row variance: pooled over all rows, and per layer and head"""

    def __init__(self, per_head: np.ndarray, node_count: int, skipped_rows: int, total_rows: int,
                 row_sum: float = 0.0):
        self.per_head = np.asarray(per_head, dtype=np.float64)  # L x S, NaN where every row was skipped
        self.node_count = node_count
        self.skipped_rows = skipped_rows
        self.total_rows = total_rows
        self.row_sum = row_sum  # sum of the scores of valid rows

    @property
    def degenerate(self) -> bool:
        """No attention row had positive mass"""
        return self.total_rows > 0 and self.skipped_rows == self.total_rows

    @property
    def overall(self) -> float:
        """Mean score over every valid row of every head and layer; 0 when degenerate"""
        valid = self.total_rows - self.skipped_rows
        return self.row_sum / valid if valid else 0.0

    def __repr__(self):
        return f"AnvarReport(overall={self.overall:.4f}, N={self.node_count}, skipped={self.skipped_rows})"


def _row_scores(rows: np.ndarray) -> np.ndarray:
    """Variance of N * a / sum(a) for every row with positive mass; NaN otherwise"""
    n = rows.shape[-1]
    mass = rows.sum(axis=-1, keepdims=True)
    valid = mass[..., 0] > 0
    normalized = np.divide(n * rows, mass, out=np.zeros_like(rows), where=mass > 0)
    scores = normalized.var(axis=-1)
    return np.where(valid, scores, np.nan)


def anvar_of_maps(attention: Sequence[np.ndarray]) -> AnvarReport:
    """ANVar over per-layer S x N x N attention tensors"""
    if len(attention) == 0:
        raise ContractError("anvar needs at least one attention layer")
    per_head = []
    skipped = 0
    total = 0
    row_sum = 0.0
    node_count = attention[0].shape[-1]
    for maps in attention:
        scores = _row_scores(np.asarray(maps, dtype=np.float64))
        skipped += int(np.isnan(scores).sum())
        total += scores.size
        row_sum += float(np.nansum(scores))
        with np.errstate(invalid="ignore"):
            head_means = [float(np.nanmean(row)) if np.isfinite(row).any() else np.nan for row in scores]
        per_head.append(head_means)
    return AnvarReport(np.array(per_head), node_count, skipped, total, row_sum)


def anvar(trace) -> AnvarReport:
    """ANVar of the attention maps recorded in a forward trace"""
    return anvar_of_maps(trace.attention)


def anvar_dataset(traces) -> float:
    """Mean per-scene ANVar over an evaluation set, degenerate scenes excluded"""
    values = []
    for trace in traces:
        report = anvar(trace)
        if not report.degenerate:
            values.append(report.overall)
    return float(np.mean(values)) if values else 0.0


class ErrorReport:
    """MAE, root-mean-square count error and NAE over a test set"""

    def __init__(self, mae: float, mse: float, nae: float, samples: int, nae_excluded: int = 0):
        self.mae = mae
        self.mse = mse
        self.nae = nae
        self.samples = samples
        self.nae_excluded = nae_excluded

    def as_dict(self) -> Dict[str, float]:
        return {"mae": self.mae, "mse": self.mse, "nae": self.nae}

    def __repr__(self):
        return f"ErrorReport(mae={self.mae:.4f}, mse={self.mse:.4f}, nae={self.nae:.4f}, n={self.samples})"


def error_metrics(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> ErrorReport:
    """MAE = mean|d|, MSE = sqrt(mean d^2), NAE = mean(|d| / gt) over gt > 0"""
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise ContractError("error_metrics needs at least one sample")
    if pred.shape != gt.shape:
        raise ContractError(f"error_metrics: {pred.size} predictions vs {gt.size} ground-truth counts")

    delta = np.abs(pred - gt)
    positive = gt > 0
    nae = float((delta[positive] / gt[positive]).mean()) if positive.any() else 0.0
    return ErrorReport(
        mae=float(delta.mean()),
        mse=float(np.sqrt((delta ** 2).mean())),
        nae=nae,
        samples=int(pred.size),
        nae_excluded=int((~positive).sum()),
    )


# ---------------------------------------------------------------- exports

def _check_node(trace, node: int):
    if not 0 <= node < trace.node_count:
        raise ContractError(f"node id {node} out of range for N = {trace.node_count}")


def attention_filename(layer: int, head: int, node: int) -> str:
    return f"attention_layer{layer}_head{head}_node{node}.pgm"


def export_attention(trace, node: int, directory: str) -> List[str]:
    """One PGM per (layer, head): the node's attention row on the W x H grid, min-max scaled"""
    _check_node(trace, node)
    ensure_directory(directory)
    width, height = trace.grid
    paths = []
    for layer, maps in enumerate(trace.attention):
        for head in range(maps.shape[0]):
            row = maps[head, node].reshape(height, width)
            low, high = float(row.min()), float(row.max())
            scaled = (row - low) / (high - low) if high > low else np.zeros_like(row)
            path = os.path.join(directory, attention_filename(layer, head, node))
            write_pgm(path, scaled, scale=1.0)
            paths.append(path)
    return paths


def export_neighbors(trace, node: int, path: str) -> int:
    """CSV of the node's q-NN per layer; returns the row count"""
    _check_node(trace, node)
    parent = os.path.dirname(path)
    if parent:
        ensure_directory(parent)
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["layer", "rank", "neighbor_id", "grid_x", "grid_y"])
        for layer, neighbors in enumerate(trace.neighbors):
            if neighbors is None:
                continue
            for rank, neighbor in enumerate(neighbors[node]):
                grid_x, grid_y = grid_position(int(neighbor), trace.grid)
                writer.writerow([layer, rank, int(neighbor), grid_x, grid_y])
                rows += 1
    return rows


# ---------------------------------------------------------------- reports

def evaluation_document(errors: ErrorReport, anvar_value: float,
                        counts: Optional[Sequence[Dict[str, float]]] = None) -> Dict:
    """JSON-ready evaluation result"""
    document = {"anvar": anvar_value, "mae": errors.mae, "mse": errors.mse, "nae": errors.nae}
    if counts is not None:
        document["counts"] = list(counts)
    return document


def format_json(document: Dict) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def format_report(errors: ErrorReport, anvar_value: float) -> str:
    """Aligned text block"""
    lines = [
        f"{'samples':<8}{errors.samples:>12d}",
        f"{'MAE':<8}{errors.mae:>12.4f}",
        f"{'MSE':<8}{errors.mse:>12.4f}",
        f"{'NAE':<8}{errors.nae:>12.4f}",
        f"{'ANVar':<8}{anvar_value:>12.4f}",
    ]
    if errors.nae_excluded:
        lines.append(f"⚠️ {errors.nae_excluded} scene(s) with zero ground truth left out of NAE")
    return "\n".join(lines)
