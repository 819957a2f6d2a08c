"""Summaries of a trained model for export: per-stage graphs and attention weights."""
from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import TrainConfig
from .data import STAGES, Dataset, build_windows
from .errors import ParameterError
from .metrics import predict
from .stgcn import MSTGCN
from .training import cross_validate, fold_splits, run_fold, predict_windows


def stage_adjacency(model: MSTGCN, dataset: Dataset) -> dict:
    """Mean learned adjacency of the centre epoch over correctly classified windows.

    Returns ``{stage name: (matrix (N, N), window count)}``; stages without a
    correct window get a matrix of NaN.
    """
    if model.config.adjacency != "learned":
        raise ParameterError("per-stage adjacency export needs a model with a learned graph")
    windows = build_windows(dataset, model.config.d)
    n = model.config.n_channels
    sums = np.zeros((len(STAGES), n, n))
    counts = np.zeros(len(STAGES), dtype=np.int64)
    centre = model.config.d

    def collect(out, picks):
        pred = predict(out.class_probs.data)
        truth = windows.labels[picks]
        A = out.aux["A_fc"].data[:, centre]
        for c in range(len(STAGES)):
            hit = (pred == truth) & (truth == c)
            sums[c] += A[hit].sum(axis=0)
            counts[c] += int(hit.sum())

    predict_windows(model, dataset, windows, collect=collect)
    return {STAGES[c]: (sums[c] / counts[c] if counts[c] else np.full((n, n), np.nan), int(counts[c]))
            for c in range(len(STAGES))}


def attention_summary(model: MSTGCN, dataset: Dataset, layer: int = 0) -> dict:
    """Mean attention weights of one layer, per view.

    ``temporal[view]`` is the (2d+1, 2d+1) mean of the row-stochastic
    temporal attention; row i belongs to window offset i - d. ``spatial[view]``
    is (stages, N): per true stage, the mean over windows of each channel's
    column-averaged spatial attention.
    """
    windows = build_windows(dataset, model.config.d)
    Tn, n = model.config.window, model.config.n_channels
    temporal = {v: np.zeros((Tn, Tn)) for v in ("fc", "dc")}
    spatial = {v: np.zeros((len(STAGES), n)) for v in ("fc", "dc")}
    counts = np.zeros(len(STAGES), dtype=np.int64)

    def collect(out, picks):
        truth = windows.labels[picks]
        for v in ("fc", "dc"):
            temporal[v] += out.aux[f"{v}.l{layer}.temporal"].data.sum(axis=0)
            col = out.aux[f"{v}.l{layer}.spatial"].data.mean(axis=1)
            for c in range(len(STAGES)):
                spatial[v][c] += col[truth == c].sum(axis=0)
        counts[:] += np.bincount(truth, minlength=len(STAGES))

    if not 0 <= layer < model.config.layers:
        raise ParameterError(f"layer {layer} out of range for a {model.config.layers}-layer model")
    predict_windows(model, dataset, windows, collect=collect)
    total = max(len(windows), 1)
    safe = np.where(counts > 0, counts, 1)[:, None]
    return {
        "temporal": {v: temporal[v] / total for v in temporal},
        "spatial": {v: np.where(counts[:, None] > 0, spatial[v] / safe, np.nan) for v in spatial},
        "counts": counts,
    }


SWEEP_KEYS = ("layers", "time_filters", "K", "lam", "adjacency")


def sweep_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{key: [values]}`` in a fixed key order."""
    for key in grid:
        if key not in SWEEP_KEYS:
            raise ParameterError(f"cannot sweep over {key!r}; choose from {SWEEP_KEYS}")
    keys = [k for k in SWEEP_KEYS if k in grid]
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def _sweep_job(args):
    dataset, config, point, n_folds = args
    cfg = config.replace(**point)
    if n_folds is None:
        split = fold_splits(dataset.subjects, len(dataset.subjects), cfg.seed)[0]
        metrics = run_fold(dataset, split, cfg).metrics
    else:
        metrics = cross_validate(dataset, n_folds, cfg).pooled
    return {**point, "accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1, "kappa": metrics.kappa}


def run_sweep(dataset: Dataset, config: TrainConfig, grid: dict, n_folds: int | None = None,
              jobs: int = 1) -> list[dict]:
    """Score every grid point; rows come back in grid order regardless of ``jobs``."""
    points = sweep_grid(grid)
    tasks = [(dataset, config, p, n_folds) for p in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_job, tasks))
    return [_sweep_job(t) for t in tasks]
