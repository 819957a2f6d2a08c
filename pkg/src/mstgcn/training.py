"""Optimisers, the training loop, evaluation and subject-independent cross-validation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from . import tensor as T
from .config import TrainConfig
from .data import Dataset, WindowIndex, build_windows, builtin_layout, load_electrode_layout
from .domain import GrlConfig, one_hot, total_loss
from .errors import DimensionError, DivergenceError, EvaluationError, ParameterError
from .features import FeatureNetConfig
from .metrics import Metrics, compute_metrics, predict
from .stgcn import FIXED_MODES, N_CLASSES, MSTGCN, ModelConfig

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "grl_scale", "ce_y", "ce_d", "graph_loss", "total_loss", "train_acc",
                   "val_loss", "val_acc")
ADJACENCY_MODES = ("learned",) + FIXED_MODES


# -- optimisers -----------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Update ``params`` in place with SGD or Adam.

    ``params`` and ``grads`` map names to tensors and arrays. Non-finite
    gradients raise :class:`DivergenceError` before anything is modified.
    Parameters whose gradient is ``None`` (unused in the pass) are skipped.
    """
    grads = {k: g for k, g in grads.items() if g is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}", {"parameter": name})
    state.step += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name].data -= lr * g
        return
    if state.kind != "adam":
        raise ParameterError(f"unknown optimizer {state.kind!r}")
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- model construction -----------------------------------------------------------

def resolve_layout(spec: str, channel_names):
    """Electrode layout for the dataset's channels, in dataset order.

    ``auto`` uses the built-in six-electrode montage when every channel name
    is in it and otherwise a near-square grid. ``isruc6`` and ``grid RxC``
    name built-ins; anything else is read as a layout CSV.
    """
    names = list(channel_names)
    if spec == "auto":
        six = builtin_layout("isruc6")
        if set(names) <= set(six.names):
            return six.subset(names)
        cols = math.ceil(math.sqrt(len(names)))
        rows = math.ceil(len(names) / cols)
        grid = builtin_layout(f"grid {rows}x{cols}")
        return G.ElectrodeLayout(names, grid.coords[: len(names)])
    layout = builtin_layout(spec) if spec == "isruc6" or spec.startswith("grid") else load_electrode_layout(spec)
    if set(names) <= set(layout.names):
        return layout.subset(names)
    if layout.n == len(names):
        return G.ElectrodeLayout(names, layout.coords)
    raise ParameterError(f"layout {spec!r} has {layout.n} electrodes and does not name the "
                         f"dataset channels {names}")


def feature_config(config: TrainConfig) -> FeatureNetConfig:
    return FeatureNetConfig.toy() if config.feature_net == "toy" else FeatureNetConfig()


def model_config(config: TrainConfig, n_channels: int, n_domains: int) -> ModelConfig:
    return ModelConfig(n_channels=n_channels, n_domains=n_domains, d=config.d, K=config.K,
                       layers=config.layers, cheb_filters=config.cheb_filters,
                       time_filters=config.time_filters, time_kernel=config.time_kernel,
                       head_hidden=config.head_hidden, adjacency=config.adjacency,
                       feature=feature_config(config))


def _band_features(signals: np.ndarray, n_bands: int = 16) -> np.ndarray:
    """Per-channel log band powers averaged over epochs: (E, N, L) to (N, n_bands)."""
    spectrum = np.abs(np.fft.rfft(signals.astype(np.float64), axis=-1)) ** 2
    bands = np.array_split(spectrum[..., 1:], n_bands, axis=-1)
    power = np.stack([b.mean(axis=-1) for b in bands], axis=-1)
    return np.log(power + 1e-12).mean(axis=0)


def fixed_adjacency(kind: str, signals: np.ndarray, config: TrainConfig, max_epochs: int = 200) -> np.ndarray:
    """A baseline adjacency estimated from training signals (E, N, L).

    Connectivity estimates are averaged over up to ``max_epochs`` evenly
    spaced epochs. ``knn`` links channels by their mean log band-power profile.
    """
    signals = np.asarray(signals)
    E, N = signals.shape[:2]
    if kind == "full":
        return G.baseline_adjacency("full", n=N).weights
    if kind == "knn":
        return G.baseline_adjacency("knn", features=_band_features(signals), k=config.knn_k).weights
    pick = np.unique(np.linspace(0, E - 1, min(E, max_epochs)).round().astype(int))
    mats = [G.baseline_adjacency(kind, signals=signals[i].astype(np.float64), bins=config.mi_bins).weights for i in pick]
    return np.mean(mats, axis=0)


def build_model(config: TrainConfig, dataset: Dataset, n_domains: int, rng: np.random.Generator) -> MSTGCN:
    mcfg = model_config(config, dataset.n_channels, n_domains)
    if mcfg.feature.input_length != dataset.samples_per_epoch:
        raise DimensionError(f"feature net '{config.feature_net}' expects {mcfg.feature.input_length} samples "
                             f"per epoch, dataset has {dataset.samples_per_epoch}")
    layout = resolve_layout(config.layout, dataset.channel_names)
    dc = G.build_dc_adjacency(layout)
    fixed = None
    if config.adjacency != "learned":
        fixed = fixed_adjacency(config.adjacency, dataset.signals, config)
    return MSTGCN(mcfg, dc, rng, fixed_adjacency=fixed)


# -- batching -----------------------------------------------------------------------

def make_batches(windows: WindowIndex, batch_size: int, block: int, rng: np.random.Generator) -> list:
    """Shuffled, subject-stratified batches of window positions.

    Each subject's windows are cut into runs of ``block`` consecutive windows
    (neighbouring windows share most of their epochs), the runs are shuffled
    within each subject and then dealt round-robin across subjects, so every
    batch mixes subjects.
    """
    per_subject = []
    for s in np.unique(windows.subjects):
        where = np.flatnonzero(windows.subjects == s)
        runs = [where[i:i + block] for i in range(0, len(where), block)]
        per_subject.append([runs[i] for i in rng.permutation(len(runs))])
    order = rng.permutation(len(per_subject))
    dealt = []
    for i in range(max((len(r) for r in per_subject), default=0)):
        for s in order:
            if i < len(per_subject[s]):
                dealt.append(per_subject[s][i])
    flat = np.concatenate(dealt) if dealt else np.zeros(0, np.intp)
    return [flat[i:i + batch_size] for i in range(0, len(flat), batch_size)]


def gather(dataset: Dataset, windows: WindowIndex, picks) -> tuple[np.ndarray, np.ndarray]:
    """Unique epochs (E, N, L) needed by windows ``picks`` and their (B, 2d+1) index."""
    rows = windows.rows[picks]
    unique, inverse = np.unique(rows, return_inverse=True)
    return dataset.signals[unique].astype(np.float64), inverse.reshape(rows.shape)


def split_validation(windows: WindowIndex, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the last ``fraction`` of every subject's windows."""
    train, val = [], []
    for s in np.unique(windows.subjects):
        where = np.flatnonzero(windows.subjects == s)
        n_val = int(round(fraction * len(where)))
        if n_val >= len(where):
            n_val = len(where) - 1
        train.append(where[:len(where) - n_val])
        val.append(where[len(where) - n_val:])
    return np.concatenate(train), np.concatenate(val)


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MSTGCN
    history: list
    domain_subjects: list
    seen_subjects: set
    best_epoch: int
    stopped_early: bool


def _snapshot(model: MSTGCN):
    return {k: v.data.copy() for k, v in model.params.items()}, model.bn_state()


def _restore(model: MSTGCN, snap):
    params, bn = snap
    for k, v in params.items():
        model.params[k].data = v.copy()
    model.load_bn_state(bn)


def seed_streams(seed: int) -> dict:
    names = ("init", "shuffle", "dropout")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def predict_windows(model: MSTGCN, dataset: Dataset, windows: WindowIndex, picks=None, chunk: int = 64,
                    collect=None):
    """Class probabilities for windows in eval mode; ``collect(out, picks)`` sees every chunk."""
    picks = np.arange(len(windows)) if picks is None else np.asarray(picks)
    probs, readouts = [], []
    for i in range(0, len(picks), chunk):
        part = picks[i:i + chunk]
        epochs, index = gather(dataset, windows, part)
        out = model.forward_indexed(epochs, index, training=False)
        probs.append(out.class_probs.data)
        readouts.append(out.readout.data)
        if collect is not None:
            collect(out, part)
    if not probs:
        return np.zeros((0, N_CLASSES)), np.zeros((0, model.config.readout_dim))
    return np.concatenate(probs), np.concatenate(readouts)


def train(dataset: Dataset, config: TrainConfig, progress=None) -> TrainResult:
    """Fit a model on every subject of ``dataset``.

    Each training subject is one domain. The last ``val_fraction`` of each
    subject's windows is held out for early stopping, and the parameters of
    the epoch with the lowest validation loss are restored at the end.
    """
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    if len(np.unique(dataset.labels)) < 2:
        raise ParameterError("training needs at least two classes present")
    streams = seed_streams(config.seed)
    subjects = dataset.subjects
    domain_of = {s: i for i, s in enumerate(subjects)}
    model = build_model(config, dataset, len(subjects), streams["init"])
    windows = build_windows(dataset, config.d)
    domains = np.array([domain_of[int(s)] for s in windows.subjects], dtype=np.intp)
    if config.val_fraction > 0 and config.patience > 0:
        train_ids, val_ids = split_validation(windows, config.val_fraction)
    else:
        train_ids, val_ids = np.arange(len(windows)), np.zeros(0, np.intp)
    train_windows = windows.select(train_ids)
    train_domains = domains[train_ids]
    grl = GrlConfig(config.beta, config.warmup)
    opt = OptimizerState(kind=config.optimizer)
    history, seen = [], set()
    best = (math.inf, -1, _snapshot(model))
    last_good = _snapshot(model)
    stale = 0
    stopped = False
    for epoch in range(config.epochs):
        scale = grl.scale(epoch)
        sums = dict(ce_y=0.0, ce_d=0.0, graph_loss=0.0, total_loss=0.0, correct=0, count=0)
        for b, picks in enumerate(make_batches(train_windows, config.batch_size, config.window_block,
                                               streams["shuffle"])):
            seen.update(int(s) for s in train_windows.subjects[picks])
            epochs_, index = gather(dataset, train_windows, picks)
            with T.Tape() as tape:
                try:
                    out = model.forward_indexed(epochs_, index, training=True, rng=streams["dropout"],
                                                grl_scale=scale, lam=config.lam)
                    parts = total_loss(out.class_probs, one_hot(train_windows.labels[picks], N_CLASSES),
                                       out.domain_probs, one_hot(train_domains[picks], len(subjects)),
                                       out.graph_loss, config.mu)
                except EvaluationError as exc:
                    _restore(model, last_good)
                    raise DivergenceError(f"non-finite forward pass at epoch {epoch}, batch {b} ({exc}); "
                                          f"parameters restored to the last completed epoch",
                                          {"epoch": epoch, "batch": b}) from exc
                if not np.isfinite(parts.total.item()):
                    _restore(model, last_good)
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}; "
                                          f"parameters restored to the last completed epoch",
                                          {"epoch": epoch, "batch": b, "ce_y": parts.ce_y,
                                           "ce_d": parts.ce_d, "graph_loss": parts.graph})
                tape.backward(parts.total)
            grads = {k: p.grad for k, p in model.params.items()}
            try:
                optimizer_step(model.params, grads, opt, config.lr)
            except DivergenceError as exc:
                _restore(model, last_good)
                exc.diagnostics.update(epoch=epoch, batch=b)
                raise
            n = len(picks)
            for key, value in (("ce_y", parts.ce_y), ("ce_d", parts.ce_d), ("graph_loss", parts.graph),
                               ("total_loss", parts.total.item())):
                sums[key] += value * n
            sums["correct"] += int((predict(out.class_probs.data) == train_windows.labels[picks]).sum())
            sums["count"] += n
        row = {"epoch": epoch, "grl_scale": scale}
        for key in ("ce_y", "ce_d", "graph_loss", "total_loss"):
            row[key] = sums[key] / sums["count"]
        row["train_acc"] = sums["correct"] / sums["count"]
        if len(val_ids):
            probs, _ = predict_windows(model, dataset, windows, val_ids)
            row["val_loss"] = T.cross_entropy(probs, one_hot(windows.labels[val_ids], N_CLASSES)).item()
            row["val_acc"] = float(np.mean(predict(probs) == windows.labels[val_ids]))
        else:
            row["val_loss"] = row["ce_y"]
            row["val_acc"] = row["train_acc"]
        history.append(row)
        last_good = _snapshot(model)
        log.info("epoch %d: loss %.4f train acc %.3f val acc %.3f", epoch, row["total_loss"],
                 row["train_acc"], row["val_acc"])
        if progress is not None:
            progress(row)
        if row["val_loss"] < best[0]:
            best = (row["val_loss"], epoch, last_good)
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                stopped = True
                break
    if len(val_ids):
        _restore(model, best[2])
    best_epoch = best[1] if len(val_ids) else len(history) - 1
    return TrainResult(model, history, subjects, seen, best_epoch, stopped)


# -- evaluation ----------------------------------------------------------------------

@dataclass
class Evaluation:
    metrics: Metrics
    y_true: np.ndarray
    y_pred: np.ndarray
    subjects: np.ndarray
    readout: np.ndarray


def evaluate(model: MSTGCN, dataset: Dataset, warn: bool = True) -> Evaluation:
    """Predict every window of ``dataset`` and score the predictions."""
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    windows = build_windows(dataset, model.config.d)
    probs, readout = predict_windows(model, dataset, windows)
    y_pred = predict(probs)
    return Evaluation(compute_metrics(windows.labels, y_pred, warn=warn), windows.labels, y_pred,
                      windows.subjects, readout)


# -- cross-validation ------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_subjects: tuple
    test_subjects: tuple


def fold_splits(subjects, n_folds: int, seed: int) -> list[FoldSplit]:
    """Seeded shuffle of the subjects, then round-robin assignment to test folds."""
    subjects = sorted(int(s) for s in subjects)
    if n_folds < 2:
        raise ParameterError(f"need at least 2 folds, got {n_folds}")
    if n_folds > len(subjects):
        raise ParameterError(f"{n_folds} folds but only {len(subjects)} subjects")
    perm = np.random.default_rng(seed).permutation(subjects)
    splits = []
    for f in range(n_folds):
        test = tuple(sorted(int(s) for s in perm[f::n_folds]))
        train_ = tuple(s for s in subjects if s not in test)
        splits.append(FoldSplit(f, train_, test))
    return splits


@dataclass
class FoldResult:
    split: FoldSplit
    metrics: Metrics
    history: list
    seen_subjects: set
    y_true: np.ndarray
    y_pred: np.ndarray
    readout: np.ndarray
    subjects: np.ndarray
    model: MSTGCN | None = None


@dataclass
class CVResult:
    folds: list
    pooled: Metrics

    def summary(self) -> dict:
        out = {}
        for key in ("accuracy", "macro_f1", "kappa"):
            vals = np.array([getattr(f.metrics, key) for f in self.folds])
            out[f"{key}_mean"] = float(vals.mean())
            out[f"{key}_std"] = float(vals.std())
        return out


def fold_seed(seed: int, fold: int) -> int:
    """Independent per-fold seed derived from the master seed."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_fold(dataset: Dataset, split: FoldSplit, config: TrainConfig, keep_model: bool = False) -> FoldResult:
    train_set = dataset.for_subjects(split.train_subjects)
    test_set = dataset.for_subjects(split.test_subjects)
    result = train(train_set, config.replace(seed=fold_seed(config.seed, split.fold)))
    leaked = result.seen_subjects & set(split.test_subjects)
    if leaked:
        raise RuntimeError(f"test subjects {sorted(leaked)} contributed to training gradients")
    ev = evaluate(result.model, test_set, warn=False)
    return FoldResult(split, ev.metrics, result.history, result.seen_subjects, ev.y_true, ev.y_pred,
                      ev.readout, ev.subjects, result.model if keep_model else None)


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(dataset: Dataset, n_folds: int, config: TrainConfig, jobs: int = 1,
                   keep_models: bool = False) -> CVResult:
    """Subject-independent cross-validation; reports per-fold and pooled metrics."""
    splits = fold_splits(dataset.subjects, n_folds, config.seed)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_job, [(dataset, s, config, keep_models) for s in splits]))
    else:
        folds = [run_fold(dataset, s, config, keep_models) for s in splits]
    y_true = np.concatenate([f.y_true for f in folds])
    y_pred = np.concatenate([f.y_pred for f in folds])
    return CVResult(folds, compute_metrics(y_true, y_pred, warn=False))


# -- adjacency comparison ----------------------------------------------------------------

def compare_adjacency(dataset: Dataset, config: TrainConfig, modes=ADJACENCY_MODES,
                      n_folds: int | None = None, jobs: int = 1) -> list[dict]:
    """Train and test one model per adjacency mode on identical splits.

    With ``n_folds`` unset a single split holds out the last subject after
    the seeded shuffle; otherwise full cross-validation runs per mode.
    """
    rows = []
    for mode in modes:
        if mode not in ADJACENCY_MODES:
            raise ParameterError(f"unknown adjacency mode {mode!r}")
        cfg = config.replace(adjacency=mode)
        if n_folds is None:
            split = fold_splits(dataset.subjects, len(dataset.subjects), config.seed)[0]
            folds = [run_fold(dataset, split, cfg)]
            pooled = folds[0].metrics
        else:
            cv = cross_validate(dataset, n_folds, cfg, jobs=jobs)
            folds, pooled = cv.folds, cv.pooled
        rows.append({"adjacency": mode, "accuracy": pooled.accuracy, "macro_f1": pooled.macro_f1,
                     "kappa": pooled.kappa, "epochs_trained": sum(len(f.history) for f in folds)})
    return rows
