"""Training loop, evaluation protocols and agreement metrics."""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng as rngmod
from . import tensor as tn
from .data import TrialSet
from .errors import BiteError, ConfigError, DataError
from .model import BiteConfig, BiteModel
from .signal import AlignmentState, ea_apply, ea_fit, stft_batch

PROTOCOLS = ("within-subject", "loso")
DEFAULT_EPOCHS = {"within-subject": 300, "loso": 100}


class TrainingError(BiteError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int | None = None  # None -> protocol default
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = rngmod.DEFAULT_SEED
    shuffle: bool = True
    split_ratio: float = 0.8
    std_ddof: int = 0

    def __post_init__(self) -> None:
        if self.epochs is not None and (not isinstance(self.epochs, int) or self.epochs < 1):
            raise ConfigError(f"epochs must be >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("optimizer moments must satisfy 0 <= beta < 1 and eps > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.std_ddof not in (0, 1):
            raise ConfigError(f"std_ddof must be 0 or 1, got {self.std_ddof}")

    def epochs_for(self, protocol: str) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[protocol]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {unknown}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Loss and optimiser
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels) -> tn.Variable:
    """Batch-mean softmax cross-entropy (log-sum-exp stabilised)."""
    return tn.cross_entropy(logits, labels)


class Adam:
    """Adaptive-moment optimiser with bias correction."""

    def __init__(self, params: Sequence[tn.Variable], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        if len(grads) != len(self.params):
            raise ConfigError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.value.shape or m.shape != p.value.shape:
                raise ConfigError(f"optimizer state shape mismatch for {p.name}: {g.shape} vs {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        tn.zero_grad(self.params)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with true labels on rows and predictions on columns."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def accuracy(confusion) -> float:
    cm = np.asarray(confusion)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def kappa(confusion) -> float:
    """Cohen's kappa, ``(p_o - p_e) / (1 - p_e)``; 0 when ``p_e == 1``."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion must be square, got shape {cm.shape}")
    n = cm.sum()
    if n <= 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(cm) / n
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / n ** 2
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class EvalReport:
    accuracy: float
    kappa: float
    confusion: list[list[int]]
    per_subject: list[dict] = field(default_factory=list)
    accuracy_mean: float = 0.0
    accuracy_std: float = 0.0
    kappa_mean: float = 0.0
    kappa_std: float = 0.0

    @classmethod
    def from_folds(cls, folds: Sequence[tuple[int, np.ndarray]], ddof: int = 0) -> "EvalReport":
        """Pool confusions; mean/std over per-fold scores."""
        pooled = np.sum([cm for _, cm in folds], axis=0)
        per = [{"id": int(fid), "accuracy": accuracy(cm), "kappa": kappa(cm)} for fid, cm in folds]
        accs = np.array([p["accuracy"] for p in per])
        kaps = np.array([p["kappa"] for p in per])
        ddof = ddof if len(per) > 1 else 0
        return cls(accuracy(pooled), kappa(pooled), pooled.astype(int).tolist(), per,
                   float(accs.mean()), float(accs.std(ddof=ddof)),
                   float(kaps.mean()), float(kaps.std(ddof=ddof)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class Fold:
    fold_id: int
    train: TrialSet
    test: TrialSet


def split_within_subject(trials: TrialSet, ratio: float = 0.8, seed: int = rngmod.DEFAULT_SEED) -> list[Fold]:
    """One train/test split per subject.

    If every trial carries a session tag, trials tagged ``"test"`` form the
    test set. Otherwise each class is shuffled and ``round(ratio * n_c)``
    trials go to training.
    """
    folds = []
    tagged = all(t is not None for t in trials.sessions)
    for sid in np.unique(trials.subjects):
        idx = np.flatnonzero(trials.subjects == sid)
        if tagged:
            is_test = np.array([trials.sessions[i] == "test" for i in idx])
            tr, te = idx[~is_test], idx[is_test]
        else:
            gen = rngmod.stream(seed, "split", int(sid))
            tr_parts, te_parts = [], []
            for c in range(trials.n_classes):
                cls_idx = idx[trials.labels[idx] == c]
                if cls_idx.size == 0:
                    continue
                cls_idx = gen.permutation(cls_idx)
                k = int(math.floor(ratio * cls_idx.size + 0.5))
                tr_parts.append(cls_idx[:k])
                te_parts.append(cls_idx[k:])
            tr = np.sort(np.concatenate(tr_parts))
            te = np.sort(np.concatenate(te_parts))
        if tr.size == 0 or te.size == 0:
            raise DataError(f"subject {sid}: split leaves an empty {'train' if tr.size == 0 else 'test'} set")
        missing = set(trials.labels[idx].tolist()) - set(trials.labels[tr].tolist())
        if missing:
            raise DataError(f"subject {sid}: class(es) {sorted(missing)} absent from training after split")
        folds.append(Fold(int(sid), trials.subset(tr), trials.subset(te)))
    return folds


def split_loso(trials: TrialSet) -> list[Fold]:
    """One fold per subject (ascending id); the held-out subject is the test set."""
    subjects = np.unique(trials.subjects)
    if subjects.size < 2:
        raise DataError(f"LOSO needs at least 2 subjects, got {subjects.size}")
    return [Fold(int(s), trials.subset(np.flatnonzero(trials.subjects != s)),
                 trials.subset(np.flatnonzero(trials.subjects == s))) for s in subjects]


def make_folds(trials: TrialSet, protocol: str, train_cfg: TrainConfig) -> list[Fold]:
    if protocol == "within-subject":
        return split_within_subject(trials, train_cfg.split_ratio, train_cfg.seed)
    if protocol == "loso":
        return split_loso(trials)
    raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


# ---------------------------------------------------------------------------
# Alignment per protocol
# ---------------------------------------------------------------------------

def align_per_subject(ts: TrialSet) -> np.ndarray:
    out = np.empty_like(ts.signals)
    for sid in np.unique(ts.subjects):
        idx = ts.subjects == sid
        out[idx] = ea_apply(ea_fit(ts.signals[idx]), ts.signals[idx])
    return out


def align_fold(fold: Fold, protocol: str) -> tuple[np.ndarray, np.ndarray, AlignmentState | None]:
    """Within-subject: fit on training trials, reuse for test. LOSO: every subject self-aligned."""
    if protocol == "within-subject":
        state = ea_fit(fold.train.signals)
        return ea_apply(state, fold.train.signals), ea_apply(state, fold.test.signals), state
    return align_per_subject(fold.train), align_per_subject(fold.test), None


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold_id: int
    confusion: np.ndarray
    model: BiteModel
    alignment: AlignmentState | None
    test: TrialSet
    log: list[dict]


def _spectra(model_cfg: BiteConfig, x: np.ndarray) -> np.ndarray | None:
    if not model_cfg.use_frequency:
        return None
    return stft_batch(x, model_cfg.stft_plan())


def fit(model: BiteModel, x: np.ndarray, y: np.ndarray, train_cfg: TrainConfig, epochs: int,
        fold_id: int = 0, spectra: np.ndarray | None = None,
        log: Callable[[str], None] | None = None) -> list[dict]:
    """Mini-batch training on aligned ``x`` [n,C,T]; returns per-epoch records."""
    x4 = x[:, None]
    if spectra is None and model.config.use_frequency:
        spectra = _spectra(model.config, x)
    opt = Adam.from_config(model.parameters(), train_cfg)
    shuffle = rngmod.stream(train_cfg.seed, "shuffle", fold_id)
    drop = rngmod.stream(train_cfg.seed, "dropout", fold_id)
    n = len(y)
    records = []
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(n) if train_cfg.shuffle else np.arange(n)
        total, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = np.sort(order[start:start + train_cfg.batch_size])
            if idx.size < 2 and n >= 2:
                continue  # batch statistics need two samples
            spec = None if spectra is None else spectra[idx]
            with tn.Graph():
                logits = model.forward(x4[idx], True, spec, drop)
                loss = cross_entropy(logits, y[idx])
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} (fold {fold_id})")
                model.zero_grad()
                tn.backward(loss)
            opt.step()
            total += value * idx.size
            correct += int((logits.value.argmax(axis=1) == y[idx]).sum())
            seen += idx.size
        rec = {"epoch": epoch, "fold": fold_id, "loss": total / max(seen, 1), "acc": correct / max(seen, 1)}
        records.append(rec)
        if log is not None:
            log(f"epoch={epoch} fold={fold_id} loss={rec['loss']:.6f} acc={rec['acc']:.4f}")
    return records


def evaluate(model: BiteModel, x_aligned: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Eval-mode confusion matrix for aligned trials."""
    spec = _spectra(model.config, x_aligned)
    pred = model.predict(x_aligned[:, None], spec)
    return confusion_matrix(labels, pred, model.config.n_classes)


def config_for(model_cfg: BiteConfig, trials: TrialSet) -> BiteConfig:
    """Fill data-dependent fields and reject contradictions."""
    if (model_cfg.n_channels, model_cfg.n_samples) != (trials.n_channels, trials.n_samples):
        raise ConfigError(f"model expects [C={model_cfg.n_channels}, T={model_cfg.n_samples}], data has "
                          f"[C={trials.n_channels}, T={trials.n_samples}]")
    if model_cfg.fs != trials.fs or model_cfg.n_classes != trials.n_classes:
        raise ConfigError(f"model fs/n-classes ({model_cfg.fs}, {model_cfg.n_classes}) differ from data "
                          f"({trials.fs}, {trials.n_classes})")
    return model_cfg


def run_fold(model_cfg: BiteConfig, train_cfg: TrainConfig, fold: Fold, protocol: str,
             log: Callable[[str], None] | None = None) -> FoldResult:
    x_tr, x_te, state = align_fold(fold, protocol)
    model = BiteModel.initialize(model_cfg, train_cfg.seed, fold.fold_id)
    records = fit(model, x_tr, fold.train.labels, train_cfg, train_cfg.epochs_for(protocol),
                  fold.fold_id, log=log)
    cm = evaluate(model, x_te, fold.test.labels)
    return FoldResult(fold.fold_id, cm, model, state, fold.test, records)


def _run_fold_job(args) -> FoldResult:
    model_cfg, train_cfg, fold, protocol = args
    return run_fold(model_cfg, train_cfg, fold, protocol)


def worker_count() -> int:
    env = os.environ.get("BITE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"BITE_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def parallel_map(fn: Callable, jobs: Sequence, workers: int | None = None) -> list:
    """Order-preserving map; uses processes when more than one worker is allowed."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class RunResult:
    report: EvalReport
    folds: list[FoldResult]

    @property
    def log(self) -> list[dict]:
        return [r for f in self.folds for r in f.log]


def train_and_eval(model_cfg: BiteConfig, train_cfg: TrainConfig, trials: TrialSet,
                   protocol: str = "within-subject", log: Callable[[str], None] | None = None,
                   workers: int | None = 1) -> RunResult:
    """Run every fold of ``protocol`` and aggregate an :class:`EvalReport`.

    With ``workers > 1`` folds run in separate processes and their epoch logs
    are replayed afterwards in fold order.
    """
    model_cfg = config_for(model_cfg, trials)
    folds = make_folds(trials, protocol, train_cfg)
    if workers is not None and workers > 1 and len(folds) > 1:
        results = parallel_map(_run_fold_job, [(model_cfg, train_cfg, f, protocol) for f in folds], workers)
        if log is not None:
            for r in results:
                for rec in r.log:
                    log(f"epoch={rec['epoch']} fold={rec['fold']} loss={rec['loss']:.6f} acc={rec['acc']:.4f}")
    else:
        results = [run_fold(model_cfg, train_cfg, f, protocol, log) for f in folds]
    report = EvalReport.from_folds([(r.fold_id, r.confusion) for r in results], train_cfg.std_ddof)
    return RunResult(report, results)


# ---------------------------------------------------------------------------
# Hyper-parameter sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    kernels: list[int]
    dropouts: list[float]
    cells: list[dict]

    @property
    def table(self) -> list[list[float]]:
        lookup = {(c["kernel"], c["dropout"]): c["accuracy"] for c in self.cells}
        return [[lookup[(k, d)] for d in self.dropouts] for k in self.kernels]

    @property
    def row_average(self) -> list[float]:
        return [float(np.mean(row)) for row in self.table]

    def to_dict(self) -> dict:
        return {"kernels": self.kernels, "dropouts": self.dropouts, "cells": self.cells,
                "table": self.table, "row_average": self.row_average}


def _sweep_cell(args) -> dict:
    model_cfg, train_cfg, trials, protocol, k, d = args
    cfg = model_cfg.replace(tcn_kernel=k, dropout=d)
    rep = train_and_eval(cfg, train_cfg, trials, protocol).report
    return {"kernel": k, "dropout": d, "accuracy": rep.accuracy, "kappa": rep.kappa}


def hyper_sweep(kernels: Iterable[int], dropouts: Iterable[float], model_cfg: BiteConfig,
                train_cfg: TrainConfig, trials: TrialSet, protocol: str = "within-subject",
                workers: int | None = 1) -> SweepResult:
    """Train-and-eval every (tcn-kernel, dropout) cell; rows are kernels."""
    kernels, dropouts = [int(k) for k in kernels], [float(d) for d in dropouts]
    if not kernels or not dropouts:
        raise ConfigError("hyper-parameter grid is empty")
    jobs = [(model_cfg, train_cfg, trials, protocol, k, d) for k in kernels for d in dropouts]
    cells = parallel_map(_sweep_cell, jobs, workers)
    return SweepResult(kernels, dropouts, cells)
