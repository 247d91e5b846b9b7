"""Adam + label-smoothed BCE training with early stopping, plateau LR decay and CV."""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data.loader import EcgDataset, batch_generator, load_signal
from .data.preprocess import AugmentConfig, fit_standardization
from .data.ptbxl import LABEL_SPACE, Partition, TEST_FOLD, check_patient_disjoint
from .errors import ConfigError, IntegrityError, NumericError
from .metrics import TABLE_COLUMNS, evaluate_predictions, macro_auroc
from .model import build

log = logging.getLogger(__name__)

CLAMP = 1e-7
AGGREGATED = TABLE_COLUMNS + (
    "label_accuracy", "weighted_precision", "weighted_recall", "weighted_f1",
    "spearman_prevalence_f1",
)
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_macro_auroc", "lr", "seconds")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    label_smoothing: float = 0.05
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    seed: int = 0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    prefetch: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing {self.label_smoothing} outside [0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor {self.plateau_factor} outside (0, 1)")
        if self.lr0 <= 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive (or None to disable)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ loss

def _smooth(targets, eps):
    if not 0 <= eps < 1:
        raise ConfigError(f"label smoothing {eps} outside [0, 1)")
    return targets * (1.0 - eps) + eps / 2.0


def bce_smoothed_loss(probs, targets, eps):
    """Mean label-smoothed binary cross-entropy and its gradient w.r.t. ``probs``."""
    y = _smooth(np.asarray(targets, dtype=np.float64), eps)
    p_raw = np.asarray(probs, dtype=np.float64)
    p = np.clip(p_raw, CLAMP, 1 - CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    inside = (p_raw >= CLAMP) & (p_raw <= 1 - CLAMP)
    dp = (p - y) / (p * (1 - p)) / n * inside
    return float(loss), dp


def bce_logit_grad(probs, targets, eps):
    """Gradient w.r.t. the pre-sigmoid logits, (p - y')/n; avoids dividing by p(1-p)."""
    y = _smooth(np.asarray(targets, dtype=np.float64), eps)
    p = np.asarray(probs, dtype=np.float64)
    return (p - y) / p.size


# ------------------------------------------------------------ optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update of every array in ``params`` that has a gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def clip_global_norm(grads, max_norm):
    """Scale all gradients by one factor so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


# ------------------------------------------------------------ schedules

class EarlyStopping:
    """Track the best (strictly greater) score; stop after ``patience`` epochs without one."""

    def __init__(self, patience):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, value, epoch):
        if value > self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self):
        return self.wait >= self.patience


class PlateauScheduler:
    """Multiply the LR by ``factor`` once the monitored loss stalls for ``patience`` epochs."""

    def __init__(self, lr, patience, factor, min_lr):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, loss):
        if loss < self.best:
            self.best, self.wait = loss, 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            new = max(self.lr * self.factor, self.min_lr)
            if new < self.lr:
                log.info("reducing learning rate to %g", new)
            self.lr = new
            self.wait = 0
        return self.lr


# ------------------------------------------------------------------ log

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = None
    best_auroc: float = None

    def append(self, **row):
        self.rows.append({c: row[c] for c in LOG_COLUMNS})

    def deterministic_rows(self):
        """Rows without wall-clock time, for run-to-run comparison."""
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"], *(repr(float(r[c])) for c in LOG_COLUMNS[1:])])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [{"epoch": int(r["epoch"]), **{c: float(r[c]) for c in LOG_COLUMNS[1:]}}
                    for r in csv.DictReader(fh)]
        return cls(rows)


# ---------------------------------------------------------------- train

def predict_dataset(model, dataset, batch_size=64, prefetch=0):
    """Infer-mode scores and labels over a dataset, in record order."""
    scores, labels = [], []
    for x, y in batch_generator(dataset, batch_size, shuffle=False, mode="eval", prefetch=prefetch):
        scores.append(model.forward(x, "infer")[0])
        labels.append(y)
    if not scores:
        n = len(dataset.label_space)
        return np.zeros((0, n)), np.zeros((0, n))
    return np.concatenate(scores), np.concatenate(labels)


def train_epoch(model, dataset, config, opt, epoch):
    rng = np.random.default_rng([config.seed, epoch, 2])
    aug = AugmentConfig() if config.augment else AugmentConfig(probability=0.0)
    params = model.parameters()
    total, count = 0.0, 0
    for x, y in batch_generator(dataset, config.batch_size, shuffle=True, seed=config.seed,
                                epoch=epoch, mode="train", augment_config=aug,
                                prefetch=config.prefetch):
        probs, caches = model.forward(x, "train", rng)
        loss, _ = bce_smoothed_loss(probs, y, config.label_smoothing)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        dlogits = bce_logit_grad(probs, y, config.label_smoothing).astype(model.dtype)
        grads, _ = model.backward(caches, dlogits=dlogits)
        grads, _ = clip_global_norm(grads, config.clip_norm)
        adam_step(params, grads, opt)
        total += loss * len(x)
        count += len(x)
    return total / max(count, 1)


def default_validate(model, val_ds, config, warn=True):
    scores, labels = predict_dataset(model, val_ds, max(config.batch_size, 64), config.prefetch)
    loss, _ = bce_smoothed_loss(scores, labels, config.label_smoothing)
    defined = [(labels[:, k].min() != labels[:, k].max()) for k in range(labels.shape[1])]
    skipped = [val_ds.label_space.codes[k] for k, ok in enumerate(defined) if not ok]
    if skipped and warn:
        log.warning("validation AUROC undefined for %d classes; skipped: %s", len(skipped), skipped)
    return loss, macro_auroc(scores, labels)


def train(model, train_ds, val_ds, config, validate_fn=None, on_epoch=None):
    """Train in place and restore the best-validation-AUROC snapshot.

    ``validate_fn(model, epoch) -> (val_loss, val_auroc)`` replaces the default
    validation pass (used to script AUROC sequences in tests). Returns
    ``(model, TrainLog)``.
    """
    config.validate()
    opt = AdamState(lr=config.lr0, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    stopper = EarlyStopping(config.early_stop_patience)
    sched = PlateauScheduler(config.lr0, config.plateau_patience, config.plateau_factor, config.min_lr)
    tlog = TrainLog()
    best = model.snapshot()
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = opt.lr
        train_loss = train_epoch(model, train_ds, config, opt, epoch)
        if validate_fn is None:
            val_loss, val_auroc = default_validate(model, val_ds, config, warn=epoch == 1)
        else:
            val_loss, val_auroc = validate_fn(model, epoch)
        if stopper.update(val_auroc, epoch):
            best = model.snapshot()
        opt.lr = sched.step(val_loss)
        tlog.append(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                    val_macro_auroc=val_auroc, lr=lr, seconds=time.perf_counter() - t0)
        log.info("epoch %d train %.4f val %.4f auroc %.4f lr %g", epoch, train_loss, val_loss,
                 val_auroc, lr)
        if on_epoch is not None:
            on_epoch(tlog.rows[-1])
        if stopper.should_stop:
            break
    model.load_arrays(best)
    tlog.best_epoch, tlog.best_auroc = stopper.best_epoch, stopper.best
    return model, tlog


# ------------------------------------------------------ cross-validation

def cv_groups(records, k=5):
    """Group folds 1-9 into ``k`` contiguous blocks, e.g. {1,2},{3,4},{5,6},{7,8},{9}."""
    bad = [r.ecg_id for r in records if r.fold == TEST_FOLD]
    if bad:
        raise IntegrityError(f"cross-validation input contains {len(bad)} test-fold records "
                             f"(first ecg_id {bad[0]})")
    if not 2 <= k <= 9:
        raise ConfigError("k must lie in 2..9")
    fold_sets = [tuple(int(f) for f in g) for g in np.array_split(np.arange(1, 10), k)]
    return [[r for r in records if r.fold in fs] for fs in fold_sets], fold_sets


def aggregate_reports(reports):
    """Mean and sample std of every scalar metric over a list of MetricsReports."""
    out = {}
    for name in AGGREGATED:
        vals = np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in reports])
        out[name] = {"mean": float(np.nanmean(vals)),
                     "std": float(np.nanstd(vals, ddof=1)) if len(vals) > 1 else 0.0}
    return out


def cross_validate(spec, data_root, records, config, k=5, label_space=LABEL_SPACE, on_split=None):
    """Train from scratch on each CV split (seed ``config.seed + i``) and evaluate its held-out group."""
    groups, fold_sets = cv_groups(records, k)
    reports = []
    for i, held in enumerate(groups):
        rest = [r for j, g in enumerate(groups) if j != i for r in g]
        train_part = Partition("train", rest, tuple(f for j, fs in enumerate(fold_sets) if j != i for f in fs))
        val_part = Partition("val", held, fold_sets[i])
        check_patient_disjoint([train_part, val_part])
        stats = fit_standardization(train_part, lambda r: load_signal(data_root, r))
        train_ds = EcgDataset(data_root, train_part, stats, label_space)
        val_ds = EcgDataset(data_root, val_part, stats, label_space)
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed + i})
        model = build(spec, seed=cfg.seed)
        model, _ = train(model, train_ds, val_ds, cfg)
        scores, labels = predict_dataset(model, val_ds, max(cfg.batch_size, 64))
        report = evaluate_predictions(scores, labels, label_space.codes, model=spec.name,
                                      split=f"cv{i + 1}")
        reports.append(report)
        if on_split is not None:
            on_split(i, report)
    return reports, aggregate_reports(reports)


__all__ = [
    "TrainConfig", "bce_smoothed_loss", "bce_logit_grad", "AdamState", "adam_step",
    "clip_global_norm", "EarlyStopping", "PlateauScheduler", "TrainLog", "train",
    "predict_dataset", "cv_groups", "cross_validate", "aggregate_reports",
]
