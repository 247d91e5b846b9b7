"""Multi-label evaluation: threshold metrics, ranking metrics, per-class summaries.

Conventions:

* predictions are positive when ``score >= threshold`` (0.5 unless a per-class
  vector is supplied);
* precision/recall/F1/specificity with a zero denominator are 0;
* macro averages run over classes with at least one positive label; classes
  without positives are listed in ``undefined_classes``;
* AUROC uses mid-ranks for ties, AUPRC processes tied scores as one block.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import DimensionError, UndefinedMetric

log = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "hamming_loss", "macro_auroc", "macro_auprc", "macro_f1", "macro_precision",
    "macro_recall", "macro_balanced_accuracy", "micro_f1", "micro_precision",
    "micro_recall", "subset_accuracy",
)
LOWER_IS_BETTER = frozenset({"hamming_loss"})

PER_CLASS_COLUMNS = (
    "class", "support", "prevalence", "tp", "fp", "fn", "tn", "precision", "recall",
    "specificity", "f1", "balanced_accuracy", "auroc", "auprc",
)
CONFUSION_COLUMNS = ("class", "tp_rate", "fp_rate", "fn_rate", "tn_rate")


@dataclass
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray
    class_names: tuple
    thresholds: object = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.scores.ndim != 2 or self.scores.shape != self.labels.shape:
            raise DimensionError(f"scores {self.scores.shape} and labels {self.labels.shape} must match")
        if self.scores.shape[0] == 0:
            raise DimensionError("prediction set is empty")
        if len(self.class_names) != self.scores.shape[1]:
            raise DimensionError("class_names length does not match the number of columns")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")

    @property
    def predicted(self):
        return (self.scores >= np.asarray(self.thresholds, dtype=np.float64)).astype(np.int64)


def _div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def confusion_counts(labels, predicted):
    tp = (predicted & labels).sum(axis=0)
    fp = (predicted & (1 - labels)).sum(axis=0)
    fn = ((1 - predicted) & labels).sum(axis=0)
    tn = ((1 - predicted) & (1 - labels)).sum(axis=0)
    return tp, fp, fn, tn


def threshold_metrics(preds):
    """Hamming loss, subset accuracy, macro/micro/weighted P/R/F1, balanced accuracy."""
    y, p = preds.labels, preds.predicted
    tp, fp, fn, tn = confusion_counts(y, p)
    support = tp + fn
    defined = support > 0
    precision = _div(tp, tp + fp)
    recall = _div(tp, support)
    specificity = _div(tn, tn + fp)
    f1 = _div(2 * tp, 2 * tp + fp + fn)
    balanced = (recall + specificity) / 2

    def macro(v):
        return float(v[defined].mean()) if defined.any() else 0.0

    def weighted(v):
        return float((v * support).sum() / support.sum()) if support.sum() else 0.0

    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    hamming = float((y != p).mean())
    return {
        "hamming_loss": hamming,
        "label_accuracy": 1.0 - hamming,
        "subset_accuracy": float((y == p).all(axis=1).mean()),
        "macro_precision": macro(precision),
        "macro_recall": macro(recall),
        "macro_f1": macro(f1),
        "macro_balanced_accuracy": macro(balanced),
        "micro_precision": float(_div(TP, TP + FP)),
        "micro_recall": float(_div(TP, TP + FN)),
        "micro_f1": float(_div(2 * TP, 2 * TP + FP + FN)),
        "weighted_precision": weighted(precision),
        "weighted_recall": weighted(recall),
        "weighted_f1": weighted(f1),
        "per_class": {
            "tp": tp, "fp": fp, "fn": fn, "tn": tn, "support": support,
            "precision": precision, "recall": recall, "specificity": specificity,
            "f1": f1, "balanced_accuracy": balanced,
        },
    }


def average_ranks(x):
    """1-based ranks with ties given their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.r_[0, np.nonzero(np.diff(xs))[0] + 1, len(xs)]
    ranks = np.empty(len(x), dtype=np.float64)
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[lo:hi]] = (lo + hi + 1) / 2.0
    return ranks


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative")
    ranks = average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision over the descending-score sweep, tied scores entering together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def macro_ranking_metrics(preds):
    """Per-class AUROC/AUPRC plus macro means over the classes where they are defined."""
    n_classes = preds.scores.shape[1]
    per_auroc, per_auprc, undefined = [], [], []
    for k in range(n_classes):
        s, y = preds.scores[:, k], preds.labels[:, k]
        try:
            per_auroc.append(auroc(s, y))
        except UndefinedMetric:
            per_auroc.append(None)
            undefined.append(preds.class_names[k])
        try:
            per_auprc.append(auprc(s, y))
        except UndefinedMetric:
            per_auprc.append(None)
    ok_roc = [v for v in per_auroc if v is not None]
    ok_pr = [v for v in per_auprc if v is not None]
    if not ok_roc and not ok_pr:
        raise UndefinedMetric("no class has a defined AUROC or AUPRC")
    if undefined:
        log.warning("ranking metrics undefined for classes %s; excluded from macro means", undefined)
    return {
        "macro_auroc": float(np.mean(ok_roc)) if ok_roc else float("nan"),
        "macro_auprc": float(np.mean(ok_pr)) if ok_pr else float("nan"),
        "per_class_auroc": per_auroc,
        "per_class_auprc": per_auprc,
        "undefined_classes": undefined,
    }


def macro_auroc(scores, labels):
    """Mean AUROC over classes with both positives and negatives (nan if none)."""
    vals = []
    for k in range(scores.shape[1]):
        try:
            vals.append(auroc(scores[:, k], labels[:, k]))
        except UndefinedMetric:
            continue
    return float(np.mean(vals)) if vals else float("nan")


def class_confusion_summary(preds):
    """Per-class one-vs-rest confusion cells normalised by N."""
    tp, fp, fn, tn = confusion_counts(preds.labels, preds.predicted)
    n = preds.labels.shape[0]
    return [
        {"class": name, "tp_rate": tp[k] / n, "fp_rate": fp[k] / n,
         "fn_rate": fn[k] / n, "tn_rate": tn[k] / n}
        for k, name in enumerate(preds.class_names)
    ]


def prevalence_correlation(per_class_f1, per_class_prevalence):
    """Spearman rho (average ranks) and two-sided p-value from the t approximation."""
    a = np.asarray(per_class_f1, dtype=np.float64)
    b = np.asarray(per_class_prevalence, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("correlation inputs must be equal-length vectors")
    n = len(a)
    if n < 3:
        raise UndefinedMetric("Spearman correlation needs at least 3 classes")
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float((ra * ra).sum() * (rb * rb).sum()))
    if den == 0:
        raise UndefinedMetric("Spearman correlation undefined for a constant vector")
    rho = float((ra * rb).sum() / den)
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    return rho, float(2 * sps.t.sf(abs(t), n - 2))


def optimize_thresholds(val_preds):
    """Per-class threshold from the unique validation scores that maximises F1.

    Ties go to the lowest threshold. Classes without positives, or whose best
    F1 is 0, fall back to 0.5.
    """
    out = np.full(val_preds.scores.shape[1], 0.5)
    no_pos = []
    for k in range(val_preds.scores.shape[1]):
        s, y = val_preds.scores[:, k], val_preds.labels[:, k]
        n_pos = int(y.sum())
        if n_pos == 0:
            no_pos.append(val_preds.class_names[k])
            continue
        order = np.argsort(-s, kind="mergesort")
        ss, yy = s[order], y[order]
        ends = np.r_[np.nonzero(np.diff(ss))[0], len(ss) - 1]
        tp = np.cumsum(yy)[ends]
        predicted_pos = ends + 1
        f1 = 2 * tp / (predicted_pos + n_pos)
        best = f1.max()
        if best <= 0:
            continue
        # candidates run from high to low threshold: take the last maximiser
        j = np.nonzero(f1 == best)[0][-1]
        out[k] = ss[ends[j]]
    if no_pos:
        log.warning("no validation positives for %s; threshold 0.5 kept", no_pos)
    return out


# ---------------------------------------------------------------- report

@dataclass
class MetricsReport:
    model: str
    split: str
    n_samples: int
    hamming_loss: float
    label_accuracy: float
    subset_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_balanced_accuracy: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    macro_auroc: float
    macro_auprc: float
    spearman_prevalence_f1: object = None
    spearman_p_value: object = None
    undefined_classes: list = field(default_factory=list)
    per_class: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    thresholds: object = 0.5
    extra: dict = field(default_factory=dict)

    def aggregate_row(self):
        return {c: getattr(self, c) for c in TABLE_COLUMNS}

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def write(self, out_dir, stem="metrics"):
        """Write ``<stem>.json``, ``<stem>_aggregate.csv`` and ``<stem>_per_class.csv`` (+ confusion)."""
        import os

        with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
            fh.write(self.to_json())
        write_aggregate_csv(os.path.join(out_dir, f"{stem}_aggregate.csv"), [self])
        _write_rows(os.path.join(out_dir, f"{stem}_per_class.csv"), PER_CLASS_COLUMNS, self.per_class)
        _write_rows(os.path.join(out_dir, f"{stem}_confusion.csv"), CONFUSION_COLUMNS, self.confusion)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else f"{float(v):.6f}"
    return str(v)


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_aggregate_csv(path, reports, extra_columns=()):
    """One row per report in the published column order, led by the model name."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *extra_columns, *TABLE_COLUMNS])
        for r in reports:
            w.writerow([r.model, *(_fmt(r.extra.get(c)) for c in extra_columns),
                        *(_fmt(getattr(r, c)) for c in TABLE_COLUMNS)])


def evaluate_predictions(scores, labels, class_names, thresholds=0.5, model="", split=""):
    preds = PredictionSet(scores, labels, tuple(class_names), thresholds)
    thr = threshold_metrics(preds)
    rank = macro_ranking_metrics(preds)
    pc = thr.pop("per_class")
    n = preds.labels.shape[0]
    per_class = []
    for k, name in enumerate(preds.class_names):
        per_class.append({
            "class": name,
            "support": int(pc["support"][k]),
            "prevalence": pc["support"][k] / n,
            "tp": int(pc["tp"][k]), "fp": int(pc["fp"][k]),
            "fn": int(pc["fn"][k]), "tn": int(pc["tn"][k]),
            "precision": float(pc["precision"][k]), "recall": float(pc["recall"][k]),
            "specificity": float(pc["specificity"][k]), "f1": float(pc["f1"][k]),
            "balanced_accuracy": float(pc["balanced_accuracy"][k]),
            "auroc": rank["per_class_auroc"][k], "auprc": rank["per_class_auprc"][k],
        })
    defined = pc["support"] > 0
    rho = p_value = None
    try:
        rho, p_value = prevalence_correlation(pc["f1"][defined], pc["support"][defined])
    except UndefinedMetric as exc:
        log.info("prevalence/F1 correlation not reported: %s", exc)
    return MetricsReport(
        model=model, split=split, n_samples=n,
        macro_auroc=rank["macro_auroc"], macro_auprc=rank["macro_auprc"],
        spearman_prevalence_f1=rho, spearman_p_value=p_value,
        undefined_classes=rank["undefined_classes"],
        per_class=per_class,
        confusion=class_confusion_summary(preds),
        thresholds=_jsonable(np.asarray(thresholds)),
        **thr,
    )
