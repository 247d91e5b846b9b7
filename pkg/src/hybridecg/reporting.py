"""Cross-model comparison tables and regression checks against published numbers."""

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources

from .errors import ValidationError
from .metrics import LOWER_IS_BETTER, TABLE_COLUMNS, MetricsReport

DEFAULT_TOLERANCE = 0.02


def load_anchors(path=None):
    """The transcribed reference table shipped with the package (or a file at ``path``)."""
    if path is None:
        text = resources.files("hybridecg").joinpath("paper_anchors.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


def anchor_metrics(model, anchors=None):
    anchors = anchors or load_anchors()
    try:
        row = anchors["models"][model]
    except KeyError:
        raise ValidationError(f"no anchor row for model {model!r}; known: {sorted(anchors['models'])}") from None
    return {c: row[c]["value"] for c in anchors["columns"]}


def _name(report):
    return report.model if isinstance(report, MetricsReport) else report["model"]


def _value(report, metric):
    v = getattr(report, metric) if isinstance(report, MetricsReport) else report[metric]
    return float("nan") if v is None else float(v)


def _classes(report):
    if isinstance(report, MetricsReport):
        return tuple(r["class"] for r in report.per_class) or None
    return tuple(report["classes"]) if "classes" in report else None


@dataclass
class Comparison:
    models: list
    columns: tuple
    values: dict   # (model, metric) -> value
    ranks: dict    # (model, metric) -> 1-based competition rank
    best: dict     # metric -> list of models sharing the best value
    dominance: dict  # model -> number of metrics where it is (co-)best

    def rows(self):
        return [{"model": m, **{c: self.values[m, c] for c in self.columns},
                 **{f"rank_{c}": self.ranks[m, c] for c in self.columns},
                 "n_best": self.dominance[m]} for m in self.models]


def _rank(values, lower_better):
    """Competition ranks (1224): tied values share the smaller rank; nan ranks last."""
    key = {m: (math.inf if math.isnan(v) else (v if lower_better else -v)) for m, v in values.items()}
    return {m: 1 + sum(1 for o in key.values() if o < k) for m, k in key.items()}


def compare_reports(reports, columns=TABLE_COLUMNS):
    """Per-metric ranking, best model(s) per metric and a per-model count of best placements."""
    if len(reports) < 2:
        raise ValidationError("comparison needs at least two reports")
    names = [_name(r) for r in reports]
    if len(set(names)) != len(names):
        raise ValidationError("model names must be unique within a comparison")
    spaces = {_classes(r) for r in reports} - {None}
    if len(spaces) > 1:
        raise ValidationError("reports use different class spaces")
    models = sorted(names)
    by_name = dict(zip(names, reports))
    values = {(m, c): _value(by_name[m], c) for m in models for c in columns}
    ranks, best = {}, {}
    for c in columns:
        r = _rank({m: values[m, c] for m in models}, c in LOWER_IS_BETTER)
        for m in models:
            ranks[m, c] = r[m]
        best[c] = [m for m in models if r[m] == 1]
    dominance = {m: sum(1 for c in columns if m in best[c]) for m in models}
    return Comparison(models, tuple(columns), values, ranks, best, dominance)


def write_comparison_csv(path, comparison):
    rows = comparison.rows()
    header = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def regression_against_paper(report, anchors=None, tolerance=DEFAULT_TOLERANCE, tolerances=None,
                             model=None):
    """Signed deviation of each metric from the published row, with pass/fail per tolerance.

    Optional long-run check; not meant for the blocking suite. ``tolerances``
    overrides the default per metric.
    """
    anchors = anchors or load_anchors()
    ref = anchor_metrics(model or _name(report), anchors)
    tolerances = tolerances or {}
    out = []
    for c in anchors["columns"]:
        observed = _value(report, c)
        tol = float(tolerances.get(c, tolerance))
        dev = observed - ref[c]
        out.append({"metric": c, "observed": observed, "anchor": ref[c], "deviation": dev,
                    "tolerance": tol, "passed": bool(abs(dev) <= tol + 1e-12)})
    return out


def write_deviation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["metric", "observed", "anchor", "deviation", "tolerance", "passed"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def prevalence_table(report):
    """Per-class prevalence against F1/AUROC/AUPRC, most prevalent first."""
    rows = [{k: r[k] for k in ("class", "support", "prevalence", "f1", "auroc", "auprc")}
            for r in report.per_class]
    return sorted(rows, key=lambda r: (-r["support"], r["class"]))
