import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from hybridecg import metrics as M
from hybridecg.errors import DimensionError, UndefinedMetric


# ---------------------------------------------------------------- hand values

def test_auroc_hand_value():
    assert M.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert M.auroc([0.5, 0.5], [0, 1]) == 0.5


def test_auprc_hand_values():
    # one positive ranked last of four: AP = 1/4
    assert M.auprc([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25
    assert M.auprc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    # a tied block enters as a whole
    assert M.auprc([0.5, 0.5], [1, 0]) == 0.5


def test_threshold_hand_values():
    preds = M.PredictionSet([[0.9, 0.2], [0.4, 0.6]], [[1, 0], [1, 0]], ("a", "b"))
    m = M.threshold_metrics(preds)
    assert m["hamming_loss"] == 0.5 and m["subset_accuracy"] == 0.5
    preds = M.PredictionSet([[0.9, 0.2], [0.6, 0.1]], [[1, 0], [1, 1]], ("a", "b"))
    m = M.threshold_metrics(preds)
    assert m["hamming_loss"] == 0.25 and m["subset_accuracy"] == 0.5
    assert m["label_accuracy"] == 0.75
    assert m["macro_recall"] == 0.5 and m["micro_precision"] == 1.0


def test_threshold_is_inclusive():
    preds = M.PredictionSet([[0.5]], [[1]], ("a",))
    assert preds.predicted[0, 0] == 1


def test_macro_skips_classes_without_support():
    preds = M.PredictionSet([[0.9, 0.9], [0.1, 0.1]], [[1, 0], [0, 0]], ("a", "b"))
    m = M.threshold_metrics(preds)
    assert m["macro_f1"] == 1.0 and m["micro_precision"] == 0.5


def test_undefined_ranking_metrics():
    with pytest.raises(UndefinedMetric):
        M.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetric):
        M.auprc([0.1, 0.2], [0, 0])
    r = M.evaluate_predictions([[0.9, 0.3], [0.2, 0.8]], [[1, 0], [0, 0]], ("a", "b"))
    assert r.undefined_classes == ["b"] and r.macro_auroc == 1.0
    assert r.per_class[1]["auroc"] is None


def test_input_validation():
    with pytest.raises(DimensionError):
        M.PredictionSet(np.zeros((3, 2)), np.zeros((3, 3)), ("a", "b"))
    with pytest.raises(DimensionError):
        M.PredictionSet(np.zeros((0, 2)), np.zeros((0, 2)), ("a", "b"))


# ---------------------------------------------------------------- brute-force oracles

def oracle_threshold(scores, labels, thr=0.5):
    n, c = len(labels), len(labels[0])
    p = [[1 if scores[i][k] >= thr else 0 for k in range(c)] for i in range(n)]
    cells = []
    for k in range(c):
        tp = sum(1 for i in range(n) if p[i][k] and labels[i][k])
        fp = sum(1 for i in range(n) if p[i][k] and not labels[i][k])
        fn = sum(1 for i in range(n) if not p[i][k] and labels[i][k])
        tn = n - tp - fp - fn
        cells.append((tp, fp, fn, tn))
    defined = [k for k in range(c) if cells[k][0] + cells[k][2] > 0]

    def safe(a, b):
        return a / b if b else 0.0

    def macro(f):
        return sum(f(*cells[k]) for k in defined) / len(defined) if defined else 0.0

    TP = sum(x[0] for x in cells)
    FP = sum(x[1] for x in cells)
    FN = sum(x[2] for x in cells)
    return {
        "hamming_loss": sum(p[i][k] != labels[i][k] for i in range(n) for k in range(c)) / (n * c),
        "subset_accuracy": sum(all(p[i][k] == labels[i][k] for k in range(c)) for i in range(n)) / n,
        "macro_precision": macro(lambda tp, fp, fn, tn: safe(tp, tp + fp)),
        "macro_recall": macro(lambda tp, fp, fn, tn: safe(tp, tp + fn)),
        "macro_f1": macro(lambda tp, fp, fn, tn: safe(2 * tp, 2 * tp + fp + fn)),
        "macro_balanced_accuracy": macro(
            lambda tp, fp, fn, tn: (safe(tp, tp + fn) + safe(tn, tn + fp)) / 2),
        "micro_precision": safe(TP, TP + FP),
        "micro_recall": safe(TP, TP + FN),
        "micro_f1": safe(2 * TP, 2 * TP + FP + FN),
    }


def oracle_auroc(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [a for a, t in zip(s, y) if not t]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def oracle_auprc(s, y):
    total = sum(y)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for a, b in zip(s, y) if a >= t and b)
        k = sum(1 for a in s if a >= t)
        ap += (tp / total - prev_recall) * tp / k
        prev_recall = tp / total
    return ap


# coarse score grid so ties are common
grid_scores = st.integers(0, 10).map(lambda v: v / 10)


@st.composite
def prediction_sets(draw, max_n=12, max_c=4):
    n = draw(st.integers(1, max_n))
    c = draw(st.integers(1, max_c))
    s = draw(arrays(np.float64, (n, c), elements=grid_scores))
    y = draw(arrays(np.int64, (n, c), elements=st.integers(0, 1)))
    return s, y


@given(prediction_sets())
def test_threshold_metrics_match_oracle(data):
    s, y = data
    got = M.threshold_metrics(M.PredictionSet(s, y, tuple("abcd"[: s.shape[1]])))
    want = oracle_threshold(s.tolist(), y.tolist())
    for k, v in want.items():
        assert got[k] == pytest.approx(v, abs=1e-12), k


@given(prediction_sets(max_n=15, max_c=1))
def test_ranking_metrics_match_oracle(data):
    s, y = data[0][:, 0], data[1][:, 0]
    assume(0 < y.sum() < len(y))
    assert abs(M.auroc(s, y) - oracle_auroc(s.tolist(), y.tolist())) <= 1e-12
    assert abs(M.auprc(s, y) - oracle_auprc(s.tolist(), y.tolist())) <= 1e-12


def test_ranking_metrics_agree_with_sklearn(rng):
    sk = pytest.importorskip("sklearn.metrics")
    for _ in range(20):
        s = np.round(rng.random(60), 1)
        y = rng.integers(0, 2, 60)
        if 0 < y.sum() < 60:
            assert abs(M.auroc(s, y) - sk.roc_auc_score(y, s)) < 1e-12
            assert abs(M.auprc(s, y) - sk.average_precision_score(y, s)) < 1e-12


@given(arrays(np.float64, st.integers(3, 15), elements=st.integers(0, 1000).map(lambda v: v / 1000)),
       st.integers(0, 2**31 - 1))
def test_auroc_invariant_under_monotone_transform(s, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    assume(0 < y.sum() < len(y))
    base = M.auroc(s, y)
    assert M.auroc(np.exp(3 * s) - 7, y) == base
    assert M.auroc(-s, y) == pytest.approx(1 - base, abs=1e-12)


@given(prediction_sets())
def test_micro_f1_is_harmonic_mean(data):
    s, y = data
    m = M.threshold_metrics(M.PredictionSet(s, y, tuple("abcd"[: s.shape[1]])))
    p, r = m["micro_precision"], m["micro_recall"]
    want = 2 * p * r / (p + r) if p + r else 0.0
    assert m["micro_f1"] == pytest.approx(want, abs=1e-12)


def test_random_scores_give_prevalence_ap():
    rng = np.random.default_rng(7)
    y = (rng.random(200_000) < 0.1).astype(int)
    s = rng.random(200_000)
    assert abs(M.auprc(s, y) - y.mean()) < 0.005
    assert abs(M.auroc(s, y) - 0.5) < 0.01


# ---------------------------------------------------------------- spearman

def test_spearman_matches_pearson_of_ranks_and_scipy(rng):
    from scipy import stats
    for _ in range(20):
        a = np.round(rng.random(12), 1)
        b = rng.integers(0, 5, 12).astype(float)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        rho, p = M.prevalence_correlation(a, b)
        ra, rb = M.average_ranks(a), M.average_ranks(b)
        assert rho == pytest.approx(np.corrcoef(ra, rb)[0, 1], abs=1e-12)
        ref = stats.spearmanr(a, b)
        assert rho == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_spearman_edge_cases():
    assert M.prevalence_correlation([1, 2, 3], [10, 20, 30]) == (1.0, 0.0)
    with pytest.raises(UndefinedMetric):
        M.prevalence_correlation([1, 2], [1, 2])
    with pytest.raises(UndefinedMetric):
        M.prevalence_correlation([1, 1, 1], [1, 2, 3])


def test_average_ranks_ties():
    np.testing.assert_array_equal(M.average_ranks([3, 1, 3, 2]), [3.5, 1, 3.5, 2])


# ---------------------------------------------------------------- threshold search

def exhaustive_best(s, y):
    best, best_t = 0.0, 0.5
    for t in sorted(set(s), reverse=True):
        p = [1 if a >= t else 0 for a in s]
        tp = sum(1 for a, b in zip(p, y) if a and b)
        f1 = 2 * tp / (sum(p) + sum(y))
        if f1 >= best and f1 > 0:
            best, best_t = f1, t
    return best_t


@given(prediction_sets(max_n=14, max_c=3))
def test_optimize_thresholds_matches_exhaustive(data):
    s, y = data
    got = M.optimize_thresholds(M.PredictionSet(s, y, tuple("abc"[: s.shape[1]])))
    for k in range(s.shape[1]):
        want = exhaustive_best(s[:, k].tolist(), y[:, k].tolist()) if y[:, k].any() else 0.5
        assert got[k] == want


def test_optimize_thresholds_fallback(caplog):
    preds = M.PredictionSet([[0.2, 0.3], [0.4, 0.1]], [[0, 0], [0, 0]], ("a", "b"))
    with caplog.at_level("WARNING"):
        np.testing.assert_array_equal(M.optimize_thresholds(preds), [0.5, 0.5])
    assert len([r for r in caplog.records if "threshold" in r.message]) == 1


# ---------------------------------------------------------------- reports

def _report(rng, n=50, c=4):
    y = rng.integers(0, 2, (n, c))
    s = np.clip(0.6 * y + rng.normal(0.2, 0.2, (n, c)), 0, 1)
    return M.evaluate_predictions(s, y, [f"c{k}" for k in range(c)], model="m", split="test")


def test_report_json_round_trip(rng):
    r = _report(rng)
    back = M.MetricsReport.from_json(r.to_json())
    assert back == r
    assert json.loads(r.to_json())["macro_auroc"] == r.macro_auroc


def test_report_files(rng, tmp_path):
    r = _report(rng)
    r.write(str(tmp_path), "x")
    with open(tmp_path / "x_aggregate.csv") as fh:
        header = next(csv.reader(fh))
    assert header[0] == "model" and set(M.TABLE_COLUMNS) <= set(header)
    with open(tmp_path / "x_per_class.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [row["class"] for row in rows] == ["c0", "c1", "c2", "c3"]
    with open(tmp_path / "x_confusion.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        total = sum(float(row[k]) for k in M.CONFUSION_COLUMNS[1:])
        assert math.isclose(total, 1.0)


def test_aggregate_csv_over_reports(rng, tmp_path):
    reports = [_report(rng) for _ in range(3)]
    for i, r in enumerate(reports):
        r.extra["seed"] = i
    M.write_aggregate_csv(str(tmp_path / "a.csv"), reports, extra_columns=("seed",))
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == 4 and rows[0][:2] == ["model", "seed"]
    assert [r[1] for r in rows[1:]] == ["0", "1", "2"]
