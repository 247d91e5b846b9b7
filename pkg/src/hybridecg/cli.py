"""Command-line entry point: prepare | train | evaluate | compare | gradcheck | synth | regress.

Exit codes: 0 success, 1 other failure, 2 configuration, 3 I/O, 4 data integrity,
5 numeric (including gradient-check failures), 6 file format.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data.loader import EcgDataset, load_signal
from .data.preprocess import StandardizationStats, fit_standardization
from .data.ptbxl import (
    DATABASE_CSV, LABEL_SPACE, STATEMENTS_CSV, corpus_summary, load_corpus, split_by_fold,
    write_label_matrix, write_prevalence_table,
)
from .data.synthetic import make_synthetic
from .errors import ConfigError, DataIOError, HybridEcgError, NumericError
from .gradcheck import run_suite
from .metrics import (
    MetricsReport, PredictionSet, evaluate_predictions, optimize_thresholds, write_aggregate_csv,
)
from .model import ArchitectureSpec, build, get_preset, presets, recurrent_parameter_count
from .reporting import (
    DEFAULT_TOLERANCE, compare_reports, load_anchors, prevalence_table, regression_against_paper,
    write_comparison_csv, write_deviation_csv,
)
from .training import TrainConfig, cross_validate, predict_dataset, train

log = logging.getLogger("hybridecg")

ENV_DATA_ROOT = "HYBRIDECG_DATA_ROOT"
CHECKPOINT = "checkpoint.hgc"

# flag dest -> TrainConfig field
TRAIN_FLAGS = {"epochs": "max_epochs", "batch_size": "batch_size", "seed": "seed",
               "patience": "early_stop_patience", "lr": "lr0"}
DEFAULTS = {"out": "runs", "seed": 0, "split": "test", "n_records": 1000, "n_classes": 3,
            "seeds": 20, "parallel": 1, "tolerance": DEFAULT_TOLERANCE}


# ---------------------------------------------------------------- helpers

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def corpus_fingerprint(data_root):
    h = hashlib.sha256()
    for name in (DATABASE_CSV, STATEMENTS_CSV):
        h.update(sha256_file(os.path.join(data_root, name)).encode())
    return h.hexdigest()[:16]


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


class Settings:
    """Flag values layered over a JSON config file layered over defaults (flags win)."""

    def __init__(self, args):
        self.args = args
        self.file = {}
        if getattr(args, "config", None):
            try:
                with open(args.config) as fh:
                    self.file = json.load(fh)
            except FileNotFoundError:
                raise DataIOError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
            if not isinstance(self.file, dict):
                raise ConfigError("config file must hold a JSON object")

    def get(self, name, default=None):
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        if name in self.file:
            return self.file[name]
        return DEFAULTS.get(name, default)

    def resolved(self):
        keys = set(self.file) | {k for k in vars(self.args) if k not in ("func", "config")}
        return {k: self.get(k) for k in sorted(keys)}


def provenance(settings, command, **extra):
    return {
        "command": command,
        "version": __version__,
        "seed": settings.get("seed"),
        "config": settings.resolved(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }


def out_dir(settings):
    path = settings.get("out")
    os.makedirs(path, exist_ok=True)
    return path


def data_root(settings, out=None):
    root = settings.get("data_root") or os.environ.get(ENV_DATA_ROOT)
    if settings.get("synthetic"):
        root = root or os.path.join(out or settings.get("out"), "synthetic_data")
        if not os.path.exists(os.path.join(root, DATABASE_CSV)):
            log.info("generating synthetic corpus under %s", root)
            make_synthetic(root, int(settings.get("n_records")), int(settings.get("n_classes")),
                           int(settings.get("seed")))
    if not root:
        raise ConfigError(f"no data root: pass --data-root or set {ENV_DATA_ROOT}")
    if not os.path.isdir(root):
        raise DataIOError(f"data root {root} does not exist")
    return root


def resolve_spec(settings):
    spec_path = settings.get("spec")
    if spec_path:
        try:
            with open(spec_path) as fh:
                spec = ArchitectureSpec.from_json(fh.read())
        except FileNotFoundError:
            raise DataIOError(f"spec file not found: {spec_path}") from None
    else:
        spec = get_preset(settings.get("preset") or "BiLSTM")
    if settings.get("ablate_gating"):
        spec = spec.with_gating(False)
    return spec


def train_config(settings):
    cfg = dict(settings.get("train") or {})
    for flag, name in TRAIN_FLAGS.items():
        v = settings.get(flag)
        if v is not None:
            cfg[name] = v
    return TrainConfig.from_dict(cfg)


def load_splits(root):
    records, excluded = load_corpus(root)
    return records, excluded, split_by_fold(records)


def fit_stats(root, parts):
    return fit_standardization(parts["train"], lambda r: load_signal(root, r))


# --------------------------------------------------------------- commands

def cmd_synth(settings):
    out = settings.get("out")
    assignments = make_synthetic(out, int(settings.get("n_records")), int(settings.get("n_classes")),
                                 int(settings.get("seed")))
    write_json(os.path.join(out, "synth_provenance.json"), provenance(
        settings, "synth", n_records=len(assignments), corpus_fingerprint=corpus_fingerprint(out)))
    print(f"wrote {len(assignments)} synthetic records to {out}")
    return 0


def cmd_prepare(settings):
    out = out_dir(settings)
    root = data_root(settings, out)
    records, excluded, parts = load_splits(root)
    stats = fit_stats(root, parts)
    summary = corpus_summary(records)
    summary["excluded_records"] = len(excluded)
    write_label_matrix(os.path.join(out, "label_matrix.csv"), records)
    write_prevalence_table(os.path.join(out, "prevalence.csv"), records)
    with open(os.path.join(out, "standardization.json"), "w") as fh:
        fh.write(stats.to_json())
    write_json(os.path.join(out, "split_manifest.json"),
               {role: sorted(p.ecg_ids) for role, p in parts.items()})
    write_json(os.path.join(out, "corpus_summary.json"), summary)
    write_json(os.path.join(out, "prepare_provenance.json"), provenance(
        settings, "prepare", data_root=root, corpus_fingerprint=corpus_fingerprint(root)))
    sizes = summary["split_sizes"]
    print(f"records retained: {summary['n_records']} (excluded {len(excluded)})")
    print(f"split train/val/test: {sizes['train']}/{sizes['val']}/{sizes['test']}")
    print(f"mean labels per record: {summary['mean_labels_per_record']:.4f}")
    print(f"multi-label fraction: {summary['multi_label_fraction']:.4f}")
    print("prevalence:")
    for code, n in sorted(summary["prevalence"].items(), key=lambda kv: (-kv[1], kv[0])):
        print(f"  {code:<10} {n}")
    return 0


def train_one(root, spec, cfg, stats, parts, out, split=None):
    """Train, checkpoint and (optionally) evaluate one spec; returns the report or None."""
    os.makedirs(out, exist_ok=True)
    train_ds = EcgDataset(root, parts["train"], stats)
    val_ds = EcgDataset(root, parts["val"], stats)
    model = build(spec, seed=cfg.seed)
    model, tlog = train(model, train_ds, val_ds, cfg)
    tlog.to_csv(os.path.join(out, "train_log.csv"))
    meta = {
        "standardization": json.loads(stats.to_json()),
        "train_config": cfg.to_dict(),
        "best_epoch": tlog.best_epoch,
        "best_val_macro_auroc": tlog.best_auroc,
        "corpus_fingerprint": corpus_fingerprint(root),
        "label_space": list(LABEL_SPACE.codes),
    }
    save_checkpoint(model, os.path.join(out, CHECKPOINT), meta)
    if split is None:
        return None
    return evaluate_model(model, root, parts, stats, split, out, cfg.batch_size)


def evaluate_model(model, root, parts, stats, split, out, batch_size=64, thresholds=0.5):
    ds = EcgDataset(root, parts[split], stats)
    scores, labels = predict_dataset(model, ds, max(batch_size, 64))
    report = evaluate_predictions(scores, labels, LABEL_SPACE.codes, thresholds,
                                  model=model.spec.name, split=split)
    stem = f"metrics_{split}"
    report.write(out, stem)
    _write_rows(os.path.join(out, f"{stem}_prevalence.csv"), prevalence_table(report))
    return report


def _write_rows(path, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_train(settings):
    out = out_dir(settings)
    root = data_root(settings, out)
    spec = resolve_spec(settings)
    cfg = train_config(settings)
    records, _, parts = load_splits(root)
    prov = provenance(settings, "train", spec=spec.to_dict(), train_config=cfg.to_dict(),
                      data_root=root, corpus_fingerprint=corpus_fingerprint(root))
    cv = settings.get("cv")
    if cv:
        pool = parts["train"].records + parts["val"].records
        reports, agg = cross_validate(spec, root, pool, cfg, k=int(cv))
        write_json(os.path.join(out, "cv_reports.json"), [json.loads(r.to_json()) for r in reports])
        write_json(os.path.join(out, "cv_aggregate.json"), agg)
        write_aggregate_csv(os.path.join(out, "cv_aggregate.csv"), reports)
        write_json(os.path.join(out, "train_provenance.json"), prov)
        for name in ("macro_auroc", "macro_auprc", "hamming_loss"):
            print(f"cv {name}: {agg[name]['mean']:.4f} +/- {agg[name]['std']:.4f}")
        return 0
    stats = fit_stats(root, parts)
    report = train_one(root, spec, cfg, stats, parts, out, split="val")
    write_json(os.path.join(out, "train_provenance.json"), prov)
    model = load_checkpoint(os.path.join(out, CHECKPOINT))
    print(f"trained {spec.name} (gating {'on' if spec.gating_enabled else 'off'}), "
          f"recurrent parameters {recurrent_parameter_count(model)}")
    print(f"best epoch {model.metadata['best_epoch']}, val macro AUROC {report.macro_auroc:.4f}")
    return 0


def cmd_evaluate(settings):
    out = out_dir(settings)
    ckpt = settings.get("checkpoint") or os.path.join(out, CHECKPOINT)
    expected = resolve_spec(settings) if (settings.get("spec") or settings.get("preset")) else None
    model = load_checkpoint(ckpt, expected_spec=expected)
    split = settings.get("split")
    if split not in ("val", "test"):
        raise ConfigError(f"split must be val or test, not {split!r}")
    root = data_root(settings, out)
    _, _, parts = load_splits(root)
    stats = StandardizationStats.from_json(json.dumps(model.metadata["standardization"]))
    thresholds = 0.5
    if settings.get("optimize_thresholds"):
        val_ds = EcgDataset(root, parts["val"], stats)
        scores, labels = predict_dataset(model, val_ds)
        thresholds = optimize_thresholds(PredictionSet(scores, labels, LABEL_SPACE.codes))
        write_json(os.path.join(out, "thresholds.json"), dict(zip(LABEL_SPACE.codes, thresholds)))
    report = evaluate_model(model, root, parts, stats, split, out, thresholds=thresholds)
    write_json(os.path.join(out, f"evaluate_{split}_provenance.json"), provenance(
        settings, "evaluate", checkpoint=ckpt, checkpoint_sha256=sha256_file(ckpt),
        corpus_fingerprint=corpus_fingerprint(root)))
    for k, v in report.aggregate_row().items():
        print(f"{k:<24} {v:.4f}")
    return 0


def _slug(name, gating):
    return name.replace("+", "_") + ("" if gating else "_nogating")


def _compare_job(payload):
    root, spec_json, cfg_dict, stats_json, out, split = payload
    spec = ArchitectureSpec.from_json(spec_json)
    stats = StandardizationStats.from_json(stats_json)
    _, _, parts = load_splits(root)
    report = train_one(root, spec, TrainConfig.from_dict(cfg_dict), stats, parts, out, split)
    return report.to_json()


def cmd_compare(settings):
    out = out_dir(settings)
    root = data_root(settings, out)
    cfg = train_config(settings)
    split = settings.get("split")
    names = settings.get("presets")
    names = names.split(",") if isinstance(names, str) else (names or sorted(presets()))
    _, _, parts = load_splits(root)
    stats = fit_stats(root, parts)
    jobs = []
    for name in sorted(names):
        for gating in ((True, False) if settings.get("ablate_gating") else (True,)):
            spec = get_preset(name).with_gating(gating)
            jobs.append((name, gating, (root, spec.to_json(), cfg.to_dict(), stats.to_json(),
                                        os.path.join(out, _slug(name, gating)), split)))
    results, failures = {}, {}
    parallel = int(settings.get("parallel"))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {(n, g): pool.submit(_compare_job, p) for n, g, p in jobs}
            for key, fut in futures.items():
                try:
                    results[key] = MetricsReport.from_json(fut.result())
                except Exception as exc:  # partial results are still written
                    failures[key] = exc
    else:
        for n, g, p in jobs:
            try:
                results[n, g] = MetricsReport.from_json(_compare_job(p))
            except Exception as exc:
                failures[n, g] = exc
    ordered = [results[n, g] for n, g, _ in jobs if (n, g) in results]
    for (n, g), r in results.items():
        r.extra["gating"] = "on" if g else "off"
    write_aggregate_csv(os.path.join(out, "comparison.csv"), ordered,
                        extra_columns=("gating",) if settings.get("ablate_gating") else ())
    gated = [r for (n, g), r in sorted(results.items()) if g]
    if len(gated) >= 2:
        write_comparison_csv(os.path.join(out, "comparison_ranks.csv"), compare_reports(gated))
    write_json(os.path.join(out, "compare_provenance.json"), provenance(
        settings, "compare", train_config=cfg.to_dict(), data_root=root,
        corpus_fingerprint=corpus_fingerprint(root),
        runs=[{"preset": n, "gating": g, "dir": p[4], "ok": (n, g) in results} for n, g, p in jobs],
        failures={f"{n}/{'on' if g else 'off'}": repr(e) for (n, g), e in failures.items()}))
    for r in ordered:
        print(f"{r.model:<18} gating={r.extra['gating']:<3} macro_auroc={r.macro_auroc:.4f} "
              f"hamming={r.hamming_loss:.4f}")
    if failures:
        for (n, g), e in failures.items():
            print(f"FAILED {n} (gating {'on' if g else 'off'}): {e}", file=sys.stderr)
        first = next(iter(failures.values()))
        return first.exit_code if isinstance(first, HybridEcgError) else 1
    return 0


def cmd_gradcheck(settings):
    rows = run_suite(seeds=range(int(settings.get("seeds"))), fault=settings.get("plant_fault"),
                     include_model=not settings.get("no_model"))
    failed = [label for label, _, ok in rows if not ok]
    for label, err, ok in rows:
        print(f"{label:<16} max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
    if getattr(settings.args, "out", None):
        out = out_dir(settings)
        _write_rows(os.path.join(out, "gradcheck.csv"),
                    [{"layer": l, "max_relative_error": f"{e:.6e}", "passed": ok} for l, e, ok in rows])
        write_json(os.path.join(out, "gradcheck_provenance.json"), provenance(settings, "gradcheck"))
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return NumericError.exit_code
    return 0


def cmd_regress(settings):
    path = settings.get("report")
    if not path:
        raise ConfigError("--report is required")
    try:
        with open(path) as fh:
            report = MetricsReport.from_json(fh.read())
    except FileNotFoundError:
        raise DataIOError(f"report not found: {path}") from None
    anchors = load_anchors(settings.get("anchors"))
    rows = regression_against_paper(report, anchors, float(settings.get("tolerance")),
                                    model=settings.get("preset"))
    out = out_dir(settings)
    write_deviation_csv(os.path.join(out, "deviation.csv"), rows)
    for r in rows:
        print(f"{r['metric']:<24} {r['observed']:.4f} vs {r['anchor']:.4f}  "
              f"{r['deviation']:+.4f}  {'ok' if r['passed'] else 'OUT'}")
    n_bad = sum(not r["passed"] for r in rows)
    print(f"{len(rows) - n_bad}/{len(rows)} metrics within tolerance (long-run optional check)")
    return 0


# ----------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="hybridecg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--out", help="output directory (default: runs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON file of option defaults; flags take precedence")
        sp.add_argument("--log-level", help="DEBUG, INFO (default), WARNING or ERROR")
        if data:
            sp.add_argument("--data-root", help=f"PTB-XL root (default: ${ENV_DATA_ROOT})")
            sp.add_argument("--synthetic", action="store_true", default=None,
                            help="generate and use a synthetic corpus if the root is empty")
            sp.add_argument("--n-records", type=int)
            sp.add_argument("--n-classes", type=int)

    def model_opts(sp):
        sp.add_argument("--preset", choices=sorted(presets()))
        sp.add_argument("--spec", help="architecture spec JSON file")
        sp.add_argument("--ablate-gating", action="store_true", default=None)

    def train_opts(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--lr", type=float)

    sp = sub.add_parser("prepare", help="parse the corpus and write caches and the summary")
    common(sp)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train one architecture")
    common(sp)
    model_opts(sp)
    train_opts(sp)
    sp.add_argument("--cv", type=int, help="run k-fold cross-validation over folds 1-9 instead")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    common(sp)
    model_opts(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", choices=("val", "test"))
    sp.add_argument("--optimize-thresholds", action="store_true", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="train and evaluate every preset")
    common(sp)
    train_opts(sp)
    sp.add_argument("--presets", help="comma-separated subset (default: all six)")
    sp.add_argument("--ablate-gating", action="store_true", default=None)
    sp.add_argument("--parallel", type=int, help="worker processes (default 1, deterministic)")
    sp.add_argument("--split", choices=("val", "test"))
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    common(sp, data=False)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--plant-fault", help="layer kind whose gradient is deliberately scaled")
    sp.add_argument("--no-model", action="store_true", default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a synthetic corpus in the PTB-XL layout")
    common(sp, data=False)
    sp.add_argument("--n-records", type=int)
    sp.add_argument("--n-classes", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("regress", help="compare a metrics JSON against the published table")
    common(sp, data=False)
    sp.add_argument("--report", help="metrics JSON written by evaluate")
    sp.add_argument("--preset", help="anchor row to use (default: the report's model)")
    sp.add_argument("--anchors", help="alternative anchors JSON")
    sp.add_argument("--tolerance", type=float)
    sp.set_defaults(func=cmd_regress)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level or "INFO").upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(Settings(args))
    except HybridEcgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
