"""Synthetic multi-label corpus written in the PTB-XL on-disk layout.

Class ``k`` imprints an oscillation at a class-specific frequency on a
class-specific set of leads plus a short transient at a class-specific offset.
Records carrying several labels superpose the templates.
"""

import csv
import os

import numpy as np

from ..errors import ConfigError
from .ptbxl import DATABASE_CSV, STATEMENTS_CSV, SUBCLASSES
from .wfdb import write_record

FS = 100.0
N_SAMPLES = 1000
N_LEADS = 12
GAIN = 1000.0
LEADS = ("I", "II", "III", "AVR", "AVL", "AVF", "V1", "V2", "V3", "V4", "V5", "V6")


def class_frequency(k):
    return 2.0 + 1.9 * k


def class_template(k, rng, t=None):
    """One class's (N_SAMPLES, N_LEADS) imprint in mV, random phase."""
    t = np.arange(N_SAMPLES) / FS if t is None else t
    leads = np.array([(lead + k) % 3 != 0 for lead in range(N_LEADS)], dtype=float)
    phase = rng.uniform(0, 2 * np.pi)
    osc = 0.4 * np.sin(2 * np.pi * class_frequency(k) * t + phase)
    centre = (60 + 40 * k) % 900
    bump = np.exp(-0.5 * ((np.arange(N_SAMPLES) - centre) / 5.0) ** 2)
    return osc[:, None] * leads[None, :] + bump[:, None]


def synth_signal(classes, rng):
    t = np.arange(N_SAMPLES) / FS
    wander = 0.2 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    x = rng.normal(0.0, 0.05, (N_SAMPLES, N_LEADS)) + wander[:, None] * rng.uniform(0.5, 1.5, N_LEADS)
    for k in classes:
        x += class_template(k, rng, t)
    return x


def _draw_classes(rng, n_classes):
    n = min(int(rng.choice([1, 2, 3], p=[0.7, 0.25, 0.05])), n_classes)
    return sorted(rng.choice(n_classes, size=n, replace=False).tolist())


def record_filename(ecg_id):
    return f"records100/{(ecg_id // 1000) * 1000:05d}/{ecg_id:05d}_lr"


def make_synthetic(out_dir, n_records=1000, n_classes=3, seed=0):
    """Write a synthetic corpus under ``out_dir``; returns the per-record class lists.

    Folds are assigned round-robin (record i -> fold i % 10 + 1) and every record
    has its own patient id, so split sizes depend only on ``n_records``.
    """
    if not 1 <= n_classes <= len(SUBCLASSES):
        raise ConfigError(f"n_classes must lie in 1..{len(SUBCLASSES)}")
    if n_records < 1:
        raise ConfigError("n_records must be >= 1")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    codes = [f"SYN{k}" for k in range(n_classes)]
    with open(os.path.join(out_dir, STATEMENTS_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", "description", "diagnostic", "form", "rhythm", "diagnostic_class",
                    "diagnostic_subclass"])
        for k, code in enumerate(codes):
            w.writerow([code, f"synthetic class {k}", "1.0", "", "", "SYN", SUBCLASSES[k]])
        w.writerow(["SR", "sinus rhythm", "", "", "1.0", "", ""])
    assignments = []
    with open(os.path.join(out_dir, DATABASE_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ecg_id", "patient_id", "scp_codes", "strat_fold", "filename_lr", "filename_hr"])
        for i in range(n_records):
            ecg_id = i + 1
            classes = _draw_classes(rng, n_classes)
            scp = {codes[k]: 100.0 for k in classes}
            scp["SR"] = 0.0
            scp_text = "{" + ", ".join(f"'{c}': {v}" for c, v in scp.items()) + "}"
            fname = record_filename(ecg_id)
            w.writerow([ecg_id, f"{float(ecg_id)}", scp_text, i % 10 + 1, fname,
                        fname.replace("records100", "records500").replace("_lr", "_hr")])
            signal = synth_signal(classes, rng)
            raw = np.clip(np.round(signal * GAIN), -32767, 32767).astype(np.int16)
            directory = os.path.join(out_dir, os.path.dirname(fname))
            os.makedirs(directory, exist_ok=True)
            write_record(directory, os.path.basename(fname), raw, sampling_rate=FS, gain=GAIN,
                         lead_names=list(LEADS))
            assignments.append((ecg_id, classes))
    return assignments
