"""PTB-XL metadata: SCP statement table, diagnostic-subclass labels, official folds."""

import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, DataIOError, IntegrityError

log = logging.getLogger(__name__)

DATABASE_CSV = "ptbxl_database.csv"
STATEMENTS_CSV = "scp_statements.csv"

# The 23 diagnostic subclasses, in sorted order; indices are stable.
SUBCLASSES = (
    "AMI", "CLBBB", "CRBBB", "ILBBB", "IMI", "IRBBB", "ISCA", "ISCI", "ISC_", "IVCD",
    "LAFB/LPFB", "LAO/LAE", "LMI", "LVH", "NORM", "NST_", "PMI", "RAO/RAE", "RVH",
    "SEHYP", "STTC", "WPW", "_AVB",
)

TRAIN_FOLDS = tuple(range(1, 9))
VAL_FOLD = 9
TEST_FOLD = 10


@dataclass(frozen=True)
class LabelSpace:
    codes: tuple = SUBCLASSES

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise DataError("duplicate label codes")

    def __len__(self):
        return len(self.codes)

    def index(self, code):
        return self.codes.index(code)

    def prevalence(self, records):
        if not records:
            return np.zeros(len(self), dtype=np.int64)
        return np.sum([r.labels for r in records], axis=0).astype(np.int64)


LABEL_SPACE = LabelSpace()


@dataclass(frozen=True)
class Statement:
    code: str
    diagnostic: bool
    subclass: str


@dataclass
class EcgRecord:
    """Metadata for one recording; the signal is loaded lazily from ``filename``."""

    ecg_id: int
    patient_id: int
    fold: int
    filename: str
    labels: np.ndarray

    @property
    def n_labels(self):
        return int(self.labels.sum())


@dataclass
class Partition:
    """A named subset of records. Only ``role == "train"`` may feed standardisation."""

    role: str
    records: list
    folds: tuple = ()

    def __len__(self):
        return len(self.records)

    @property
    def ecg_ids(self):
        return [r.ecg_id for r in self.records]


def _open_csv(path):
    if not os.path.exists(path):
        raise DataIOError(f"required file not found: {path}")
    return open(path, newline="")


def load_statements(path):
    """``{code: Statement}`` from ``scp_statements.csv`` (first column is the code)."""
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        try:
            diag_col = header.index("diagnostic")
            sub_col = header.index("diagnostic_subclass")
        except ValueError:
            raise DataError(f"{path} lacks diagnostic/diagnostic_subclass columns") from None
        table = {}
        for row in reader:
            if not row:
                continue
            flag = row[diag_col].strip()
            diagnostic = flag not in ("", "0", "0.0", "nan", "NaN")
            table[row[0]] = Statement(row[0], diagnostic, row[sub_col].strip())
    return table


def parse_scp_codes(text):
    """Parse the stringified code->likelihood map stored in the database CSV."""
    try:
        raw = json.loads(text.replace("'", '"'))
    except json.JSONDecodeError as exc:
        raise DataError(f"cannot parse scp_codes {text!r}: {exc}") from exc
    return {str(k): float(v) for k, v in raw.items()}


def map_labels(scp_codes, statements, label_space=LABEL_SPACE, min_likelihood=0.0):
    """Binary vector over the label space; all-zero means the record is excluded."""
    y = np.zeros(len(label_space), dtype=np.uint8)
    for code, likelihood in scp_codes.items():
        st = statements.get(code)
        if st is None:
            log.warning("unknown SCP code %r skipped", code)
            continue
        if not st.diagnostic or likelihood < min_likelihood:
            continue
        if st.subclass not in label_space.codes:
            raise DataError(f"SCP code {code!r} maps to unknown subclass {st.subclass!r}")
        y[label_space.index(st.subclass)] = 1
    return y


def _int_field(value, what, ecg_id):
    try:
        return int(float(value))
    except ValueError:
        raise DataError(f"record {ecg_id}: bad {what} {value!r}") from None


def load_corpus(data_root, label_space=LABEL_SPACE):
    """Read the database and statement CSVs; returns ``(records, excluded_ids)``."""
    statements = load_statements(os.path.join(data_root, STATEMENTS_CSV))
    records, excluded = [], []
    with _open_csv(os.path.join(data_root, DATABASE_CSV)) as fh:
        reader = csv.DictReader(fh)
        needed = {"ecg_id", "patient_id", "scp_codes", "strat_fold", "filename_lr"}
        missing = needed - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{DATABASE_CSV} lacks columns {sorted(missing)}")
        for row in reader:
            ecg_id = _int_field(row["ecg_id"], "ecg_id", row["ecg_id"])
            labels = map_labels(parse_scp_codes(row["scp_codes"]), statements, label_space)
            if not labels.any():
                excluded.append(ecg_id)
                continue
            records.append(EcgRecord(
                ecg_id=ecg_id,
                patient_id=_int_field(row["patient_id"], "patient_id", ecg_id),
                fold=_int_field(row["strat_fold"], "strat_fold", ecg_id),
                filename=row["filename_lr"],
                labels=labels,
            ))
    return records, excluded


def check_patient_disjoint(partitions):
    owner = {}
    for part in partitions:
        for r in part.records:
            prev = owner.setdefault(r.patient_id, part.role)
            if prev != part.role:
                raise IntegrityError(f"patient {r.patient_id} appears in both {prev} and {part.role}")


def split_by_fold(records):
    """Official split: folds 1-8 train, 9 validation, 10 test (patient-disjoint, verified)."""
    parts = {
        "train": Partition("train", [], TRAIN_FOLDS),
        "val": Partition("val", [], (VAL_FOLD,)),
        "test": Partition("test", [], (TEST_FOLD,)),
    }
    for r in records:
        if not 1 <= r.fold <= 10:
            raise IntegrityError(f"record {r.ecg_id} has fold {r.fold} outside 1..10")
        role = "train" if r.fold <= 8 else ("val" if r.fold == VAL_FOLD else "test")
        parts[role].records.append(r)
    check_patient_disjoint(parts.values())
    return parts


def corpus_summary(records, label_space=LABEL_SPACE):
    counts = label_space.prevalence(records)
    n_labels = np.array([r.n_labels for r in records]) if records else np.zeros(0)
    split = split_by_fold(records)
    return {
        "n_records": len(records),
        "split_sizes": {k: len(v) for k, v in split.items()},
        "prevalence": {code: int(c) for code, c in zip(label_space.codes, counts)},
        "mean_labels_per_record": float(n_labels.mean()) if len(n_labels) else 0.0,
        "multi_label_fraction": float((n_labels > 1).mean()) if len(n_labels) else 0.0,
    }


def write_label_matrix(path, records, label_space=LABEL_SPACE):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ecg_id", "fold", *label_space.codes])
        for r in sorted(records, key=lambda r: r.ecg_id):
            w.writerow([r.ecg_id, r.fold, *map(int, r.labels)])


def write_prevalence_table(path, records, label_space=LABEL_SPACE):
    """Per-class record counts sorted descending (the long-tail distribution)."""
    counts = label_space.prevalence(records)
    order = sorted(range(len(label_space)), key=lambda i: (-counts[i], label_space.codes[i]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "count", "fraction"])
        n = max(len(records), 1)
        for i in order:
            w.writerow([label_space.codes[i], int(counts[i]), f"{counts[i] / n:.6f}"])
