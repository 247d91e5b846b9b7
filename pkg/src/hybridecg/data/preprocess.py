"""Per-lead standardisation fitted on training data only, and train-time augmentation."""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError, IntegrityError


def fingerprint_ids(ids):
    h = hashlib.sha256(",".join(str(i) for i in sorted(ids)).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class StandardizationStats:
    mean: tuple
    std: tuple
    train_fingerprint: str = ""

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise DataError("mean/std length mismatch")
        if any(not s > 0 for s in self.std):
            raise DataError("standard deviation must be positive for every lead")

    @property
    def mean_array(self):
        return np.array(self.mean, dtype=np.float64)

    @property
    def std_array(self):
        return np.array(self.std, dtype=np.float64)

    def to_json(self):
        return json.dumps({"mean": list(self.mean), "std": list(self.std),
                           "train_fingerprint": self.train_fingerprint}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(tuple(d["mean"]), tuple(d["std"]), d.get("train_fingerprint", ""))


def fit_standardization(partition, load_signal):
    """Global per-lead mean/std over every sample of a *training* partition.

    ``load_signal(record)`` returns the (T, leads) signal in mV. Accumulation is
    a pairwise (Chan et al.) merge of per-record moments, in float64.
    """
    if getattr(partition, "role", None) != "train":
        raise IntegrityError("standardisation statistics may only be fitted on a training partition")
    if not partition.records:
        raise DataError("cannot fit standardisation on an empty training set")
    count = 0
    mean = None
    m2 = None
    for rec in partition.records:
        x = np.asarray(load_signal(rec), dtype=np.float64)
        n = x.shape[0]
        bm = x.mean(axis=0)
        bm2 = ((x - bm) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n, bm, bm2
            continue
        total = count + n
        delta = bm - mean
        mean = mean + delta * (n / total)
        m2 = m2 + bm2 + delta ** 2 * (count * n / total)
        count = total
    std = np.sqrt(m2 / count)
    if np.any(std <= 0):
        lead = int(np.argmin(std))
        raise DataError(f"lead {lead} has zero variance over the training set")
    return StandardizationStats(tuple(mean.tolist()), tuple(std.tolist()),
                                fingerprint_ids(partition.ecg_ids))


def apply_standardization(signal, stats):
    return ((np.asarray(signal, dtype=np.float64) - stats.mean_array) / stats.std_array).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.5
    sigma_lo: float = 0.005
    sigma_hi: float = 0.05
    scale_lo: float = 0.9
    scale_hi: float = 1.1

    def __post_init__(self):
        if self.sigma_lo < 0 or self.sigma_hi < self.sigma_lo:
            raise ConfigError(f"invalid noise range [{self.sigma_lo}, {self.sigma_hi}]")
        if self.scale_lo <= 0 or self.scale_hi < self.scale_lo:
            raise ConfigError(f"invalid scale range [{self.scale_lo}, {self.scale_hi}]")
        if not 0 <= self.probability <= 1:
            raise ConfigError(f"augmentation probability {self.probability} outside [0, 1]")


def augment(signal, config, rng, mode):
    """Gaussian noise plus one amplitude factor for all leads, with probability ``config.probability``."""
    if mode == "eval":
        return signal
    if mode != "train":
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    if rng.random() >= config.probability:
        return signal
    sigma = rng.uniform(config.sigma_lo, config.sigma_hi)
    scale = rng.uniform(config.scale_lo, config.scale_hi)
    noise = rng.standard_normal(signal.shape) * sigma
    return (signal * scale + noise).astype(signal.dtype)
