"""Lazy record loading and the epoch batch generator."""

import os
import queue
import threading

import numpy as np

from ..errors import ConfigError, DataError, DataIOError
from .preprocess import AugmentConfig, apply_standardization, augment
from .ptbxl import LABEL_SPACE
from .wfdb import read_record

N_LEADS = 12


def load_signal(data_root, record):
    """Signal of one record in mV, shape (n_samples, 12), float64."""
    stem = os.path.join(data_root, record.filename)
    try:
        header, signal = read_record(stem)
    except FileNotFoundError as exc:
        raise DataIOError(f"signal files for ecg_id {record.ecg_id} not found at {stem}") from exc
    if header.n_signals != N_LEADS:
        raise DataError(f"ecg_id {record.ecg_id}: expected {N_LEADS} leads, found {header.n_signals}")
    return signal


class EcgDataset:
    """A partition bound to its data root and frozen standardisation statistics."""

    def __init__(self, data_root, partition, stats, label_space=LABEL_SPACE):
        self.data_root = data_root
        self.partition = partition
        self.stats = stats
        self.label_space = label_space

    @property
    def records(self):
        return self.partition.records

    def __len__(self):
        return len(self.partition.records)

    def load(self, record):
        return apply_standardization(load_signal(self.data_root, record), self.stats)

    def labels(self):
        if not self.records:
            return np.zeros((0, len(self.label_space)), dtype=np.float32)
        return np.stack([r.labels for r in self.records]).astype(np.float32)


def epoch_order(n, shuffle, seed, epoch):
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_generator(dataset, batch_size, shuffle=False, seed=0, epoch=0, mode="eval",
                    augment_config=None, prefetch=0):
    """Yield ``(X, Y)`` batches covering every record once; the last batch may be short.

    Signals are read from disk batch by batch. Shuffling and augmentation are
    seeded from ``(seed, epoch)`` so background prefetching cannot change results.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    gen = _batches(dataset, batch_size, shuffle, seed, epoch, mode, augment_config or AugmentConfig())
    if prefetch > 0:
        return _prefetched(gen, prefetch)
    return gen


def _batches(dataset, batch_size, shuffle, seed, epoch, mode, aug):
    records = dataset.records
    order = epoch_order(len(records), shuffle, seed, epoch)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    n_classes = len(dataset.label_space)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = np.empty((len(idx), 0, N_LEADS), dtype=np.float32)
        y = np.empty((len(idx), n_classes), dtype=np.float32)
        for j, i in enumerate(idx):
            rec = records[i]
            sig = augment(dataset.load(rec), aug, aug_rng, "train" if mode == "train" else "eval")
            if j == 0:
                x = np.empty((len(idx),) + sig.shape, dtype=np.float32)
            x[j] = sig
            y[j] = rec.labels
        yield x, y


def _prefetched(gen, depth):
    q = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
