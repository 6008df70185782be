"""
Heartbeat Datasets

- load_mitbih(): the converted MIT-BIH heartbeat file
- synth_ecg(): five separable synthetic beat shapes for desk-scale runs
- batches(): deterministic shuffled mini-batches, partial batch dropped

On-disk format: CSV, one header line, 129 columns per row: 128 sample
values (binary32-representable) followed by the integer label 0..4 for the
classes N, L, R, A, V. The first half of the rows is the training split
and the second half the test split; row order is preserved.
"""

import logging
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import DatasetParseError, UsageError

logger = logging.getLogger(__name__)

CLASSES = ('N', 'L', 'R', 'A', 'V')
WINDOW = 128
COLUMNS = [f'x{i}' for i in range(WINDOW)] + ['label']


@dataclass
class Dataset:
    """
    Heartbeat windows with labels.

    Attributes:
        samples: float32 [count, 1, 128]
        labels: int64 [count], values in 0..4
        split: 'train' or 'test'
    """
    samples: np.ndarray
    labels: np.ndarray
    split: str = 'train'

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[1:] != (1, WINDOW):
            raise UsageError('samples', f"expected [count, 1, {WINDOW}], got {list(self.samples.shape)}")
        if self.labels.shape != (self.samples.shape[0],):
            raise UsageError('labels', f"{self.labels.shape[0]} labels for {self.samples.shape[0]} samples")

    def __len__(self):
        return int(self.labels.shape[0])

    def stats(self):
        """Min/max of the stored values plus the per-class counts."""
        counts = np.bincount(self.labels, minlength=len(CLASSES))
        return {
            'count': len(self),
            'min': float(self.samples.min()) if len(self) else 0.0,
            'max': float(self.samples.max()) if len(self) else 0.0,
            'per_class': {name: int(c) for name, c in zip(CLASSES, counts)},
        }

    def subset(self, count):
        """First `count` samples, keeping file order."""
        if count < 1 or count > len(self):
            raise UsageError('count', f"subset size {count} outside 1..{len(self)}")
        return Dataset(self.samples[:count], self.labels[:count], self.split)


def split_halves(samples, labels):
    half = len(labels) // 2
    return (Dataset(samples[:half], labels[:half], 'train'),
            Dataset(samples[half:], labels[half:], 'test'))


# ============================================================================
# CSV
# ============================================================================

def _parser_row(error):
    match = re.search(r'line (\d+)', str(error))
    # the header is line 1, so data row k is line k + 2
    return int(match.group(1)) - 2 if match else -1


def read_csv(path):
    """
    Parse one CSV file into (samples [count, 1, 128], labels [count]).

    Raises DatasetParseError naming the first bad data row (0-based).
    """
    try:
        frame = pd.read_csv(path, header=0, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise UsageError('data', f"dataset file not found: {path}")
    except pd.errors.EmptyDataError:
        raise DatasetParseError(0, "file is empty")
    except pd.errors.ParserError as e:
        raise DatasetParseError(_parser_row(e), str(e).strip())

    if frame.shape[1] != len(COLUMNS):
        raise DatasetParseError(0, f"header has {frame.shape[1]} columns, expected {len(COLUMNS)}")

    numeric = frame.apply(pd.to_numeric, errors='coerce')
    bad = numeric.isna().any(axis=1).to_numpy()
    values = numeric.to_numpy(dtype=np.float64)
    if bad.any():
        row = int(np.argmax(bad))
        filled = int(sum(isinstance(v, str) and v != '' for v in frame.iloc[row]))
        raise DatasetParseError(row, f"expected {WINDOW} numeric values and a label, got {filled} fields")
    if not np.all(np.isfinite(values)):
        row = int(np.argmax(~np.isfinite(values).all(axis=1)))
        raise DatasetParseError(row, "non-finite sample value")

    raw_labels = values[:, -1]
    invalid = (raw_labels != np.round(raw_labels)) | (raw_labels < 0) | (raw_labels >= len(CLASSES))
    if invalid.any():
        row = int(np.argmax(invalid))
        raise DatasetParseError(row, f"label {raw_labels[row]} is not one of 0..{len(CLASSES) - 1}")

    samples = values[:, :WINDOW].astype(np.float32).reshape(-1, 1, WINDOW)
    return samples, raw_labels.astype(np.int64)


def load_mitbih(path):
    """
    Load the converted MIT-BIH file and split it in half.

    The full conversion gives 13,245 training and 13,245 test windows.

    Returns:
        tuple: (train Dataset, test Dataset)
    """
    samples, labels = read_csv(path)
    train, test = split_halves(samples, labels)
    logger.info("Loaded %s: %d train / %d test windows, values in [%.4f, %.4f]",
                path, len(train), len(test), float(samples.min()), float(samples.max()))
    return train, test


def to_csv(dataset, path):
    """Write a Dataset in the on-disk schema (header + 129 columns)."""
    frame = pd.DataFrame(dataset.samples.reshape(len(dataset), WINDOW).astype(np.float32),
                         columns=COLUMNS[:-1])
    frame['label'] = dataset.labels.astype(np.int64)
    frame.to_csv(path, index=False, float_format='%.9g')


# ============================================================================
# SYNTHETIC BEATS
# ============================================================================

def _bump(t, center, width, height):
    return height * np.exp(-0.5 * ((t - center) / width) ** 2)


def _beat(label, t, rng):
    """One clean beat of class `label` with random amplitude and timing jitter."""
    shift = rng.uniform(-0.015, 0.015)
    amp = rng.uniform(0.9, 1.1)
    c = 0.5 + shift
    if label == 0:    # N: P wave, narrow QRS, T wave
        wave = _bump(t, c - 0.2, 0.03, 0.15) + _bump(t, c, 0.012, 1.0) + _bump(t, c + 0.22, 0.05, 0.3)
    elif label == 1:  # L: wide notched QRS, inverted T
        wave = _bump(t, c - 0.02, 0.03, 0.7) + _bump(t, c + 0.03, 0.03, 0.8) - _bump(t, c + 0.25, 0.05, 0.25)
    elif label == 2:  # R: rsR' double peak
        wave = _bump(t, c - 0.2, 0.03, 0.15) + _bump(t, c - 0.015, 0.01, 0.6) \
            - _bump(t, c + 0.01, 0.01, 0.3) + _bump(t, c + 0.04, 0.012, 0.9)
    elif label == 3:  # A: premature beat, no distinct P wave
        wave = _bump(t, c - 0.15, 0.012, 1.0) + _bump(t, c + 0.07, 0.05, 0.3)
    else:             # V: wide, tall, opposite-polarity T
        wave = _bump(t, c, 0.06, 1.3) - _bump(t, c + 0.25, 0.07, 0.5)
    return amp * wave


def synth_ecg(count, seed=0, noise=0.05):
    """
    `count` synthetic beats, labels cycling 0..4 (balanced), 128 steps each.

    Classes differ in pulse shape; jitter and white noise make them
    non-trivial but linearly separable.
    """
    if count < len(CLASSES):
        raise UsageError('count', f"need at least {len(CLASSES)} samples, got {count}")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, WINDOW)
    labels = np.arange(count, dtype=np.int64) % len(CLASSES)
    beats = np.stack([_beat(int(label), t, rng) for label in labels])
    beats += rng.normal(0.0, noise, size=beats.shape)
    return Dataset(beats.astype(np.float32).reshape(count, 1, WINDOW), labels)


def load_dataset(source):
    """
    Resolve a --data value.

    'synth:<count>:<seed>' gives <count> training and <count> test beats;
    anything else is a path to the converted CSV.
    """
    source = str(source)
    if source.startswith('synth:'):
        parts = source.split(':')
        if len(parts) != 3 or not parts[1].isdigit() or not parts[2].isdigit():
            raise UsageError('data', f"expected synth:<count>:<seed>, got '{source}'")
        count, seed = int(parts[1]), int(parts[2])
        full = synth_ecg(2 * count, seed)
        return split_halves(full.samples, full.labels)
    return load_mitbih(source)


# ============================================================================
# BATCHING
# ============================================================================

def num_batches(dataset, batch_size):
    """N = floor(count / n)."""
    if batch_size < 1:
        raise UsageError('batch_size', "must be >= 1")
    return len(dataset) // batch_size


def batches(dataset, batch_size, seed, epoch=0):
    """
    Yield (x [n, 1, 128], y [n]) for one epoch.

    The order is a permutation drawn from (seed, epoch); the final partial
    batch is dropped so every party sees exactly N batches.
    """
    count = num_batches(dataset, batch_size)
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for i in range(count):
        idx = order[i * batch_size:(i + 1) * batch_size]
        yield dataset.samples[idx], dataset.labels[idx]
