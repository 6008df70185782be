"""
Benchmarks, Activation Dumps and HE Parameter Tables

bench: train the first K batches of one epoch and extrapolate the epoch's
time and traffic from their mean (K = 10 by default; the full MIT-BIH
split has N = 3311 batches of 4).

dump-activations: one row of raw input (128 steps) and one row per
split-layer channel (8 x 32 steps) for each requested sample. Rows share
one fixed header; activation rows leave v32..v127 empty.
"""

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd

from ckks import MAX_MODULUS_BITS, chain_primes
from config import HE_PRESETS, Config
from dataset import WINDOW, num_batches
from engines import ClientEngine, run_split_pair
from errors import UsageError

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ['mode', 'poly_modulus', 'batches', 'num_batches', 'mean_batch_seconds',
                 'mean_bytes_out', 'mean_bytes_in', 'mean_batch_bytes',
                 'epoch_seconds', 'epoch_bytes']
DUMP_COLUMNS = ['sample', 'label', 'series', 'channel', 'length'] + [f'v{i}' for i in range(WINDOW)]


@dataclass
class BenchReport:
    mode: str
    poly_modulus: int
    batches: int
    num_batches: int
    mean_batch_seconds: float
    mean_bytes_out: float
    mean_bytes_in: float
    mean_batch_bytes: float
    epoch_seconds: float
    epoch_bytes: float

    def to_frame(self):
        return pd.DataFrame([asdict(self)], columns=BENCH_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def summarize_batches(records, mode, poly_modulus, total):
    """Mean per-batch cost over `records` scaled up to `total` batches."""
    if not records:
        raise UsageError('batches', "bench needs at least one batch")
    seconds = float(np.mean([r.seconds for r in records]))
    out = float(np.mean([r.bytes_out for r in records]))
    inc = float(np.mean([r.bytes_in for r in records]))
    return BenchReport(mode, poly_modulus, len(records), total, seconds, out, inc, out + inc,
                       seconds * total, (out + inc) * total)


def run_bench(config, train, batches=Config.BENCH_BATCHES, connection=None, context=None,
              timeout=None):
    """
    Time the first `batches` batches of epoch 1.

    Args:
        config: TrainConfig; epochs is forced to 1
        train: training Dataset (defines N)
        connection: client Connection to a remote server; both roles run
            in-process when omitted
        context: PrivateContext to reuse (encrypted mode)

    Returns:
        BenchReport
    """
    if batches < 1:
        raise UsageError('batches', "must be >= 1")
    cfg = replace(config, epochs=1)
    total = num_batches(train, cfg.batch_size)
    count = min(batches, total)
    if connection is None:
        client = run_split_pair(cfg, train, context=context, timeout=timeout,
                                max_batches=count, evaluate=False).client
    else:
        client = ClientEngine(connection, cfg, train, context=context)
        client.run(max_batches=count, evaluate=False)

    poly_modulus = cfg.he.poly_modulus if cfg.encrypted else 0
    report = summarize_batches(client.batch_log, cfg.mode, poly_modulus, total)
    logger.info("Bench (%s, %d batches): %.3fs and %.0f bytes per batch; "
                "epoch of %d batches ~ %.1fs, %.0f bytes",
                report.mode, report.batches, report.mean_batch_seconds, report.mean_batch_bytes,
                total, report.epoch_seconds, report.epoch_bytes)
    return report


# ============================================================================
# ACTIVATION DUMP
# ============================================================================

def _row(sample, label, series, channel, values):
    padded = [np.nan] * WINDOW
    padded[:len(values)] = [float(v) for v in values]
    return [sample, label, series, channel, len(values)] + padded


def dump_activations(client_model, dataset, indices):
    """
    Raw inputs beside the client's split-layer feature maps.

    Returns:
        DataFrame with DUMP_COLUMNS; per sample one 'input' row then one
        'activation' row per channel
    """
    indices = [int(i) for i in indices]
    if not indices:
        raise UsageError('indices', "no sample indices given")
    for i in indices:
        if not 0 <= i < len(dataset):
            raise UsageError('indices', f"sample {i} outside 0..{len(dataset) - 1}")

    x = dataset.samples[indices]
    maps = client_model.feature_maps(x)
    rows = []
    for k, i in enumerate(indices):
        label = int(dataset.labels[i])
        rows.append(_row(i, label, 'input', 0, x[k, 0]))
        for channel in range(maps.shape[1]):
            rows.append(_row(i, label, 'activation', channel, maps[k, channel]))
    return pd.DataFrame(rows, columns=DUMP_COLUMNS)


def write_dump(frame, path):
    frame.to_csv(path, index=False, float_format='%.9g')
    logger.info("Activation dump written: %s (%d rows)", path, len(frame))


def read_dump(path):
    return pd.read_csv(path)


# ============================================================================
# PARAMETER TABLE
# ============================================================================

def he_params_table():
    """One row per preset: primes, slot capacity and the security margin."""
    rows = []
    for name, params in HE_PRESETS.items():
        primes = chain_primes(params.poly_modulus, params.coeff_mod_bits)
        total = sum(params.coeff_mod_bits)
        rows.append({
            'preset': name,
            'poly_modulus': params.poly_modulus,
            'coeff_mod_bits': '-'.join(str(b) for b in params.coeff_mod_bits),
            'scale_bits': params.scale_bits,
            'primes': ' '.join(str(p) for p in primes),
            'slot_capacity': params.slot_capacity,
            'modulus_bits': total,
            'within_128_bit_bound': total < MAX_MODULUS_BITS[params.poly_modulus],
        })
    return pd.DataFrame(rows)
