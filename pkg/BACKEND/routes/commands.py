"""
Command Handlers for the SplitHE CLI

One handler per subcommand; app.py parses the arguments and dispatches
here with (args, app_config). Handlers return the process exit code.

- train-local:      unsplit baseline
- train-split:      both roles over a socket pair, or the client role with --connect
- server / client:  one role each over TCP
- eval:             accuracy of saved client + server checkpoints
- bench:            first K batches, extrapolated to an epoch
- dump-activations: raw inputs beside split-layer feature maps
- params:           the HE presets with their primes
"""

import logging
import os

from bench import dump_activations, he_params_table, run_bench, write_dump
from config import load_train_config
from dataset import load_dataset
from engines import ClientEngine, LocalTrainer, ServerEngine, evaluate_model, run_split_pair, write_metrics_csv
from network import ClientModel, LocalModel, ModelSpec
from wire import connect, listen

logger = logging.getLogger(__name__)

CLIENT_CHECKPOINT = 'client.ckpt'
SERVER_CHECKPOINT = 'server.ckpt'


# ============================================================================
# SHARED HELPERS
# ============================================================================

def _train_config(args, app_config):
    cfg = load_train_config(args.config, app_config)
    overrides = {name: getattr(args, name, None) for name in ('epochs', 'seed', 'batch_size', 'eta')}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        data = cfg.to_dict()
        data.update(overrides)
        cfg = type(cfg).from_dict(data, app_config)
    return cfg


def _datasets(args, app_config):
    train, test = load_dataset(args.data or app_config.DATA_PATH)
    if args.subset is not None:
        train = train.subset(min(args.subset, len(train)))
        test = test.subset(min(args.subset, len(test)))
    logger.info("Train %s", train.stats())
    return train, test


def _out_dir(args, app_config):
    path = args.out or app_config.OUT_DIR
    os.makedirs(path, exist_ok=True)
    return path


def _address(value, app_config):
    return value or f"{app_config.HOST}:{app_config.PORT}"


def _report(metrics):
    for m in metrics:
        line = f"epoch {m.epoch}: loss={m.loss:.4f} seconds={m.seconds:.1f} " \
               f"bytes_out={m.bytes_out} bytes_in={m.bytes_in}"
        if m.accuracy is not None:
            line += f" accuracy={m.accuracy:.4f}"
        print(line)


# ============================================================================
# TRAINING
# ============================================================================

def train_local(args, app_config):
    cfg = _train_config(args, app_config)
    train, test = _datasets(args, app_config)
    out = _out_dir(args, app_config)
    trainer = LocalTrainer(cfg)
    metrics = trainer.train(train, test)
    write_metrics_csv(metrics, os.path.join(out, 'metrics_local.csv'))
    trainer.model.save(os.path.join(out, CLIENT_CHECKPOINT), os.path.join(out, SERVER_CHECKPOINT))
    _report(metrics)
    return 0


def _finish_client(client, metrics, out, name):
    write_metrics_csv(metrics, os.path.join(out, f'metrics_{name}.csv'))
    client.transcript.to_csv(os.path.join(out, f'transcript_{name}.csv'))
    client.model.save(os.path.join(out, CLIENT_CHECKPOINT))
    _report(metrics)


def train_split(args, app_config):
    if args.connect:
        return client(args, app_config)
    cfg = _train_config(args, app_config)
    train, test = _datasets(args, app_config)
    out = _out_dir(args, app_config)
    run = run_split_pair(cfg, train, test, timeout=app_config.SOCKET_TIMEOUT,
                         checkpoint=os.path.join(out, SERVER_CHECKPOINT))
    _finish_client(run.client, run.metrics, out, f'split_{cfg.mode}')
    return 0


def server(args, app_config):
    cfg = _train_config(args, app_config) if args.config else None
    out = _out_dir(args, app_config)
    connection = listen(_address(args.listen, app_config), app_config.SOCKET_TIMEOUT)
    engine = ServerEngine(connection, cfg, checkpoint=os.path.join(out, SERVER_CHECKPOINT))
    try:
        metrics = engine.run()
    finally:
        connection.close()
    write_metrics_csv(metrics, os.path.join(out, 'metrics_server.csv'))
    connection.transcript.to_csv(os.path.join(out, 'transcript_server.csv'))
    return 0


def client(args, app_config):
    cfg = _train_config(args, app_config)
    train, test = _datasets(args, app_config)
    out = _out_dir(args, app_config)
    connection = connect(_address(args.connect, app_config), app_config.SOCKET_TIMEOUT)
    engine = ClientEngine(connection, cfg, train, test)
    try:
        metrics = engine.run()
    finally:
        connection.close()
    _finish_client(engine, metrics, out, f'client_{cfg.mode}')
    return 0


# ============================================================================
# EVALUATION AND TOOLS
# ============================================================================

def evaluate(args, app_config):
    _, test = _datasets(args, app_config)
    model = LocalModel.from_spec(ModelSpec.m1(), seed=0)
    model.load(args.client_checkpoint, args.server_checkpoint)
    acc = evaluate_model(model, test)
    logger.info("Accuracy of %s + %s: %.4f", args.client_checkpoint, args.server_checkpoint, acc)
    print(f"accuracy={acc:.4f}")
    return 0


def bench(args, app_config):
    cfg = _train_config(args, app_config)
    train, _ = _datasets(args, app_config)
    out = _out_dir(args, app_config)
    connection = connect(args.connect, app_config.SOCKET_TIMEOUT) if args.connect else None
    try:
        report = run_bench(cfg, train, args.batches or app_config.BENCH_BATCHES,
                           connection=connection, timeout=app_config.SOCKET_TIMEOUT)
    finally:
        if connection is not None:
            connection.close()
    report.to_csv(os.path.join(out, f'bench_{cfg.mode}.csv'))
    print(report.to_frame().to_string(index=False))
    return 0


def activations(args, app_config):
    train, test = _datasets(args, app_config)
    out = _out_dir(args, app_config)
    model = ClientModel.from_spec(ModelSpec.m1(), seed=args.seed or 0, zero_init=args.zero_init)
    if args.checkpoint:
        model.load(args.checkpoint)
    dataset = test if args.split == 'test' else train
    frame = dump_activations(model, dataset, args.indices)
    write_dump(frame, os.path.join(out, 'activations.csv'))
    return 0


def params(args, app_config):
    print(he_params_table().to_string(index=False))
    return 0
