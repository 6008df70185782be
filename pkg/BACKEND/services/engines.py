"""
Training Engines for Local and Split Learning

- LocalTrainer: the unsplit network; the accuracy baseline and the oracle
  split runs are compared against
- ClientEngine: the data owner. Holds x, y, the convolutional layers and
  the softmax/loss (U-shaped split) and, in encrypted mode, the secret key
- ServerEngine: holds the Linear layer only. In encrypted mode it receives
  a public context and evaluates its layer on ciphertexts
- run_split_pair: both roles in one process over a socket pair

Every update happens in the same order in all three, so a plaintext split
run with the same seed and optimizers reproduces the local run bit for bit:
    server: grad_w, grad_b, grad_a (pre-update weights) -> server step
    client: backward from grad_a -> client step
"""

import logging
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from ckks import CipherVector, keygen
from config import Config
from dataset import batches, num_batches
from errors import DimensionError, DivergenceError, TransportError, UsageError
from events import MessageType
from extensions import progress
from layers import linear_forward, softmax_cross_entropy
from network import ClientModel, LocalModel, ModelSpec, ServerModel
from optimizers import make_optimizer
from wire import decode_json, decode_tensor, socket_pair, synchronize

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['epoch', 'loss', 'seconds', 'bytes_out', 'bytes_in', 'accuracy']


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    seconds: float
    bytes_out: int = 0
    bytes_in: int = 0
    accuracy: float = None


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    loss: float
    seconds: float
    bytes_out: int
    bytes_in: int


def write_metrics_csv(metrics, path):
    pd.DataFrame([asdict(m) for m in metrics], columns=METRIC_COLUMNS).to_csv(path, index=False)
    logger.info("Metrics written: %s", path)


def accuracy(predictions, labels):
    """
    Fraction of correct predictions.

    Args:
        predictions: class indices [count] or scores [count, classes]
        labels: true classes [count]
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UsageError('test', "cannot evaluate on an empty test set")
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    if predictions.shape != labels.shape:
        raise DimensionError('predictions', labels.shape, predictions.shape, 'accuracy')
    return float(np.mean(predictions == labels))


def _chunks(dataset, size):
    if len(dataset) == 0:
        raise UsageError('test', "cannot evaluate on an empty test set")
    for start in range(0, len(dataset), size):
        yield dataset.samples[start:start + size], dataset.labels[start:start + size]


def _check_loss(loss, epoch, batch):
    if not np.isfinite(loss):
        raise DivergenceError(epoch, batch, loss)


def evaluate_model(model, dataset, chunk=Config.EVAL_BATCH_SIZE):
    """Plaintext accuracy of a LocalModel (or client + server halves) on `dataset`."""
    logits = [model.logits(x) for x, _ in _chunks(dataset, chunk)]
    return accuracy(np.concatenate(logits), dataset.labels)


# ============================================================================
# LOCAL TRAINING
# ============================================================================

class LocalTrainer:
    """Trains the unsplit network with the client's and server's optimizers."""

    def __init__(self, config, spec=None):
        self.config = config
        self.spec = spec or ModelSpec.m1()
        self.model = LocalModel.from_spec(self.spec, config.seed)
        self.client_optimizer = make_optimizer(config.client_optimizer,
                                               self.model.client.layer_params, config.eta)
        self.server_optimizer = make_optimizer(config.server_optimizer,
                                               self.model.server.layer_params, config.eta)
        self.losses = []

    def train_batch(self, x, y, epoch=0, batch=0):
        a = self.model.client.forward(x)
        logits = self.model.server.forward(a)
        _, loss, grad = softmax_cross_entropy(logits, y)
        _check_loss(loss, epoch, batch)
        grad_a = self.model.server.backward(grad)
        self.server_optimizer.step()
        self.model.client.backward(grad_a)
        self.client_optimizer.step()
        self.losses.append(loss)
        return loss

    def train(self, train, test=None, max_batches=None, on_batch=None):
        """
        Run every epoch, then (with a test set) record the final accuracy.

        Returns:
            list[EpochMetrics]
        """
        cfg = self.config
        total = num_batches(train, cfg.batch_size)
        if total < 1:
            raise UsageError('batch_size', f"{cfg.batch_size} exceeds the {len(train)} training samples")
        metrics = []
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            losses = []
            stream = batches(train, cfg.batch_size, cfg.seed, epoch)
            for b, (x, y) in enumerate(progress(stream, total=total, desc=f"epoch {epoch + 1}/{cfg.epochs}")):
                if max_batches is not None and b >= max_batches:
                    break
                losses.append(self.train_batch(x, y, epoch + 1, b))
                if on_batch:
                    on_batch(epoch, b, losses[-1])
            m = EpochMetrics(epoch + 1, float(np.mean(losses)), time.perf_counter() - start)
            metrics.append(m)
            logger.info("Epoch %d/%d: loss=%.4f (%.1fs)", m.epoch, cfg.epochs, m.loss, m.seconds)
        if test is not None:
            metrics[-1].accuracy = self.evaluate(test)
            logger.info("Test accuracy: %.4f", metrics[-1].accuracy)
        return metrics

    def evaluate(self, dataset):
        return evaluate_model(self.model, dataset)


# ============================================================================
# CLIENT
# ============================================================================

class ClientEngine:
    """
    Data-owner side of split training.

    Only activations (plain or encrypted) and loss gradients leave this
    object; samples and labels are never serialized.
    """

    def __init__(self, connection, config, train, test=None, spec=None, context=None):
        self.connection = connection
        self.spec = spec or ModelSpec.m1()
        total = num_batches(train, config.batch_size)
        if total < 1:
            raise UsageError('batch_size', f"{config.batch_size} exceeds the {len(train)} training samples")
        self.config = config.with_batches(total)
        self.train_set = train
        self.test_set = test
        self.model = ClientModel.from_spec(self.spec, config.seed)
        self.optimizer = make_optimizer(config.client_optimizer, self.model.layer_params, config.eta)
        self.context = context
        self.batch_log = []
        self.losses = []

    @property
    def transcript(self):
        return self.connection.transcript

    def handshake(self):
        synchronize(self.connection, self.config)
        if self.config.encrypted:
            if self.context is None:
                _, self.context = keygen(self.config.he)
            self.connection.send_context(self.context.public())
            logger.info("Public context sent (%d slots)", self.context.slot_capacity)

    def _split_forward(self, a, plain_type, enc_type, encrypted):
        conn = self.connection
        if encrypted:
            conn.send_cipher(enc_type, self.context.encrypt(a))
            return self.context.decrypt(conn.recv_cipher(MessageType.OUT_ENC)).astype(np.float32)
        conn.send_tensor(plain_type, a)
        return conn.recv_tensor(MessageType.OUT_PLAIN)

    def train_batch(self, x, y, epoch=0, batch=0):
        """One round trip of the per-batch protocol; returns the loss."""
        encrypted = self.config.encrypted
        a = self.model.forward_to_split(x)
        logits = self._split_forward(a, MessageType.ACT_PLAIN, MessageType.ACT_ENC, encrypted)
        _, loss, grad = softmax_cross_entropy(logits, y)
        _check_loss(loss, epoch, batch)
        self.connection.send_tensor(MessageType.GRAD_OUT, grad)
        if encrypted:
            self.connection.send_tensor(MessageType.GRAD_W, grad.T @ a)
        grad_a = self.connection.recv_tensor(MessageType.GRAD_ACT)
        self.model.backward(grad_a)
        self.optimizer.step()
        self.losses.append(loss)
        return loss

    def evaluate(self, dataset):
        """Test accuracy through a server round trip (encrypted when encrypted_eval)."""
        chunk = Config.EVAL_BATCH_SIZE
        if self.config.encrypted:
            chunk = min(chunk, self.context.slot_capacity)
        logits = []
        for x, _ in _chunks(dataset, chunk):
            a = self.model.forward_to_split(x)
            logits.append(self._split_forward(a, MessageType.EVAL_PLAIN, MessageType.EVAL_ENC,
                                              self.config.encrypted_eval))
        return accuracy(np.concatenate(logits), dataset.labels)

    def run(self, max_batches=None, evaluate=True, on_batch=None):
        """
        Handshake, E epochs of N batches, optional test evaluation, BYE.

        Returns:
            list[EpochMetrics] with byte counts taken from the transcript
        """
        self.handshake()
        cfg = self.config
        metrics = []
        for epoch in range(cfg.epochs):
            epoch_mark = self.transcript.mark()
            start = time.perf_counter()
            losses = []
            stream = batches(self.train_set, cfg.batch_size, cfg.seed, epoch)
            for b, (x, y) in enumerate(progress(stream, total=cfg.num_batches,
                                                desc=f"epoch {epoch + 1}/{cfg.epochs}")):
                if max_batches is not None and b >= max_batches:
                    break
                batch_mark = self.transcript.mark()
                t0 = time.perf_counter()
                losses.append(self.train_batch(x, y, epoch + 1, b))
                moved = self.transcript.totals(since=batch_mark)
                self.batch_log.append(BatchRecord(epoch + 1, b, losses[-1], time.perf_counter() - t0,
                                                  moved['out'], moved['in']))
                if on_batch:
                    on_batch(epoch, b, losses[-1])
            self.connection.send_json(MessageType.EPOCH_END, {'epoch': epoch + 1})
            moved = self.transcript.totals(since=epoch_mark)
            m = EpochMetrics(epoch + 1, float(np.mean(losses)), time.perf_counter() - start,
                             moved['out'], moved['in'])
            metrics.append(m)
            logger.info("Epoch %d/%d: loss=%.4f (%.1fs, %d bytes out, %d bytes in)",
                        m.epoch, cfg.epochs, m.loss, m.seconds, m.bytes_out, m.bytes_in)

        if evaluate and self.test_set is not None:
            metrics[-1].accuracy = self.evaluate(self.test_set)
            logger.info("Test accuracy: %.4f", metrics[-1].accuracy)
        self.connection.send(MessageType.BYE)
        return metrics


# ============================================================================
# SERVER
# ============================================================================

class ServerEngine:
    """
    Linear-layer side of split training.

    Holds at most a PublicContext, which has no secret key, so nothing the
    server receives in encrypted mode can be decrypted here.
    """

    def __init__(self, connection, config=None, spec=None, checkpoint=None):
        self.connection = connection
        self.config = config
        self.spec = spec or ModelSpec.m1()
        self.checkpoint = checkpoint
        self.model = None
        self.optimizer = None
        self.context = None
        self.metrics = []
        self.batches = 0
        self._on_batch = None
        self._epoch_mark = 0
        self._epoch_start = time.perf_counter()

    @property
    def transcript(self):
        return self.connection.transcript

    def handshake(self):
        self.config = synchronize(self.connection, self.config)
        self.model = ServerModel.from_spec(self.spec, self.config.seed)
        self.optimizer = make_optimizer(self.config.server_optimizer, self.model.layer_params,
                                        self.config.eta)
        if self.config.encrypted:
            self.context = self.connection.recv_context()
            logger.info("Public context received: P=%d, level %d, %d slots",
                        self.context.n, self.context.max_level, self.context.slot_capacity)

    def run(self, on_batch=None):
        """Serve requests until BYE; save the checkpoint if one was named."""
        self.handshake()
        self._on_batch = on_batch
        self._epoch_mark = self.transcript.mark()
        self._epoch_start = time.perf_counter()
        handlers = {
            MessageType.ACT_PLAIN: self._train_plain,
            MessageType.ACT_ENC: self._train_encrypted,
            MessageType.EVAL_PLAIN: self._evaluate_plain,
            MessageType.EVAL_ENC: self._evaluate_encrypted,
            MessageType.EPOCH_END: self._end_epoch,
        }
        while True:
            message = self.connection.recv()
            if message.type == MessageType.BYE:
                break
            handlers[message.type](message)
        logger.info("Session closed after %d batches", self.batches)
        if self.checkpoint:
            self.model.save(self.checkpoint)
        return self.metrics

    def _finish_batch(self):
        self.batches += 1
        if self._on_batch:
            self._on_batch(self.batches)

    def _train_plain(self, message):
        conn = self.connection
        logits = self.model.forward(decode_tensor(message.payload))
        conn.send_tensor(MessageType.OUT_PLAIN, logits)
        grad = conn.recv_tensor(MessageType.GRAD_OUT)
        grad_a = self.model.backward(grad)
        self.optimizer.step()
        conn.send_tensor(MessageType.GRAD_ACT, grad_a)
        self._finish_batch()

    def _train_encrypted(self, message):
        conn = self.connection
        params = self.model.params
        ciphertext = CipherVector.from_bytes(message.payload)
        conn.send_cipher(MessageType.OUT_ENC, self.context.encrypted_linear(ciphertext, params.w, params.b))
        grad = conn.recv_tensor(MessageType.GRAD_OUT)
        grad_w = conn.recv_tensor(MessageType.GRAD_W)
        if grad_w.shape != params.w.shape:
            raise DimensionError('grad_w', params.w.shape, grad_w.shape, 'server')
        if grad.shape != (ciphertext.slots, params.w.shape[0]):
            raise DimensionError('grad_out', (ciphertext.slots, params.w.shape[0]), grad.shape, 'server')
        grad_a = grad @ params.w
        params.grad_w = grad_w
        params.grad_b = grad.sum(axis=0)
        self.optimizer.step()
        conn.send_tensor(MessageType.GRAD_ACT, grad_a)
        self._finish_batch()

    def _evaluate_plain(self, message):
        logits = linear_forward(decode_tensor(message.payload), self.model.params)
        self.connection.send_tensor(MessageType.OUT_PLAIN, logits)

    def _evaluate_encrypted(self, message):
        params = self.model.params
        ciphertext = CipherVector.from_bytes(message.payload)
        self.connection.send_cipher(MessageType.OUT_ENC,
                                    self.context.encrypted_linear(ciphertext, params.w, params.b))

    def _end_epoch(self, message):
        epoch = decode_json(message.payload).get('epoch', len(self.metrics) + 1)
        moved = self.transcript.totals(since=self._epoch_mark)
        m = EpochMetrics(epoch, None, time.perf_counter() - self._epoch_start, moved['out'], moved['in'])
        self.metrics.append(m)
        logger.info("Epoch %d done on server (%.1fs, %d bytes out, %d bytes in)",
                    m.epoch, m.seconds, m.bytes_out, m.bytes_in)
        self._epoch_mark = self.transcript.mark()
        self._epoch_start = time.perf_counter()


# ============================================================================
# IN-PROCESS PAIR
# ============================================================================

@dataclass
class SplitRun:
    client: ClientEngine
    server: ServerEngine
    metrics: list


def run_split_pair(config, train, test=None, spec=None, context=None, server_config=None,
                   timeout=None, keep_payloads=False, max_batches=None, evaluate=True,
                   on_client_batch=None, on_server_batch=None, checkpoint=None):
    """
    Run client and server over socket.socketpair(), the server on a thread.

    A server failure is re-raised on the caller's thread. When the client
    only saw the closed socket, the server's exception is raised from the
    client's TransportError so the real cause keeps its exit code.
    """
    client_conn, server_conn = socket_pair(timeout, keep_payloads)
    client = ClientEngine(client_conn, config, train, test, spec, context)
    server = ServerEngine(server_conn, server_config, spec, checkpoint)
    failures = []

    def serve():
        try:
            server.run(on_batch=on_server_batch)
        except Exception as e:  # surfaced on the caller's thread below
            failures.append(e)
        finally:
            server_conn.close()

    thread = threading.Thread(target=serve, name='splithe-server', daemon=True)
    thread.start()
    client_error = None
    try:
        metrics = client.run(max_batches=max_batches, evaluate=evaluate, on_batch=on_client_batch)
    except TransportError as e:
        client_error = e
    finally:
        client_conn.close()
        thread.join(timeout)
    for failure in failures:
        if not isinstance(failure, TransportError):
            logger.error("Server failed: %s", failure)
            raise failure from client_error
    if client_error is not None:
        raise client_error
    return SplitRun(client, server, metrics)
