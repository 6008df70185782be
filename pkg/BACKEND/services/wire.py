"""
Wire Protocol: framing, serialization, transport and accounting

Frame layout (all integers little-endian):
    payload length u64 | message type u8 | payload

Payloads:
- tensors: ndim u32 | dims u32... | binary32 data
- ciphertext vectors and contexts: see ckks.CipherVector / PublicContext
- HELLO, SYNC, EPOCH_END: compact UTF-8 JSON

Every frame sent or received through a Connection is recorded in its
Transcript with its full size (header included), so the transcript totals
are exactly the bytes that crossed the socket.
"""

import json
import logging
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ckks import CipherVector, PublicContext
from config import PROTOCOL_VERSION, TrainConfig
from errors import (HandshakeError, IncompleteFrameError, ProtocolError, TransportError,
                    UsageError)
from events import CLIENT, SERVER, MessageType, ProtocolStateMachine

logger = logging.getLogger(__name__)

HEADER = struct.Struct('<QB')
MAX_PAYLOAD = (1 << 63) - 1
TRANSCRIPT_COLUMNS = ['direction', 'tag', 'bytes', 'millis']


# ============================================================================
# FRAMING
# ============================================================================

@dataclass(frozen=True)
class ProtocolMessage:
    type: MessageType
    payload: bytes = b''

    @property
    def size(self):
        """Size of the framed message on the wire."""
        return HEADER.size + len(self.payload)

    def frame(self):
        return frame(self.type, self.payload)


def frame(message_type, payload=b''):
    """message -> u64 length | u8 type | payload"""
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the frame limit")
    return HEADER.pack(len(payload), int(message_type)) + bytes(payload)


def parse_type(tag):
    try:
        return MessageType(tag)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{tag:02X}")


def unframe(buf):
    """
    bytes -> ProtocolMessage

    Raises IncompleteFrameError when the buffer is shorter than its header
    says and ProtocolError for unknown tags or trailing bytes.
    """
    if len(buf) < HEADER.size:
        raise IncompleteFrameError(HEADER.size, len(buf))
    length, tag = HEADER.unpack_from(buf, 0)
    message_type = parse_type(tag)
    expected = HEADER.size + length
    if len(buf) < expected:
        raise IncompleteFrameError(expected, len(buf))
    if len(buf) > expected:
        raise ProtocolError(f"{len(buf) - expected} trailing bytes after a {message_type.name} frame")
    return ProtocolMessage(message_type, bytes(buf[HEADER.size:]))


# ============================================================================
# PAYLOAD CODECS
# ============================================================================

def encode_tensor(array):
    """Binary32 tensor with its shape header."""
    array = np.ascontiguousarray(array, dtype='<f4')
    return struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape) + array.tobytes()


def decode_tensor(payload):
    if len(payload) < 4:
        raise IncompleteFrameError(4, len(payload))
    (ndim,) = struct.unpack_from('<I', payload, 0)
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise IncompleteFrameError(header, len(payload))
    shape = struct.unpack_from(f'<{ndim}I', payload, 4)
    expected = header + 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise IncompleteFrameError(expected, len(payload))
    return np.frombuffer(payload, dtype='<f4', offset=header).reshape(shape).astype(np.float32)


def encode_json(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':')).encode('utf-8')


def decode_json(payload):
    try:
        return json.loads(payload.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"undecodable JSON payload: {e}")


# ============================================================================
# TRANSCRIPT
# ============================================================================

@dataclass
class TranscriptEntry:
    direction: str
    tag: str
    bytes: int
    millis: float


@dataclass
class Transcript:
    """
    Ordered, byte-exact log of every frame moved over one connection.

    With keep_payloads the raw frames are retained too (privacy scans).
    """
    keep_payloads: bool = False
    entries: list = field(default_factory=list)
    frames: list = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._start = time.perf_counter()

    def record(self, direction, message_type, raw):
        entry = TranscriptEntry(direction, MessageType(message_type).name, len(raw),
                                (time.perf_counter() - self._start) * 1000.0)
        with self._lock:
            self.entries.append(entry)
            if self.keep_payloads:
                self.frames.append((direction, MessageType(message_type), bytes(raw)))

    def mark(self):
        """Position to measure from (see totals(since=...))."""
        return len(self.entries)

    def totals(self, since=0):
        """{'out': bytes, 'in': bytes} over entries[since:]."""
        out = sum(e.bytes for e in self.entries[since:] if e.direction == 'out')
        inc = sum(e.bytes for e in self.entries[since:] if e.direction == 'in')
        return {'out': out, 'in': inc}

    def inventory(self, direction=None):
        """Count of frames per message type name."""
        return Counter(e.tag for e in self.entries if direction is None or e.direction == direction)

    def payloads(self, direction=None):
        return [raw for d, _, raw in self.frames if direction is None or d == direction]

    def to_frame(self):
        return pd.DataFrame([vars(e) for e in self.entries], columns=TRANSCRIPT_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info("Transcript written: %s (%d frames)", path, len(self.entries))


# ============================================================================
# CONNECTION
# ============================================================================

def parse_address(address):
    """'host:port' -> (host, port)"""
    host, sep, port = str(address).rpartition(':')
    if not sep or not port.isdigit():
        raise UsageError('address', f"expected host:port, got '{address}'")
    return host or '0.0.0.0', int(port)


class Connection:
    """
    One side of a training session over a reliable byte stream.

    Every frame passes through the protocol state machine (on send and on
    receive) and is recorded in the transcript.
    """

    def __init__(self, sock, role, timeout=None, transcript=None):
        if role not in (CLIENT, SERVER):
            raise UsageError('role', f"'{role}' is not client or server")
        self.sock = sock
        self.role = role
        self.peer = SERVER if role == CLIENT else CLIENT
        self.machine = ProtocolStateMachine()
        self.transcript = transcript if transcript is not None else Transcript()
        if timeout is not None:
            sock.settimeout(timeout)

    # ------------------------------------------------------------------
    # raw frames
    # ------------------------------------------------------------------

    def send(self, message_type, payload=b''):
        raw = frame(message_type, payload)
        self.machine.advance(message_type, self.role)
        try:
            self.sock.sendall(raw)
        except OSError as e:
            raise TransportError(f"send of {MessageType(message_type).name} failed: {e}",
                                 self.machine.progress())
        self.transcript.record('out', message_type, raw)
        logger.debug("-> %s (%d bytes)", MessageType(message_type).name, len(raw))
        return len(raw)

    def _recv_exact(self, count, at_boundary=False):
        buf = bytearray()
        while len(buf) < count:
            try:
                chunk = self.sock.recv(min(count - len(buf), 1 << 20))
            except OSError as e:
                raise TransportError(f"receive failed: {e}", self.machine.progress())
            if not chunk:
                if at_boundary and not buf:
                    raise TransportError("peer closed the connection", self.machine.progress())
                raise IncompleteFrameError(count, len(buf))
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, *expected):
        """
        Next frame from the peer.

        Args:
            expected: if given, the frame's type must be one of these
        """
        header = self._recv_exact(HEADER.size, at_boundary=True)
        length, tag = HEADER.unpack(header)
        message_type = parse_type(tag)
        payload = self._recv_exact(length)
        self.machine.advance(message_type, self.peer)
        if expected and message_type not in expected:
            raise ProtocolError(f"expected {'/'.join(t.name for t in expected)}, got {message_type.name}")
        self.transcript.record('in', message_type, header + payload)
        logger.debug("<- %s (%d bytes)", message_type.name, HEADER.size + length)
        return ProtocolMessage(message_type, payload)

    # ------------------------------------------------------------------
    # typed helpers
    # ------------------------------------------------------------------

    def send_tensor(self, message_type, array):
        return self.send(message_type, encode_tensor(array))

    def recv_tensor(self, *expected):
        return decode_tensor(self.recv(*expected).payload)

    def send_cipher(self, message_type, ciphertext):
        return self.send(message_type, ciphertext.to_bytes())

    def recv_cipher(self, *expected):
        return CipherVector.from_bytes(self.recv(*expected).payload)

    def send_json(self, message_type, data):
        return self.send(message_type, encode_json(data))

    def recv_json(self, *expected):
        return decode_json(self.recv(*expected).payload)

    def send_context(self, context):
        return self.send(MessageType.CTX_PUB, context.to_bytes())

    def recv_context(self):
        return PublicContext.from_bytes(self.recv(MessageType.CTX_PUB).payload)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def connect(address, timeout=None, retries=20, delay=0.25):
    """Open a client Connection to host:port, retrying while the server starts."""
    host, port = parse_address(address)
    last_error = None
    for _ in range(max(1, retries)):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            logger.info("Connected to %s:%d", host, port)
            return Connection(sock, CLIENT, timeout=timeout)
        except OSError as e:
            last_error = e
            time.sleep(delay)
    raise TransportError(f"cannot reach {host}:{port}: {last_error}")


def listen(address, timeout=None):
    """Accept exactly one client on host:port and return the server Connection."""
    host, port = parse_address(address)
    try:
        with socket.create_server((host, port), reuse_port=False) as server:
            server.settimeout(timeout)
            logger.info("Listening on %s:%d", host, port)
            sock, peer = server.accept()
    except OSError as e:
        raise TransportError(f"cannot accept on {host}:{port}: {e}")
    logger.info("Client connected from %s:%d", *peer[:2])
    return Connection(sock, SERVER, timeout=timeout)


def socket_pair(timeout=None, keep_payloads=False):
    """In-process (client, server) Connections over socket.socketpair()."""
    a, b = socket.socketpair()
    return (Connection(a, CLIENT, timeout, Transcript(keep_payloads)),
            Connection(b, SERVER, timeout, Transcript(keep_payloads)))


# ============================================================================
# HANDSHAKE
# ============================================================================

def _first_difference(local, remote):
    local_dict, remote_dict = local.to_dict(), remote.to_dict()
    for key in sorted(set(local_dict) | set(remote_dict)):
        if local_dict.get(key) != remote_dict.get(key):
            return key, local_dict.get(key), remote_dict.get(key)
    return 'config', local_dict, remote_dict


def _check_hello(hello):
    if hello.get('protocol') != PROTOCOL_VERSION:
        raise HandshakeError('protocol', PROTOCOL_VERSION, hello.get('protocol'))


def synchronize(connection, config=None):
    """
    Agree on one TrainConfig.

    Client: sends HELLO and its config in SYNC, then compares the echoed
    config byte for byte. Server: answers HELLO, echoes its own view of the
    config (the client's when the server has none, otherwise its own with
    the client's batch count) and fails when they differ.

    Returns:
        TrainConfig both sides now hold
    """
    if connection.role == CLIENT:
        if config is None or config.num_batches is None:
            raise UsageError('num_batches', "the client must know N before SYNC")
        connection.send_json(MessageType.HELLO, {'protocol': PROTOCOL_VERSION, 'role': CLIENT})
        _check_hello(connection.recv_json(MessageType.HELLO))
        connection.machine.configure(config.mode)
        connection.send(MessageType.SYNC, config.to_wire())
        echo = connection.recv(MessageType.SYNC).payload
        if echo != config.to_wire():
            field_name, local, remote = _first_difference(config, TrainConfig.from_wire(echo))
            raise HandshakeError(field_name, local, remote)
        logger.info("Handshake complete: mode=%s eta=%s n=%d N=%d E=%d seed=%d",
                    config.mode, config.eta, config.batch_size, config.num_batches,
                    config.epochs, config.seed)
        return config

    hello = connection.recv_json(MessageType.HELLO)
    connection.send_json(MessageType.HELLO, {'protocol': PROTOCOL_VERSION, 'role': SERVER})
    _check_hello(hello)
    payload = connection.recv(MessageType.SYNC).payload
    remote = TrainConfig.from_wire(payload)
    local = remote if config is None else config.with_batches(remote.num_batches)
    connection.machine.configure(remote.mode)
    connection.send(MessageType.SYNC, local.to_wire())
    if local.to_wire() != payload:
        field_name, mine, theirs = _first_difference(local, remote)
        raise HandshakeError(field_name, mine, theirs)
    logger.info("Handshake complete: mode=%s eta=%s n=%d N=%d E=%d",
                remote.mode, remote.eta, remote.batch_size, remote.num_batches, remote.epochs)
    return remote
