"""
Protocol Events and State Machine for Split Training

Every frame on the wire carries one MessageType. ProtocolStateMachine
accepts exactly the orderings the two training modes allow and raises
ProtocolError for anything else; both parties run one and feed it every
frame they send or receive.

Handshake (both modes):
    client HELLO -> server HELLO -> client SYNC -> server SYNC (echo)
    encrypted only: client CTX_PUB

Per batch:
    plain:      ACT_PLAIN -> OUT_PLAIN -> GRAD_OUT -> GRAD_ACT
    encrypted:  ACT_ENC   -> OUT_ENC   -> GRAD_OUT -> GRAD_W -> GRAD_ACT

Between batches the client may send EPOCH_END, run evaluation round trips
(EVAL_PLAIN -> OUT_PLAIN, or EVAL_ENC -> OUT_ENC in encrypted mode), or
close with BYE.
"""

import logging
from enum import IntEnum

from errors import ProtocolError

logger = logging.getLogger(__name__)

CLIENT = 'client'
SERVER = 'server'


class MessageType(IntEnum):
    HELLO = 0x01
    SYNC = 0x02
    CTX_PUB = 0x03
    ACT_PLAIN = 0x04
    ACT_ENC = 0x05
    OUT_PLAIN = 0x06
    OUT_ENC = 0x07
    GRAD_OUT = 0x08
    GRAD_W = 0x09
    GRAD_ACT = 0x0A
    EPOCH_END = 0x0B
    BYE = 0x0C
    EVAL_PLAIN = 0x0D
    EVAL_ENC = 0x0E


# Messages whose payload comes from the client's private activations
ACTIVATION_TYPES = frozenset({MessageType.ACT_PLAIN, MessageType.ACT_ENC,
                              MessageType.EVAL_PLAIN, MessageType.EVAL_ENC})


# ============================================================================
# TRANSITION TABLES: (state, message type, sender) -> next state
# ============================================================================

_HANDSHAKE = {
    ('start', MessageType.HELLO, CLIENT): 'hello',
    ('hello', MessageType.HELLO, SERVER): 'greeted',
    ('greeted', MessageType.SYNC, CLIENT): 'syncing',
    ('syncing', MessageType.SYNC, SERVER): 'synced',
}

_SESSION = {
    ('idle', MessageType.EPOCH_END, CLIENT): 'idle',
    ('idle', MessageType.BYE, CLIENT): 'closed',
    ('idle', MessageType.EVAL_PLAIN, CLIENT): 'evaluating',
    ('evaluating', MessageType.OUT_PLAIN, SERVER): 'idle',
}

_MODES = {
    'plain': {
        ('idle', MessageType.ACT_PLAIN, CLIENT): 'forward',
        ('forward', MessageType.OUT_PLAIN, SERVER): 'outputs',
        ('outputs', MessageType.GRAD_OUT, CLIENT): 'gradients',
        ('gradients', MessageType.GRAD_ACT, SERVER): 'idle',
    },
    'encrypted': {
        ('awaiting_context', MessageType.CTX_PUB, CLIENT): 'idle',
        ('idle', MessageType.ACT_ENC, CLIENT): 'forward',
        ('forward', MessageType.OUT_ENC, SERVER): 'outputs',
        ('outputs', MessageType.GRAD_OUT, CLIENT): 'gradients',
        ('gradients', MessageType.GRAD_W, CLIENT): 'weight_gradients',
        ('weight_gradients', MessageType.GRAD_ACT, SERVER): 'idle',
        ('idle', MessageType.EVAL_ENC, CLIENT): 'evaluating_encrypted',
        ('evaluating_encrypted', MessageType.OUT_ENC, SERVER): 'idle',
    },
}


class ProtocolStateMachine:
    """
    Tracks one connection's position in the message sequence.

    The mode must be set (configure) before the SYNC echo is recorded;
    until then only handshake messages are legal.
    """

    def __init__(self):
        self.state = 'start'
        self.mode = None
        self.epoch = 0
        self.batches = 0
        self.history = []

    def configure(self, mode):
        if mode not in _MODES:
            raise ProtocolError(f"unknown training mode '{mode}'")
        self.mode = mode

    def allowed(self):
        """Message types legal in the current state, with their senders."""
        table = self._table()
        return sorted(((tag, sender) for (state, tag, sender) in table if state == self.state),
                      key=lambda item: item[0])

    def _table(self):
        table = dict(_HANDSHAKE)
        if self.mode is not None:
            table.update(_SESSION)
            table.update(_MODES[self.mode])
        return table

    def advance(self, message_type, sender):
        """
        Record one frame; return the new state.

        Raises ProtocolError when the frame is not legal here.
        """
        try:
            message_type = MessageType(message_type)
        except ValueError:
            raise ProtocolError(f"unknown message type 0x{int(message_type):02X}")

        key = (self.state, message_type, sender)
        table = self._table()
        if key not in table:
            raise ProtocolError(
                f"unexpected {message_type.name} from {sender} in state '{self.state}'"
                + (f" (mode {self.mode})" if self.mode else ''))

        next_state = table[key]
        if next_state == 'synced':
            if self.mode is None:
                raise ProtocolError("SYNC echo recorded before the training mode was configured")
            next_state = 'awaiting_context' if self.mode == 'encrypted' else 'idle'
        if message_type == MessageType.GRAD_ACT:
            self.batches += 1
        elif message_type == MessageType.EPOCH_END:
            self.epoch += 1

        self.history.append(message_type)
        self.state = next_state
        return next_state

    @property
    def closed(self):
        return self.state == 'closed'

    def progress(self):
        """Human-readable position, used in transport error reports."""
        return f"state={self.state}, epochs_completed={self.epoch}, batches_completed={self.batches}"
