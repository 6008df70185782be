import pytest

from errors import ProtocolError
from events import CLIENT, SERVER, MessageType, ProtocolStateMachine

M = MessageType


def handshaken(mode):
    machine = ProtocolStateMachine()
    machine.advance(M.HELLO, CLIENT)
    machine.advance(M.HELLO, SERVER)
    machine.configure(mode)
    machine.advance(M.SYNC, CLIENT)
    machine.advance(M.SYNC, SERVER)
    return machine


def feed(machine, steps):
    for message_type, sender in steps:
        machine.advance(message_type, sender)


PLAIN_BATCH = [(M.ACT_PLAIN, CLIENT), (M.OUT_PLAIN, SERVER), (M.GRAD_OUT, CLIENT), (M.GRAD_ACT, SERVER)]
ENCRYPTED_BATCH = [(M.ACT_ENC, CLIENT), (M.OUT_ENC, SERVER), (M.GRAD_OUT, CLIENT),
                   (M.GRAD_W, CLIENT), (M.GRAD_ACT, SERVER)]


class TestPlainMode:

    def test_full_session(self):
        machine = handshaken('plain')
        assert machine.state == 'idle'
        for _ in range(3):
            feed(machine, PLAIN_BATCH)
        feed(machine, [(M.EPOCH_END, CLIENT), (M.EVAL_PLAIN, CLIENT), (M.OUT_PLAIN, SERVER), (M.BYE, CLIENT)])
        assert machine.closed
        assert machine.batches == 3
        assert machine.epoch == 1

    def test_ciphertext_rejected(self):
        machine = handshaken('plain')
        with pytest.raises(ProtocolError):
            machine.advance(M.ACT_ENC, CLIENT)

    def test_weight_gradient_rejected(self):
        machine = handshaken('plain')
        feed(machine, PLAIN_BATCH[:3])
        with pytest.raises(ProtocolError):
            machine.advance(M.GRAD_W, CLIENT)

    def test_wrong_sender(self):
        machine = handshaken('plain')
        with pytest.raises(ProtocolError):
            machine.advance(M.ACT_PLAIN, SERVER)

    def test_encrypted_eval_rejected(self):
        machine = handshaken('plain')
        with pytest.raises(ProtocolError):
            machine.advance(M.EVAL_ENC, CLIENT)


class TestEncryptedMode:

    def test_context_required_first(self):
        machine = handshaken('encrypted')
        assert machine.state == 'awaiting_context'
        with pytest.raises(ProtocolError):
            machine.advance(M.ACT_ENC, CLIENT)

    def test_full_session(self):
        machine = handshaken('encrypted')
        feed(machine, [(M.CTX_PUB, CLIENT)])
        feed(machine, ENCRYPTED_BATCH)
        feed(machine, [(M.EVAL_ENC, CLIENT), (M.OUT_ENC, SERVER), (M.EPOCH_END, CLIENT), (M.BYE, CLIENT)])
        assert machine.closed
        assert machine.batches == 1

    def test_plain_activation_rejected(self):
        machine = handshaken('encrypted')
        machine.advance(M.CTX_PUB, CLIENT)
        with pytest.raises(ProtocolError):
            machine.advance(M.ACT_PLAIN, CLIENT)

    def test_grad_act_needs_weight_gradient(self):
        machine = handshaken('encrypted')
        feed(machine, [(M.CTX_PUB, CLIENT)] + ENCRYPTED_BATCH[:3])
        with pytest.raises(ProtocolError):
            machine.advance(M.GRAD_ACT, SERVER)


class TestHandshake:

    def test_sync_echo_needs_mode(self):
        machine = ProtocolStateMachine()
        feed(machine, [(M.HELLO, CLIENT), (M.HELLO, SERVER), (M.SYNC, CLIENT)])
        with pytest.raises(ProtocolError):
            machine.advance(M.SYNC, SERVER)

    def test_data_before_handshake(self):
        with pytest.raises(ProtocolError):
            ProtocolStateMachine().advance(M.ACT_PLAIN, CLIENT)

    def test_unknown_type(self):
        with pytest.raises(ProtocolError):
            ProtocolStateMachine().advance(0x7F, CLIENT)

    def test_unknown_mode(self):
        with pytest.raises(ProtocolError):
            ProtocolStateMachine().configure('hybrid')

    def test_nothing_after_bye(self):
        machine = handshaken('plain')
        machine.advance(M.BYE, CLIENT)
        assert machine.allowed() == []
        with pytest.raises(ProtocolError):
            machine.advance(M.EPOCH_END, CLIENT)

    def test_allowed_in_idle(self):
        allowed = handshaken('plain').allowed()
        assert (M.ACT_PLAIN, CLIENT) in allowed
        assert (M.BYE, CLIENT) in allowed
        assert (M.ACT_ENC, CLIENT) not in allowed

    def test_progress_mentions_counts(self):
        machine = handshaken('plain')
        feed(machine, PLAIN_BATCH)
        assert 'batches_completed=1' in machine.progress()
