"""
CKKS Approximate Homomorphic Encryption

A leveled RNS variant of CKKS carrying exactly what an encrypted linear
layer needs: encode/decode, public-key encryption, secret-key decryption,
ciphertext-plaintext multiplication (by scalars or by encoded vectors),
additions and rescaling. There are no relinearization or rotation keys.

Representation:
- ring R_Q = Z_Q[X] / (X^P + 1), Q the product of the active chain primes
- every polynomial is an RNS uint64 array [primes, P]; row i holds the
  coefficients mod q_i
- the last chain prime is the special prime: generated, reported, never
  used for data
- a ciphertext at level l lives under the first l + 1 primes; a fresh one
  sits at level len(chain) - 2 and every rescale drops the top prime

Slots: slot j is the evaluation at zeta^(2j+1), zeta = exp(i*pi/P), for
j < P/2. The conjugate root sits at index P-1-j, which keeps the encoded
polynomial real. Without rotations no other slot order is needed, so
slot j simply holds batch sample j (batch-axis packing: one ciphertext
per feature).

Usage:
    pub, pri = keygen(HE_PRESETS['p4096-40-20-20'], seed=7)
    ct = pub.encrypt(activations)                 # [n, 256] -> 256 ciphertexts
    out = pub.encrypted_linear(ct, w, b)          # 5 ciphertexts, one level lower
    logits = pri.decrypt(out)                     # [n, 5]
"""

import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sympy import isprime

from config import HEParams
from errors import (DimensionError, IncompleteFrameError, LevelError, LevelExhaustedError,
                    MissingKeyError, ParameterError, PrecisionError, ProtocolError)

logger = logging.getLogger(__name__)

CONTEXT_MAGIC = b'CKKS'
SECRET_MAGIC = b'CKSK'
CIPHER_MAGIC = b'CKCV'
WIRE_VERSION = 1

NOISE_STDDEV = 3.2
NOISE_BOUND = 19

# Total modulus bits that keep 128-bit security with a ternary secret
MAX_MODULUS_BITS = {2048: 54, 4096: 109, 8192: 218}

# Feature chunk for encryption/decryption; bounds the longdouble temporaries
FEATURE_CHUNK = 32

_LIMB_BITS = 21
_EXTENDED_FLOAT = np.finfo(np.longdouble).nmant >= 63


# ============================================================================
# MODULAR ARITHMETIC (uint64 residues, primes below 2^61)
# ============================================================================

def add_mod(a, b, q):
    s = a + b
    return np.where(s >= q, s - q, s)


def sub_mod(a, b, q):
    return np.where(a >= b, a - b, a + (q - b))


def mul_mod(a, b, q):
    """
    Elementwise a * b mod q.

    Primes below 2^32 multiply directly in uint64. Wider primes estimate the
    quotient in 64-bit-mantissa long doubles and correct the wrapped
    remainder by at most one q; platforms without extended precision use
    Python integers.
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    q = np.asarray(q, dtype=np.uint64)
    if int(q.max()) < 1 << 32:
        return (a * b) % q
    if _EXTENDED_FLOAT:
        ld = np.longdouble
        quotient = np.floor(a.astype(ld) * b.astype(ld) / q.astype(ld)).astype(np.uint64)
        r = np.asarray(a * b - quotient * q).view(np.int64)
        qs = q.astype(np.int64)
        r = np.where(r < 0, r + qs, r)
        r = np.where(r >= qs, r - qs, r)
        return r.astype(np.uint64)
    return (a.astype(object) * b.astype(object) % q.astype(object)).astype(np.uint64)


def _split_limbs(a):
    mask = np.uint64((1 << _LIMB_BITS) - 1)
    return [((a >> np.uint64(_LIMB_BITS * k)) & mask).astype(np.float64) for k in range(3)]


def matmul_mod(a, b, q):
    """
    (a @ b) mod q for residue matrices a [J, K], b [K, M] and one prime q.

    Both operands are cut into 21-bit limbs; with K <= 2^11 every partial
    sum of limb products stays below 2^53, so the float64 matmuls are exact.
    """
    max_k = 1 << (53 - 2 * _LIMB_BITS)
    if a.shape[1] > max_k:
        raise DimensionError('K', f"<= {max_k}", a.shape[1], 'matmul_mod')
    q = np.uint64(q)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.uint64)
    b_limbs = _split_limbs(b)
    for i, a_limb in enumerate(_split_limbs(a)):
        for j, b_limb in enumerate(b_limbs):
            part = (a_limb @ b_limb).astype(np.uint64) % q
            shift = np.uint64(pow(2, _LIMB_BITS * (i + j), int(q)))
            out = add_mod(out, mul_mod(part, shift, q), q)
    return out


# ============================================================================
# PRIMES AND NTT
# ============================================================================

@lru_cache(maxsize=None)
def chain_primes(poly_modulus, coeff_mod_bits):
    """
    Smallest distinct primes q = 1 (mod 2P), one per requested bit size.

    Args:
        poly_modulus: ring degree P
        coeff_mod_bits: tuple of bit sizes, in chain order

    Returns:
        tuple: the primes, in chain order
    """
    step = 2 * poly_modulus
    primes = []
    for bits in coeff_mod_bits:
        low = 1 << (bits - 1)
        candidate = -(-(low - 1) // step) * step + 1
        while candidate < 1 << bits:
            if candidate not in primes and isprime(candidate):
                break
            candidate += step
        else:
            raise ParameterError('coeff_mod_bits', f"no unused {bits}-bit prime = 1 mod {step}")
        primes.append(candidate)
    return tuple(primes)


def _root_of_unity(q, order):
    """A primitive `order`-th root of unity mod q (order a power of two)."""
    for x in range(2, q):
        psi = pow(x, (q - 1) // order, q)
        if pow(psi, order // 2, q) == q - 1:
            return psi
    raise ParameterError('coeff_mod_bits', f"no primitive {order}-th root mod {q}")


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class NTTTables:
    """
    Negacyclic NTT over a list of primes.

    Forward is Cooley-Tukey with bit-reversed psi powers (output in
    bit-reversed order), inverse is Gentleman-Sande; pointwise products in
    between give products in Z_q[X] / (X^P + 1).
    """

    def __init__(self, n, primes):
        self.n = n
        self.q = np.array(primes, dtype=np.uint64)
        rev = _bit_reverse(n)
        psi_rev, psi_inv_rev, n_inv = [], [], []
        for q in primes:
            psi = _root_of_unity(q, 2 * n)
            psi_inv = pow(psi, -1, q)
            powers, inv_powers = [1] * n, [1] * n
            for k in range(1, n):
                powers[k] = powers[k - 1] * psi % q
                inv_powers[k] = inv_powers[k - 1] * psi_inv % q
            psi_rev.append(np.array(powers, dtype=np.uint64)[rev])
            psi_inv_rev.append(np.array(inv_powers, dtype=np.uint64)[rev])
            n_inv.append(pow(n, -1, q))
        self.psi_rev = np.stack(psi_rev)
        self.psi_inv_rev = np.stack(psi_inv_rev)
        self.n_inv = np.array(n_inv, dtype=np.uint64)

    def forward(self, a):
        """a [..., L, n] in coefficient form -> evaluation form."""
        rows = a.shape[-2]
        q = self.q[:rows, None, None]
        a = np.array(a, dtype=np.uint64, copy=True)
        m, t = 1, self.n
        while m < self.n:
            t //= 2
            blocks = a.reshape(a.shape[:-1] + (m, 2, t))
            u = blocks[..., 0, :]
            v = mul_mod(blocks[..., 1, :], self.psi_rev[:rows, m:2 * m, None], q)
            blocks[..., 0, :], blocks[..., 1, :] = add_mod(u, v, q), sub_mod(u, v, q)
            m *= 2
        return a

    def inverse(self, a):
        """a [..., L, n] in evaluation form -> coefficient form."""
        rows = a.shape[-2]
        q = self.q[:rows, None, None]
        a = np.array(a, dtype=np.uint64, copy=True)
        t, m = 1, self.n
        while m > 1:
            h = m // 2
            blocks = a.reshape(a.shape[:-1] + (h, 2, t))
            u = blocks[..., 0, :]
            v = blocks[..., 1, :]
            blocks[..., 0, :], blocks[..., 1, :] = (
                add_mod(u, v, q),
                mul_mod(sub_mod(u, v, q), self.psi_inv_rev[:rows, h:2 * h, None], q),
            )
            t *= 2
            m = h
        return mul_mod(a, self.n_inv[:rows, None], self.q[:rows, None])

    def multiply(self, a, b):
        """Negacyclic product of two RNS polynomials (broadcasting leading axes)."""
        rows = a.shape[-2]
        q = self.q[:rows, None]
        return self.inverse(mul_mod(self.forward(a), self.forward(b), q))


@lru_cache(maxsize=None)
def ntt_tables(n, primes):
    return NTTTables(n, primes)


# ============================================================================
# SAMPLING
# ============================================================================

def _ternary(rng, shape):
    return rng.integers(-1, 2, size=shape).astype(np.int64)


def _zero_one(rng, shape):
    """ZO(1/2): 0 with probability 1/2, +-1 with probability 1/4 each."""
    r = rng.random(shape)
    return np.where(r < 0.25, -1, np.where(r < 0.5, 1, 0)).astype(np.int64)


def _gaussian(rng, shape, noise_free):
    if noise_free:
        return np.zeros(shape, dtype=np.int64)
    e = np.rint(rng.normal(0.0, NOISE_STDDEV, size=shape))
    return np.clip(e, -NOISE_BOUND, NOISE_BOUND).astype(np.int64)


# ============================================================================
# PLAINTEXTS AND CIPHERTEXTS
# ============================================================================

@dataclass
class Plaintext:
    """
    An encoded vector.

    data is uint64 [level + 1, P], or [features, level + 1, P] for a stack.
    """
    data: np.ndarray
    level: int
    scale: float
    slots: int


@dataclass
class CipherVector:
    """
    Batch-axis packed ciphertexts: one ciphertext per feature, the batch in
    the first `slots` slots of each.

    Attributes:
        data: uint64 [features, 2, level + 1, P]; [:, 0] is c0, [:, 1] is c1
        level: index of the top active prime
        scale: current scale of every member
        slots: occupied slots (the batch size n)
    """
    data: np.ndarray
    level: int
    scale: float
    slots: int

    @property
    def features(self):
        return self.data.shape[0]

    @property
    def poly_modulus(self):
        return self.data.shape[-1]

    def to_bytes(self):
        """
        b"CKCV" | version u8 | P u32 | level u8 | scale u64 (binary64 bits) |
        slots u32 | features u32 | residues u64 [features, 2, level + 1, P]
        """
        (scale_bits,) = struct.unpack('<Q', struct.pack('<d', self.scale))
        header = CIPHER_MAGIC + struct.pack('<BIBQII', WIRE_VERSION, self.poly_modulus, self.level,
                                            scale_bits, self.slots, self.features)
        return header + np.ascontiguousarray(self.data, dtype='<u8').tobytes()

    @classmethod
    def from_bytes(cls, buf):
        if bytes(buf[:4]) != CIPHER_MAGIC:
            raise ProtocolError("payload is not a serialized ciphertext vector")
        header_size = 4 + struct.calcsize('<BIBQII')
        if len(buf) < header_size:
            raise IncompleteFrameError(header_size, len(buf))
        version, n, level, scale_bits, slots, features = struct.unpack_from('<BIBQII', buf, 4)
        if version != WIRE_VERSION:
            raise ProtocolError(f"unsupported ciphertext version {version}")
        (scale,) = struct.unpack('<d', struct.pack('<Q', scale_bits))
        shape = (features, 2, level + 1, n)
        expected = header_size + 8 * int(np.prod(shape))
        if len(buf) != expected:
            raise IncompleteFrameError(expected, len(buf))
        data = np.frombuffer(buf, dtype='<u8', offset=header_size).reshape(shape).astype(np.uint64)
        return cls(data, level, scale, slots)


# ============================================================================
# CONTEXTS
# ============================================================================

def _params_block(params):
    bits = params.coeff_mod_bits
    return struct.pack(f'<IB{len(bits)}BB', params.poly_modulus, len(bits), *bits, params.scale_bits)


def _read_params_block(buf, offset):
    n, count = struct.unpack_from('<IB', buf, offset)
    offset += 5
    bits = struct.unpack_from(f'<{count}B', buf, offset)
    offset += count
    (scale_bits,) = struct.unpack_from('<B', buf, offset)
    return HEParams(n, tuple(bits), scale_bits), offset + 1


def _check_security(params):
    total = sum(params.coeff_mod_bits)
    bound = MAX_MODULUS_BITS.get(params.poly_modulus)
    if bound is not None and total >= bound:
        logger.warning("HE parameters P=%d with a %d-bit modulus leave no margin under the "
                       "%d-bit bound for 128-bit security", params.poly_modulus, total, bound)


class PublicContext:
    """
    HE parameters plus the public key; everything the server may hold.

    There is no secret key here, so decrypt() always raises MissingKeyError.
    """

    def __init__(self, params, public_key, rng=None, noise_free=False):
        params.validate()
        self.params = params
        self.primes = chain_primes(params.poly_modulus, params.coeff_mod_bits)
        self.data_primes = self.primes[:-1]
        self.tables = ntt_tables(params.poly_modulus, self.data_primes)
        self._q = np.array(self.data_primes, dtype=np.uint64)
        self.public_key = public_key
        self.noise_free = noise_free
        self._rng = rng if rng is not None else np.random.default_rng()
        twist = np.arange(params.poly_modulus) * (np.pi / params.poly_modulus)
        self._twist = np.exp(1j * twist)

    @property
    def n(self):
        return self.params.poly_modulus

    @property
    def slot_capacity(self):
        return self.n // 2

    @property
    def max_level(self):
        return len(self.data_primes) - 1

    @property
    def scale(self):
        return self.params.scale

    def modulus(self, level):
        return math.prod(self.data_primes[:level + 1])

    def _qcol(self, level):
        return self._q[:level + 1, None]

    # ------------------------------------------------------------------
    # integer plumbing
    # ------------------------------------------------------------------

    def _round_scaled(self, values, scale, level):
        """Scale and round reals, refusing anything the level's modulus cannot hold."""
        scaled = np.asarray(values, dtype=np.float64) * scale
        if not np.all(np.isfinite(scaled)):
            logger.warning("Refusing to encode non-finite values at scale 2^%.1f", math.log2(scale))
            raise PrecisionError("cannot encode non-finite values")
        scaled = np.rint(scaled)
        bound = float(np.max(np.abs(scaled))) if scaled.size else 0.0
        if bound >= self.modulus(level) // 2:
            raise PrecisionError(
                f"scaled magnitude 2^{math.log2(bound):.1f} exceeds the level-{level} "
                f"modulus 2^{math.log2(self.modulus(level)):.1f}")
        if bound < 2 ** 62:
            return scaled.astype(np.int64)
        return np.array([int(x) for x in scaled.ravel()], dtype=object).reshape(scaled.shape)

    def _to_rns(self, ints, level):
        """Integers [..., k] -> residues [..., level + 1, k]."""
        rows = []
        for q in self.data_primes[:level + 1]:
            modulus = q if ints.dtype == object else np.int64(q)
            rows.append(np.mod(ints, modulus).astype(np.uint64))
        return np.stack(rows, axis=-2)

    def _lift(self, residues):
        """Residues [..., L, P] -> centered integers as float64 [..., P]."""
        rows = residues.shape[-2]
        if rows == 1:
            q = int(self.data_primes[0])
            r = residues[..., 0, :].astype(np.int64)
            return np.where(r > q // 2, r - q, r).astype(np.float64)
        primes = self.data_primes[:rows]
        big_q = math.prod(primes)
        acc = np.zeros(residues.shape[:-2] + residues.shape[-1:], dtype=object)
        for i, q in enumerate(primes):
            q_hat = big_q // q
            acc = acc + residues[..., i, :].astype(object) * (q_hat * pow(q_hat, -1, q))
        acc = acc % big_q
        return np.where(acc > big_q // 2, acc - big_q, acc).astype(np.float64)

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------

    def _embed(self, columns):
        """Slot values [count, F] -> real polynomial coefficients [F, P] (unscaled)."""
        features = columns.shape[1]
        half = self.slot_capacity
        z = np.zeros((features, half), dtype=np.complex128)
        z[:, :columns.shape[0]] = columns.T
        full = np.concatenate([z, np.conj(z[:, ::-1])], axis=1)
        return (np.fft.fft(full, axis=1) / self.n * np.conj(self._twist)).real

    def _check_slots(self, count):
        if count > self.slot_capacity:
            raise DimensionError('slots', f"<= {self.slot_capacity}", count, 'ckks')

    def encode(self, values, scale=None, level=None):
        """
        Encode a real vector [count] (or matrix [count, features]) into a
        Plaintext at `scale` and `level` (defaults: Delta, fresh level).

        Raises PrecisionError when a scaled coefficient does not fit.
        """
        scale = self.scale if scale is None else float(scale)
        level = self.max_level if level is None else level
        values = np.asarray(values, dtype=np.float64)
        columns = values[:, None] if values.ndim == 1 else values
        self._check_slots(columns.shape[0])
        ints = self._round_scaled(self._embed(columns) * scale, 1.0, level)
        data = self._to_rns(ints, level)
        if values.ndim == 1:
            data = data[0]
        return Plaintext(data, level, scale, columns.shape[0])

    def decode(self, plaintext):
        """Inverse of encode(); returns [slots] or [slots, features]."""
        data = plaintext.data
        stacked = data.ndim == 3
        coeffs = self._lift(data if stacked else data[None])
        values = self._decode_coeffs(coeffs, plaintext.scale, plaintext.slots)
        return values if stacked else values[:, 0]

    def _decode_coeffs(self, coeffs, scale, slots):
        evals = self.n * np.fft.ifft(coeffs * self._twist, axis=1)
        return (evals[:, :slots].real / scale).T

    # ------------------------------------------------------------------
    # encryption
    # ------------------------------------------------------------------

    def encrypt(self, values):
        """
        Encrypt a batch under the public key.

        Args:
            values: [n] or [n, features]; column i becomes ciphertext i with
                the batch in its first n slots

        Returns:
            CipherVector at the fresh level and scale Delta
        """
        values = np.asarray(values, dtype=np.float64)
        columns = values[:, None] if values.ndim == 1 else values
        self._check_slots(columns.shape[0])
        level = self.max_level
        q = self._qcol(level)
        chunks = []
        for start in range(0, columns.shape[1], FEATURE_CHUNK):
            block = columns[:, start:start + FEATURE_CHUNK]
            features = block.shape[1]
            message = self._to_rns(self._round_scaled(self._embed(block), self.scale, level), level)
            u = self._to_rns(_zero_one(self._rng, (features, self.n)), level)
            e0 = self._to_rns(_gaussian(self._rng, (features, self.n), self.noise_free), level)
            e1 = self._to_rns(_gaussian(self._rng, (features, self.n), self.noise_free), level)
            u_ntt = self.tables.forward(u)[:, None]
            masked = self.tables.inverse(mul_mod(u_ntt, self.public_key[None, :, :level + 1], q))
            c0 = add_mod(add_mod(masked[:, 0], e0, q), message, q)
            c1 = add_mod(masked[:, 1], e1, q)
            chunks.append(np.stack([c0, c1], axis=1))
        return CipherVector(np.concatenate(chunks, axis=0), level, self.scale, columns.shape[0])

    def decrypt(self, ciphertext):
        raise MissingKeyError('secret key')

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def _check_compatible(self, a, b):
        if a.level != b.level:
            raise LevelError(a.level, b.level)
        if not math.isclose(a.scale, b.scale, rel_tol=1e-9):
            raise LevelError(a.scale, b.scale, what='scale')

    def add(self, a, b):
        """ct + ct, member by member."""
        self._check_compatible(a, b)
        if a.data.shape != b.data.shape:
            raise DimensionError('features', a.features, b.features, 'ckks add')
        q = self._qcol(a.level)
        return CipherVector(add_mod(a.data, b.data, q), a.level, a.scale, max(a.slots, b.slots))

    def add_plain(self, ciphertext, plaintext):
        """ct + pt; a single plaintext is added to every member."""
        self._check_compatible(ciphertext, plaintext)
        q = self._qcol(ciphertext.level)
        data = ciphertext.data.copy()
        data[:, 0] = add_mod(data[:, 0], plaintext.data, q)
        return CipherVector(data, ciphertext.level, ciphertext.scale,
                            max(ciphertext.slots, plaintext.slots))

    def multiply_plain(self, ciphertext, operand, scale=None):
        """
        ct * pt without rescaling; the result's scale is the product of both.

        Args:
            operand: a real scalar, one scalar per feature ([features]),
                or a Plaintext at the ciphertext's level
            scale: encoding scale for scalar operands (default Delta)
        """
        level = ciphertext.level
        q = self._qcol(level)
        if isinstance(operand, Plaintext):
            if operand.level != level:
                raise LevelError(level, operand.level)
            pt = operand.data if operand.data.ndim == 3 else operand.data[None]
            data = self.tables.multiply(ciphertext.data, pt[:, None])
            return CipherVector(data, level, ciphertext.scale * operand.scale, ciphertext.slots)

        scale = self.scale if scale is None else float(scale)
        factors = np.asarray(operand, dtype=np.float64)
        if factors.ndim == 0:
            factors = np.full(ciphertext.features, float(factors))
        if factors.shape != (ciphertext.features,):
            raise DimensionError('features', ciphertext.features, factors.shape, 'ckks multiply')
        residues = self._to_rns(self._round_scaled(factors, scale, level)[:, None], level)
        data = mul_mod(ciphertext.data, residues[:, None], q)
        return CipherVector(data, level, ciphertext.scale * scale, ciphertext.slots)

    def rescale(self, ciphertext):
        """
        Divide by the top prime of the current level and drop it.

        Raises LevelExhaustedError at level 0.
        """
        if ciphertext.level == 0:
            raise LevelExhaustedError()
        top = ciphertext.level
        q_top = self.data_primes[top]
        last = ciphertext.data[..., top, :].astype(np.int64)
        last = np.where(last > q_top // 2, last - q_top, last)
        q = self._qcol(top - 1)
        last_mod = np.mod(last[..., None, :], q.astype(np.int64)).astype(np.uint64)
        inverses = np.array([pow(q_top, -1, qi) for qi in self.data_primes[:top]], dtype=np.uint64)
        rest = ciphertext.data[..., :top, :]
        data = mul_mod(sub_mod(rest, last_mod, q), inverses[:, None], q)
        return CipherVector(data, top - 1, ciphertext.scale / q_top, ciphertext.slots)

    def encrypted_linear(self, ciphertext, weights, bias):
        """
        out_j = sum_i w[j, i] * ct_i + b[j], then one rescale.

        Args:
            ciphertext: CipherVector with `in_features` members
            weights: plaintext matrix [out_features, in_features]
            bias: plaintext vector [out_features]

        Returns:
            CipherVector with `out_features` members at level - 1
        """
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        out_features, in_features = weights.shape
        if in_features != ciphertext.features:
            raise DimensionError('in_features', in_features, ciphertext.features, 'encrypted_linear')
        if bias.shape != (out_features,):
            raise DimensionError('bias', (out_features,), bias.shape, 'encrypted_linear')

        level = ciphertext.level
        w_rns = self._to_rns(self._round_scaled(weights, self.scale, level), level)
        flat = ciphertext.data.reshape(in_features, 2, level + 1, self.n)
        rows = []
        for l, q in enumerate(self.data_primes[:level + 1]):
            members = flat[:, :, l, :].reshape(in_features, 2 * self.n)
            rows.append(matmul_mod(w_rns[:, l, :], members, q).reshape(out_features, 2, self.n))
        product = CipherVector(np.stack(rows, axis=2), level, ciphertext.scale * self.scale,
                               ciphertext.slots)

        bias_slots = np.broadcast_to(bias, (ciphertext.slots, out_features))
        bias_pt = self.encode(bias_slots, scale=product.scale, level=level)
        return self.rescale(self.add_plain(product, bias_pt))

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------

    def to_bytes(self):
        """
        b"CKKS" | version u8 | kind u8 (0 public) | flags u8 | parameters |
        pk0, pk1 as u64 [primes, P] in evaluation form
        """
        flags = 1 if self.noise_free else 0
        header = CONTEXT_MAGIC + struct.pack('<BBB', WIRE_VERSION, 0, flags) + _params_block(self.params)
        return header + np.ascontiguousarray(self.public_key, dtype='<u8').tobytes()

    @classmethod
    def from_bytes(cls, buf, rng=None):
        if bytes(buf[:4]) != CONTEXT_MAGIC:
            raise ProtocolError("payload is not a serialized CKKS context")
        version, kind, flags = struct.unpack_from('<BBB', buf, 4)
        if version != WIRE_VERSION or kind != 0:
            raise ProtocolError(f"unsupported context version {version} / kind {kind}")
        params, offset = _read_params_block(buf, 7)
        primes = chain_primes(params.poly_modulus, params.coeff_mod_bits)[:-1]
        shape = (2, len(primes), params.poly_modulus)
        expected = offset + 8 * int(np.prod(shape))
        if len(buf) != expected:
            raise IncompleteFrameError(expected, len(buf))
        pk = np.frombuffer(buf, dtype='<u8', offset=offset).reshape(shape).astype(np.uint64)
        return cls(params, pk, rng=rng, noise_free=bool(flags & 1))


class PrivateContext(PublicContext):
    """Public context plus the ternary secret key; stays with the data owner."""

    def __init__(self, params, public_key, secret, rng=None, noise_free=False):
        super().__init__(params, public_key, rng=rng, noise_free=noise_free)
        self._secret = np.asarray(secret, dtype=np.int64)
        self._secret_ntt = self.tables.forward(self._to_rns(self._secret, self.max_level))

    def public(self, rng=None):
        """The shareable half: same parameters and public key, no secret."""
        return PublicContext(self.params, self.public_key, rng=rng, noise_free=self.noise_free)

    def decrypt(self, ciphertext):
        """
        c0 + c1 * s, decoded. Returns float64 [slots, features].

        Noise never raises here; values that outgrew the modulus decode to
        whatever the wrapped coefficients mean.
        """
        level = ciphertext.level
        q = self._qcol(level)
        out = []
        for start in range(0, ciphertext.features, FEATURE_CHUNK):
            block = ciphertext.data[start:start + FEATURE_CHUNK]
            c1_s = self.tables.inverse(mul_mod(self.tables.forward(block[:, 1]),
                                               self._secret_ntt[:level + 1], q))
            message = add_mod(block[:, 0], c1_s, q)
            out.append(self._decode_coeffs(self._lift(message), ciphertext.scale, ciphertext.slots))
        return np.concatenate(out, axis=1)

    def secret_to_bytes(self):
        """b"CKSK" | version u8 | parameters | s as u64 residues [primes, P]."""
        header = SECRET_MAGIC + struct.pack('<B', WIRE_VERSION) + _params_block(self.params)
        residues = self._to_rns(self._secret, self.max_level)
        return header + np.ascontiguousarray(residues, dtype='<u8').tobytes()

    @classmethod
    def from_parts(cls, public_bytes, secret_bytes, rng=None):
        public = PublicContext.from_bytes(public_bytes)
        if bytes(secret_bytes[:4]) != SECRET_MAGIC:
            raise ProtocolError("payload is not a serialized secret key")
        params, offset = _read_params_block(secret_bytes, 5)
        if params != public.params:
            raise ParameterError('params', "secret key and public context disagree")
        residues = np.frombuffer(secret_bytes, dtype='<u8', offset=offset)
        first = residues[:params.poly_modulus].astype(np.int64)
        q0 = public.data_primes[0]
        secret = np.where(first > q0 // 2, first - q0, first)
        return cls(params, public.public_key, secret, rng=rng, noise_free=public.noise_free)


def keygen(params, seed=None, noise_free=False):
    """
    Generate a key pair and wrap it in the two contexts.

    Keys are deterministic given `seed`; encryption randomness is drawn from
    child streams of the same seed. `noise_free` zeroes every Gaussian error
    term (test-only; ciphertexts stay randomized through u).

    Returns:
        tuple: (PublicContext, PrivateContext)
    """
    params.validate()
    _check_security(params)
    key_seq, pub_seq, pri_seq = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(key_seq)

    n = params.poly_modulus
    primes = chain_primes(n, params.coeff_mod_bits)[:-1]
    tables = ntt_tables(n, primes)
    q = np.array(primes, dtype=np.uint64)[:, None]

    secret = _ternary(rng, n)
    secret_rns = np.stack([np.mod(secret, np.int64(p)).astype(np.uint64) for p in primes])
    error = _gaussian(rng, n, noise_free)
    error_rns = np.stack([np.mod(error, np.int64(p)).astype(np.uint64) for p in primes])
    # uniform in evaluation form is uniform in coefficient form
    a = np.stack([rng.integers(0, p, size=n, dtype=np.uint64) for p in primes])

    pk0 = sub_mod(tables.forward(error_rns), mul_mod(a, tables.forward(secret_rns), q), q)
    public_key = np.stack([pk0, a])

    logger.info("Generated CKKS keys: P=%d, chain=%s, scale=2^%d, slots=%d",
                n, list(params.coeff_mod_bits), params.scale_bits, n // 2)
    private = PrivateContext(params, public_key, secret,
                             rng=np.random.default_rng(pri_seq), noise_free=noise_free)
    public = private.public(rng=np.random.default_rng(pub_seq))
    return public, private
