"""
Configuration Module for SplitHE

Two kinds of settings live here:

1. Environment settings (Config and its children). Class attributes read
   os.environ after python-dotenv has loaded a local .env file; each child
   class overrides what differs for its environment. get_config() picks
   one by name.
2. Run settings: HEParams (one CKKS parameter set) and TrainConfig (the
   hyperparameters client and server agree on during SYNC), loaded from
   the JSON file given with --config.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, replace

from dotenv import load_dotenv

from errors import ParameterError, UsageError

load_dotenv()

# Get the base directory of the application
basedir = os.path.abspath(os.path.dirname(__file__))
ROOT_DIR = os.path.abspath(os.path.join(basedir, '..', '..'))

PROTOCOL_VERSION = 1
MODES = ('plain', 'encrypted')
ALLOWED_POLY_MODULI = (2048, 4096, 8192)


# ============================================================================
# ENVIRONMENT SETTINGS
# ============================================================================

class Config:
    """
    Base configuration shared by every environment.
    """

    ENV_NAME = 'base'

    LOG_LEVEL = os.environ.get('SPLITHE_LOG_LEVEL', 'INFO')
    SHOW_PROGRESS = True

    # Default dataset: the converted MIT-BIH CSV when present, synthetic otherwise
    DATA_PATH = os.environ.get('SPLITHE_DATA') or 'synth:1000:0'
    OUT_DIR = os.environ.get('SPLITHE_OUT_DIR') or os.path.join(ROOT_DIR, 'DATABASE', 'runs')

    # Client/server endpoint
    HOST = os.environ.get('SPLITHE_HOST', '127.0.0.1')
    PORT = int(os.environ.get('SPLITHE_PORT', 5757))
    SOCKET_TIMEOUT = float(os.environ.get('SPLITHE_SOCKET_TIMEOUT', 600))

    # Training defaults (used when the JSON config omits a key)
    ETA = 0.001
    BATCH_SIZE = 4
    EPOCHS = 10
    SEED = 0

    # Evaluation and bench
    EVAL_BATCH_SIZE = 256
    BENCH_BATCHES = 10


class DevelopmentConfig(Config):
    """Local desk runs on synthetic data with verbose logs."""

    ENV_NAME = 'development'
    LOG_LEVEL = os.environ.get('SPLITHE_LOG_LEVEL', 'DEBUG')
    EPOCHS = 2


class MitbihConfig(Config):
    """Full MIT-BIH runs: the converted CSV, ten epochs."""

    ENV_NAME = 'mitbih'
    DATA_PATH = os.environ.get('SPLITHE_DATA') or os.path.join(ROOT_DIR, 'DATABASE', 'mitbih.csv')


class TestingConfig(Config):
    """Automated tests: quiet, short timeouts, no progress bars."""

    ENV_NAME = 'testing'
    LOG_LEVEL = 'WARNING'
    SHOW_PROGRESS = False
    SOCKET_TIMEOUT = 60.0
    EPOCHS = 2
    BENCH_BATCHES = 2


config = {
    'development': DevelopmentConfig,
    'mitbih': MitbihConfig,
    'testing': TestingConfig,
    'default': Config,
}


def get_config(config_name=None):
    """
    Return the Config class for `config_name` (or $SPLITHE_ENV).

    Unknown names fall back to the default configuration.
    """
    config_name = config_name or os.environ.get('SPLITHE_ENV', 'default')
    return config.get(config_name, config['default'])


# ============================================================================
# HE PARAMETERS
# ============================================================================

@dataclass(frozen=True)
class HEParams:
    """
    One CKKS parameter set.

    Attributes:
        poly_modulus: ring degree P (power of two)
        coeff_mod_bits: bit sizes of the modulus chain C; the last prime is
            the special prime, the others carry data
        scale_bits: log2 of the scale Delta
    """
    poly_modulus: int
    coeff_mod_bits: tuple
    scale_bits: int

    def __post_init__(self):
        object.__setattr__(self, 'coeff_mod_bits', tuple(int(b) for b in self.coeff_mod_bits))

    @property
    def scale(self):
        return float(2 ** self.scale_bits)

    @property
    def slot_capacity(self):
        return self.poly_modulus // 2

    @property
    def data_bits(self):
        """Bit sizes of the primes a fresh ciphertext lives under."""
        return self.coeff_mod_bits[:-1]

    def validate(self):
        """
        Raise ParameterError unless the set is usable.

        - P is a supported power of two
        - the chain has at least 3 primes (base, one multiply, special)
        - every prime fits in 61 bits
        """
        n = self.poly_modulus
        if n <= 0 or n & (n - 1):
            raise ParameterError('poly_modulus', f"{n} is not a power of two")
        if n not in ALLOWED_POLY_MODULI:
            raise ParameterError('poly_modulus', f"{n} not in {ALLOWED_POLY_MODULI}")
        if len(self.coeff_mod_bits) < 3:
            raise ParameterError('coeff_mod_bits', f"chain {list(self.coeff_mod_bits)} is shorter than 3")
        for bits in self.coeff_mod_bits:
            if not 2 + int(math.log2(2 * n)) <= bits <= 61:
                raise ParameterError('coeff_mod_bits', f"prime size {bits} outside {2 + int(math.log2(2 * n))}..61")
        if not 1 <= self.scale_bits < 61:
            raise ParameterError('scale_bits', f"{self.scale_bits} outside 1..60")
        return True

    def to_dict(self):
        return {
            'poly_modulus': self.poly_modulus,
            'coeff_mod_bits': list(self.coeff_mod_bits),
            'scale_bits': self.scale_bits,
        }

    @classmethod
    def from_dict(cls, data):
        if 'preset' in data:
            return cls.from_preset(data['preset'])
        try:
            return cls(int(data['poly_modulus']), tuple(data['coeff_mod_bits']), int(data['scale_bits']))
        except KeyError as e:
            raise UsageError(f"he.{e.args[0]}", "missing key")

    @classmethod
    def from_preset(cls, name):
        try:
            return HE_PRESETS[name]
        except KeyError:
            raise UsageError('he.preset', f"unknown preset '{name}' (expected one of {sorted(HE_PRESETS)})")


# Named CKKS parameter sets
HE_PRESETS = {
    'p8192-60-40-40-60': HEParams(8192, (60, 40, 40, 60), 40),
    'p8192-40-21-21-40': HEParams(8192, (40, 21, 21, 40), 21),
    'p4096-40-20-20': HEParams(4096, (40, 20, 20), 21),
    'p4096-40-20-40': HEParams(4096, (40, 20, 40), 20),
    'p2048-18-18-18': HEParams(2048, (18, 18, 18), 16),
}


# ============================================================================
# TRAINING CONFIGURATION
# ============================================================================

@dataclass
class TrainConfig:
    """
    Hyperparameters both parties must hold identically after SYNC.

    Attributes:
        mode: 'plain' or 'encrypted'
        eta: learning rate
        batch_size: n
        epochs: E
        seed: Phi, the initialization seed (also drives batch shuffling)
        num_batches: N per epoch; filled in by the data owner
        he: HEParams, required in encrypted mode
        encrypted_eval: evaluate the test set through the encrypted layer
        client_optimizer / server_optimizer: 'adam' or 'sgd'
    """
    mode: str = 'plain'
    eta: float = Config.ETA
    batch_size: int = Config.BATCH_SIZE
    epochs: int = Config.EPOCHS
    seed: int = Config.SEED
    num_batches: int = None
    he: HEParams = None
    encrypted_eval: bool = False
    client_optimizer: str = 'adam'
    server_optimizer: str = 'sgd'

    def __post_init__(self):
        self.validate()

    @property
    def encrypted(self):
        return self.mode == 'encrypted'

    def validate(self):
        if self.mode not in MODES:
            raise UsageError('mode', f"'{self.mode}' is not one of {MODES}")
        if not self.eta > 0:
            raise UsageError('eta', "learning rate must be > 0")
        if int(self.batch_size) < 1:
            raise UsageError('batch_size', "must be >= 1")
        if int(self.epochs) < 1:
            raise UsageError('epochs', "must be >= 1")
        if int(self.seed) < 0:
            raise UsageError('seed', "must be >= 0")
        if self.num_batches is not None and int(self.num_batches) < 1:
            raise UsageError('num_batches', "must be >= 1")
        for name in ('client_optimizer', 'server_optimizer'):
            if getattr(self, name) not in ('adam', 'sgd'):
                raise UsageError(name, f"'{getattr(self, name)}' is not 'adam' or 'sgd'")
        if self.encrypted:
            if self.he is None:
                raise UsageError('he', "encrypted mode needs HE parameters")
            self.he.validate()
            if self.batch_size > self.he.slot_capacity:
                raise UsageError('batch_size', f"{self.batch_size} exceeds slot capacity {self.he.slot_capacity}")
        if self.encrypted_eval and not self.encrypted:
            raise UsageError('encrypted_eval', "only available in encrypted mode")
        return True

    def with_batches(self, num_batches):
        return replace(self, num_batches=int(num_batches))

    def to_dict(self):
        data = asdict(self)
        data['he'] = self.he.to_dict() if self.he else None
        return data

    def to_wire(self):
        """Canonical JSON bytes used for the SYNC echo-compare."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':')).encode('utf-8')

    @classmethod
    def from_dict(cls, data, base=None):
        base = base or Config
        he = data.get('he')
        try:
            return cls(
                mode=data.get('mode', 'plain'),
                eta=float(data.get('eta', base.ETA)),
                batch_size=int(data.get('batch_size', base.BATCH_SIZE)),
                epochs=int(data.get('epochs', base.EPOCHS)),
                seed=int(data.get('seed', base.SEED)),
                num_batches=data.get('num_batches'),
                he=HEParams.from_dict(he) if he else None,
                encrypted_eval=bool(data.get('encrypted_eval', False)),
                client_optimizer=data.get('client_optimizer', 'adam'),
                server_optimizer=data.get('server_optimizer', 'sgd'),
            )
        except (TypeError, ValueError) as e:
            raise UsageError('config', str(e))

    @classmethod
    def from_wire(cls, payload):
        try:
            return cls.from_dict(json.loads(payload.decode('utf-8')))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise UsageError('config', f"undecodable SYNC payload: {e}")


def load_train_config(path=None, base=None):
    """
    Read a JSON run config.

    Keys: mode, eta, batch_size, epochs, seed,
          he: {poly_modulus, coeff_mod_bits, scale_bits} or {preset}
    Missing keys take the Config class defaults; no path gives all defaults.
    """
    if path is None:
        return TrainConfig.from_dict({}, base)
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise UsageError('config', f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError('config', f"invalid JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise UsageError('config', "top-level JSON value must be an object")
    return TrainConfig.from_dict(data, base)
