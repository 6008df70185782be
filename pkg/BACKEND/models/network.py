"""
Model M1 and its Client/Server Halves

ModelSpec describes the layer graph once; build_layers() turns it into
layer objects with weights drawn from a seeded generator so that the
local model, the client half and the server half all start from the same
initialization Phi.

    input [n, 1, 128]
      Conv1D(1->8, m=5, pad=2) -> LeakyReLU -> MaxPool(2, 2)
      Conv1D(8->8, m=5, pad=2) -> LeakyReLU -> MaxPool(2, 2)
      Flatten                                   <- split layer l: [n, 256]
    ---------------------------------------------- client | server
      Linear(256 -> 5)                          <- layer L
    ---------------------------------------------- server | client
      Softmax + cross-entropy

Checkpoints use a small binary format:
    b"SFHE" | version u8 | layer count u32 |
    per trainable layer: (ndim u32, dims u32..., binary32 data) for w, then for b
All integers and floats are little-endian.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from errors import DimensionError, InvalidStateError, UsageError
from layers import DTYPE, Conv1D, Flatten, LayerParams, LeakyReLU, Linear, MaxPool1D, softmax

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SFHE'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor: a kind plus its hyperparameters."""
    kind: str
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ModelSpec:
    """
    Ordered layer graph with the split index.

    Attributes:
        layers: layer descriptors, client-side first
        split_index: index of the last client-side layer (l)
        input_shape: (channels, time) of one sample
        split_features: width of the flattened activation at layer l
        num_classes: outputs of the final Linear layer
    """
    layers: tuple
    split_index: int
    input_shape: tuple = (1, 128)
    split_features: int = 256
    num_classes: int = 5

    @classmethod
    def m1(cls, slope=0.01):
        """The two-Conv1D, one-Linear network used throughout."""
        return cls(
            layers=(
                LayerSpec('conv1d', {'in_channels': 1, 'out_channels': 8, 'kernel': 5, 'stride': 1, 'padding': 2}),
                LayerSpec('leaky_relu', {'slope': slope}),
                LayerSpec('maxpool1d', {'width': 2, 'stride': 2}),
                LayerSpec('conv1d', {'in_channels': 8, 'out_channels': 8, 'kernel': 5, 'stride': 1, 'padding': 2}),
                LayerSpec('leaky_relu', {'slope': slope}),
                LayerSpec('maxpool1d', {'width': 2, 'stride': 2}),
                LayerSpec('flatten'),
                LayerSpec('linear', {'in_features': 256, 'out_features': 5}),
            ),
            split_index=6,
        )

    @property
    def depth(self):
        """Index L of the last layer."""
        return len(self.layers) - 1

    @property
    def client_specs(self):
        return self.layers[:self.split_index + 1]

    @property
    def server_specs(self):
        return self.layers[self.split_index + 1:]

    def validate(self):
        """
        Check the shape contract: the split activation has `split_features`
        values and exactly one Linear layer follows it.
        """
        server = self.server_specs
        if len(server) != 1 or server[0].kind != 'linear':
            raise UsageError('layers', "exactly one Linear layer must follow the split layer")
        layers = build_layers(self, seed=0)
        shape = tuple(self.input_shape)
        for layer in layers[:self.split_index + 1]:
            shape = layer.output_shape(shape)
        if shape != (self.split_features,):
            raise DimensionError('split', (self.split_features,), shape, 'ModelSpec')
        if server[0].options['in_features'] != self.split_features:
            raise DimensionError('in_features', self.split_features,
                                 server[0].options['in_features'], 'ModelSpec')
        if server[0].options['out_features'] != self.num_classes:
            raise DimensionError('out_features', self.num_classes,
                                 server[0].options['out_features'], 'ModelSpec')
        return True


def _uniform(rng, shape, fan_in, zero_init):
    if zero_init:
        return np.zeros(shape, dtype=DTYPE)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def build_layers(spec, seed, zero_init=False):
    """
    Instantiate every layer of `spec`.

    Weights and biases are uniform in +-1/sqrt(fan_in), drawn in layer order
    from one generator seeded with `seed`. Both parties call this with the
    same seed and keep only their own half.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for layer_spec in spec.layers:
        opts = layer_spec.options
        if layer_spec.kind == 'conv1d':
            w_shape = (opts['out_channels'], opts['in_channels'], opts['kernel'])
            fan_in = opts['in_channels'] * opts['kernel']
            params = LayerParams(_uniform(rng, w_shape, fan_in, zero_init),
                                 _uniform(rng, (opts['out_channels'],), fan_in, zero_init))
            layers.append(Conv1D(params, opts.get('stride', 1), opts.get('padding', 0)))
        elif layer_spec.kind == 'leaky_relu':
            layers.append(LeakyReLU(opts.get('slope', 0.01)))
        elif layer_spec.kind == 'maxpool1d':
            layers.append(MaxPool1D(opts.get('width', 2), opts.get('stride', 2)))
        elif layer_spec.kind == 'flatten':
            layers.append(Flatten())
        elif layer_spec.kind == 'linear':
            w_shape = (opts['out_features'], opts['in_features'])
            fan_in = opts['in_features']
            params = LayerParams(_uniform(rng, w_shape, fan_in, zero_init),
                                 _uniform(rng, (opts['out_features'],), fan_in, zero_init))
            layers.append(Linear(params))
        else:
            raise UsageError('layers', f"unknown layer kind '{layer_spec.kind}'")
    return layers


# ============================================================================
# MODEL HALVES
# ============================================================================

class _Stack:
    """Sequential container shared by the client and server halves."""

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def layer_params(self):
        return [layer.params for layer in self.layers if layer.params is not None]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def save(self, path):
        save_checkpoint(path, self.layer_params)

    def load(self, path):
        load_checkpoint(path, self.layer_params)


class ClientModel(_Stack):
    """Layers 1..l: the convolutional feature extractor."""

    @classmethod
    def from_spec(cls, spec, seed, zero_init=False):
        return cls(build_layers(spec, seed, zero_init)[:spec.split_index + 1])

    def forward_to_split(self, x):
        """x [n, 1, 128] -> a^(l) [n, 256]"""
        return self.forward(x)

    def feature_maps(self, x):
        """Split-layer activation before flattening: [n, channels, time]."""
        for layer in self.layers:
            if isinstance(layer, Flatten):
                break
            x = layer.forward(x)
        return x


class ServerModel(_Stack):
    """The single Linear layer L."""

    @classmethod
    def from_spec(cls, spec, seed, zero_init=False):
        return cls(build_layers(spec, seed, zero_init)[spec.split_index + 1:])

    @property
    def linear(self):
        return self.layers[0]

    @property
    def params(self):
        return self.linear.params


class LocalModel:
    """The unsplit network: client half followed by server half."""

    def __init__(self, client, server):
        self.client = client
        self.server = server

    @classmethod
    def from_spec(cls, spec, seed, zero_init=False):
        layers = build_layers(spec, seed, zero_init)
        return cls(ClientModel(layers[:spec.split_index + 1]),
                   ServerModel(layers[spec.split_index + 1:]))

    def logits(self, x):
        return self.server.forward(self.client.forward(x))

    def forward(self, x):
        """x -> y_hat (softmax probabilities)."""
        return softmax(self.logits(x))

    def save(self, client_path, server_path):
        self.client.save(client_path)
        self.server.save(server_path)

    def load(self, client_path, server_path):
        self.client.load(client_path)
        self.server.load(server_path)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def _pack_array(arr):
    arr = np.ascontiguousarray(arr, dtype='<f4')
    header = struct.pack('<I', arr.ndim) + struct.pack(f'<{arr.ndim}I', *arr.shape)
    return header + arr.tobytes()


def _require_bytes(buf, offset, size):
    if offset + size > len(buf):
        raise InvalidStateError(f"truncated checkpoint: need {offset + size} bytes, have {len(buf)}")


def _unpack_array(buf, offset):
    _require_bytes(buf, offset, 4)
    (ndim,) = struct.unpack_from('<I', buf, offset)
    offset += 4
    _require_bytes(buf, offset, 4 * ndim)
    shape = struct.unpack_from(f'<{ndim}I', buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    _require_bytes(buf, offset, 4 * count)
    data = np.frombuffer(buf, dtype='<f4', count=count, offset=offset).reshape(shape)
    return data.astype(DTYPE), offset + 4 * count


def checkpoint_bytes(layer_params):
    out = [CHECKPOINT_MAGIC, struct.pack('<BI', CHECKPOINT_VERSION, len(layer_params))]
    for p in layer_params:
        out.append(_pack_array(p.w))
        out.append(_pack_array(p.b))
    return b''.join(out)


def save_checkpoint(path, layer_params):
    with open(path, 'wb') as f:
        f.write(checkpoint_bytes(layer_params))
    logger.info("Checkpoint written: %s (%d layers)", path, len(layer_params))


def load_checkpoint_bytes(buf, layer_params):
    """Fill `layer_params` in place from checkpoint bytes, checking every shape."""
    if buf[:4] != CHECKPOINT_MAGIC:
        raise InvalidStateError("not a SFHE checkpoint (bad magic bytes)")
    _require_bytes(buf, 4, 5)
    version, count = struct.unpack_from('<BI', buf, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidStateError(f"unsupported checkpoint version {version}")
    if count != len(layer_params):
        raise DimensionError('layers', len(layer_params), count, 'checkpoint')
    offset = 9
    for i, p in enumerate(layer_params):
        w, offset = _unpack_array(buf, offset)
        b, offset = _unpack_array(buf, offset)
        if w.shape != p.w.shape:
            raise DimensionError(f'layer{i}.w', p.w.shape, w.shape, 'checkpoint')
        if b.shape != p.b.shape:
            raise DimensionError(f'layer{i}.b', p.b.shape, b.shape, 'checkpoint')
        p.w[...] = w
        p.b[...] = b


def load_checkpoint(path, layer_params):
    try:
        with open(path, 'rb') as f:
            buf = f.read()
    except FileNotFoundError:
        raise UsageError('checkpoint', f"checkpoint not found: {path}")
    load_checkpoint_bytes(buf, layer_params)
