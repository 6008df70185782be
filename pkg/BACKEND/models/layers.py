"""
Neural Network Layers for SplitHE

Hand-written forward/backward passes for the layers model M1 needs:
Conv1D, LeakyReLU, MaxPool1D, Flatten, Linear and the softmax
cross-entropy loss. Tensors are plain numpy arrays; training state is
binary32, and every op also accepts binary64 so gradients can be checked
against finite differences.

Each op exists twice:
- a pure function (conv1d_forward, conv1d_backward, ...) taking explicit
  inputs and parameters
- a Layer class that caches what its backward pass needs

Layout conventions:
- 1D feature maps are [batch, channels, time]
- Conv1D weights are [out_channels, in_channels, kernel]
- Linear weights are [out_features, in_features]
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, InvalidStateError, UsageError

DTYPE = np.float32


@dataclass
class LayerParams:
    """
    Weights, biases, their gradients and the optimizer state of one layer.

    `state` is owned by the optimizer (moment accumulators, step counter).
    """
    w: np.ndarray
    b: np.ndarray
    grad_w: np.ndarray = None
    grad_b: np.ndarray = None
    state: dict = field(default_factory=dict)

    def zero_grad(self):
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)

    def astype(self, dtype):
        """Copy of the parameters in another dtype (used by gradient checks)."""
        return LayerParams(self.w.astype(dtype), self.b.astype(dtype))


def _require_ndim(x, ndim, names, where):
    if x.ndim != ndim:
        raise DimensionError('ndim', f"{ndim} {names}", x.ndim, where)


# ============================================================================
# CONV1D
# ============================================================================

def _conv_windows(x, kernel, stride, padding):
    """Padded input and its [n, C, T', m] sliding windows."""
    x_pad = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(x_pad, kernel, axis=2)[:, :, ::stride, :]
    return x_pad, windows


def conv1d_forward(x, params, stride=1, padding=0):
    """
    1D cross-correlation: out[:, j] = b[j] + sum_i w[j, i] * x[:, i].

    Args:
        x: input [n, C, T]
        params: LayerParams with w [C', C, m] and b [C']

    Returns:
        np.ndarray: [n, C', T'] with T' = floor((T + 2*padding - m) / stride) + 1
    """
    _require_ndim(x, 3, '[batch, channels, time]', 'conv1d')
    out_channels, in_channels, kernel = params.w.shape
    if x.shape[1] != in_channels:
        raise DimensionError('channels', in_channels, x.shape[1], 'conv1d')
    if kernel > x.shape[2] + 2 * padding:
        raise DimensionError('time', f">= {kernel - 2 * padding}", x.shape[2], 'conv1d')
    if params.b.shape != (out_channels,):
        raise DimensionError('bias', (out_channels,), params.b.shape, 'conv1d')

    _, windows = _conv_windows(x, kernel, stride, padding)
    out = np.einsum('nctm,ocm->not', windows, params.w)
    return out + params.b[None, :, None]


def conv1d_backward(grad_out, cached_input, params, stride=1, padding=0):
    """
    Gradients of conv1d_forward.

    Returns:
        tuple: (grad_input [n, C, T], grad_w [C', C, m], grad_b [C'])
    """
    if cached_input is None:
        raise InvalidStateError("conv1d backward called without a cached forward input")
    out_channels, _, kernel = params.w.shape
    x_pad, windows = _conv_windows(cached_input, kernel, stride, padding)
    if grad_out.shape != (cached_input.shape[0], out_channels, windows.shape[2]):
        raise DimensionError('grad_out', (cached_input.shape[0], out_channels, windows.shape[2]),
                             grad_out.shape, 'conv1d backward')

    grad_w = np.einsum('not,nctm->ocm', grad_out, windows)
    grad_b = grad_out.sum(axis=(0, 2))

    grad_windows = np.einsum('not,ocm->nctm', grad_out, params.w)
    grad_pad = np.zeros(x_pad.shape, dtype=grad_windows.dtype)
    span = stride * (windows.shape[2] - 1) + 1
    for k in range(kernel):
        grad_pad[:, :, k:k + span:stride] += grad_windows[..., k]
    grad_input = grad_pad[:, :, padding:padding + cached_input.shape[2]]
    return grad_input, grad_w, grad_b


# ============================================================================
# LEAKY RELU
# ============================================================================

def leaky_relu_forward(x, slope=0.01):
    return np.where(x >= 0, x, x * slope)


def leaky_relu_backward(grad_out, cached_input, slope=0.01):
    if cached_input is None:
        raise InvalidStateError("leaky_relu backward called without a cached forward input")
    return np.where(cached_input >= 0, grad_out, grad_out * slope)


# ============================================================================
# MAX POOL 1D
# ============================================================================

def maxpool1d_forward(x, width=2, stride=2):
    """
    Windowed maxima along time.

    Ties go to the first maximal index in the window.

    Returns:
        tuple: (output [n, C, T'], argmax [n, C, T'] absolute time indices)
    """
    if width < 1:
        raise UsageError('width', "pool width must be >= 1")
    if stride < 1:
        raise UsageError('stride', "pool stride must be >= 1")
    _require_ndim(x, 3, '[batch, channels, time]', 'maxpool1d')
    if width > x.shape[2]:
        raise DimensionError('time', f">= {width}", x.shape[2], 'maxpool1d')

    windows = sliding_window_view(x, width, axis=2)[:, :, ::stride, :]
    local = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    argmax = local + np.arange(windows.shape[2])[None, None, :] * stride
    return out, argmax


def maxpool1d_backward(grad_out, argmax, input_shape):
    """Route every upstream gradient to the cached argmax position."""
    if argmax is None:
        raise InvalidStateError("maxpool1d backward called without a cached argmax")
    grad_input = np.zeros(input_shape, dtype=grad_out.dtype)
    n_idx, c_idx, _ = np.indices(argmax.shape)
    np.add.at(grad_input, (n_idx, c_idx, argmax), grad_out)
    return grad_input


# ============================================================================
# LINEAR
# ============================================================================

def linear_forward(a, params):
    """a [n, in] -> a . w^T + b  [n, out]"""
    _require_ndim(a, 2, '[batch, features]', 'linear')
    out_features, in_features = params.w.shape
    if a.shape[1] != in_features:
        raise DimensionError('features', in_features, a.shape[1], 'linear')
    if params.b.shape != (out_features,):
        raise DimensionError('bias', (out_features,), params.b.shape, 'linear')
    return a @ params.w.T + params.b


def linear_backward(grad_out, cached_input, params):
    """
    Gradients of linear_forward.

    grad_w = grad_out^T . a, grad_b = batch sum of grad_out,
    grad_input = grad_out . w (with the weights as they are when called).
    """
    if cached_input is None:
        raise InvalidStateError("linear backward called without a cached forward input")
    if grad_out.shape != (cached_input.shape[0], params.w.shape[0]):
        raise DimensionError('grad_out', (cached_input.shape[0], params.w.shape[0]),
                             grad_out.shape, 'linear backward')
    grad_w = grad_out.T @ cached_input
    grad_b = grad_out.sum(axis=0)
    grad_input = grad_out @ params.w
    return grad_input, grad_w, grad_b


# ============================================================================
# SOFTMAX + CROSS ENTROPY
# ============================================================================

def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """
    Softmax followed by mean cross-entropy over the batch.

    Returns:
        tuple: (probabilities [n, k], loss J, dJ/dlogits [n, k])
    """
    _require_ndim(logits, 2, '[batch, classes]', 'softmax_cross_entropy')
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError('labels', (n,), labels.shape, 'softmax_cross_entropy')
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise UsageError('labels', f"label outside 0..{classes - 1}")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())

    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1
    grad = (probs - onehot) / n
    return probs, loss, grad


# ============================================================================
# LAYER CLASSES
# ============================================================================

class Layer:
    """Base class: layers cache their forward input for the backward pass."""

    kind = 'layer'

    def __init__(self):
        self._cache = None

    @property
    def params(self):
        """LayerParams for trainable layers, None otherwise."""
        return None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, input_shape):
        """Shape (without batch axis) produced from `input_shape`."""
        return input_shape

    def _cached(self):
        if self._cache is None:
            raise InvalidStateError(f"{self.kind}: backward called before forward")
        return self._cache


class Conv1D(Layer):
    kind = 'conv1d'

    def __init__(self, params, stride=1, padding=0):
        super().__init__()
        self._params = params
        self.stride = stride
        self.padding = padding

    @property
    def params(self):
        return self._params

    def forward(self, x):
        self._cache = x
        return conv1d_forward(x, self._params, self.stride, self.padding)

    def backward(self, grad_out):
        grad_input, grad_w, grad_b = conv1d_backward(grad_out, self._cached(), self._params,
                                                     self.stride, self.padding)
        self._params.grad_w = grad_w
        self._params.grad_b = grad_b
        return grad_input

    def output_shape(self, input_shape):
        _, time = input_shape
        out_channels, _, kernel = self._params.w.shape
        return out_channels, (time + 2 * self.padding - kernel) // self.stride + 1


class LeakyReLU(Layer):
    kind = 'leaky_relu'

    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        self._cache = x
        return leaky_relu_forward(x, self.slope)

    def backward(self, grad_out):
        return leaky_relu_backward(grad_out, self._cached(), self.slope)


class MaxPool1D(Layer):
    kind = 'maxpool1d'

    def __init__(self, width=2, stride=2):
        super().__init__()
        self.width = width
        self.stride = stride

    def forward(self, x):
        out, argmax = maxpool1d_forward(x, self.width, self.stride)
        self._cache = (argmax, x.shape)
        return out

    def backward(self, grad_out):
        argmax, shape = self._cached()
        return maxpool1d_backward(grad_out, argmax, shape)

    def output_shape(self, input_shape):
        channels, time = input_shape
        return channels, (time - self.width) // self.stride + 1


class Flatten(Layer):
    kind = 'flatten'

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cached())

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Linear(Layer):
    kind = 'linear'

    def __init__(self, params):
        super().__init__()
        self._params = params

    @property
    def params(self):
        return self._params

    def forward(self, a):
        self._cache = a
        return linear_forward(a, self._params)

    def backward(self, grad_out):
        grad_input, grad_w, grad_b = linear_backward(grad_out, self._cached(), self._params)
        self._params.grad_w = grad_w
        self._params.grad_b = grad_b
        return grad_input

    def output_shape(self, input_shape):
        return (self._params.w.shape[0],)
