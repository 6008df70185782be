"""
Optimizers for SplitHE

- Adam (bias-corrected, the client-side default)
- plain mini-batch gradient descent (the server-side update rule)

Both update LayerParams in place. Arithmetic stays in the parameters' own
dtype so that two runs with the same seed produce identical binary32
trajectories.
"""

import numpy as np

from errors import UsageError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sgd_step(params, grads, lr):
    """
    w <- w - lr * dJ/dw for every (param, grad) pair, in place.

    Args:
        params: list of arrays to update
        grads: list of gradient arrays with matching shapes
        lr: learning rate
    """
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise UsageError('grads', f"gradient shape {g.shape} does not match parameter {p.shape}")
        p -= lr * g


def adam_step(params, grads, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """
    One bias-corrected Adam update, in place.

    `state` holds 'step' and per-parameter 'm' / 'v' lists; it is created
    on first use with zeroed moments.
    """
    if 'step' not in state:
        state['step'] = 0
        state['m'] = [np.zeros_like(p) for p in params]
        state['v'] = [np.zeros_like(p) for p in params]

    state['step'] += 1
    t = state['step']
    correction1 = 1 - beta1 ** t
    correction2 = 1 - beta2 ** t

    for i, (p, g) in enumerate(zip(params, grads)):
        m = state['m'][i]
        v = state['v'][i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Optimizer:
    """Applies one update rule to a list of LayerParams."""

    def __init__(self, layer_params, lr):
        if lr <= 0:
            raise UsageError('eta', "learning rate must be positive")
        self.layer_params = list(layer_params)
        self.lr = lr

    def zero_grad(self):
        for p in self.layer_params:
            p.zero_grad()

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def step(self):
        for p in self.layer_params:
            sgd_step([p.w, p.b], [p.grad_w, p.grad_b], self.lr)


class Adam(Optimizer):
    def __init__(self, layer_params, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        super().__init__(layer_params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        for p in self.layer_params:
            adam_step([p.w, p.b], [p.grad_w, p.grad_b], p.state,
                      self.lr, self.beta1, self.beta2, self.eps)


OPTIMIZERS = {
    'adam': Adam,
    'sgd': SGD,
}


def make_optimizer(name, layer_params, lr):
    """Factory keyed by the config's optimizer name."""
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise UsageError('optimizer', f"unknown optimizer '{name}' (expected one of {sorted(OPTIMIZERS)})")
    return cls(layer_params, lr)
