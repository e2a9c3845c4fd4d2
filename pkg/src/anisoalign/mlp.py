"""Tiny dense network with explicit reverse-mode gradients.

Two hidden tanh layers are all the pipeline ever needs; gradients are
accumulated by hand so training stays dependency-free and bit-reproducible.
The backward pass can also return the gradient with respect to the inputs,
which the alignment stage needs to differentiate through a frozen network.
"""

import numpy as np

from .errors import InvalidInput


class MLP:
    def __init__(self, sizes, rng=None, zero_last=False):
        if len(sizes) < 2:
            raise InvalidInput("need at least input and output sizes")
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        if zero_last:
            self.weights[-1][:] = 0.0

    def forward(self, x, want_cache=False):
        h = np.asarray(x, dtype=np.float64)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
            acts.append(h)
        if want_cache:
            return h, acts
        return h

    def backward(self, cache, grad_out, want_input_grad=False):
        """Gradients of sum(grad_out * output) w.r.t. weights (and inputs)."""
        acts = cache
        g = np.asarray(grad_out, dtype=np.float64)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)  # tanh'
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            if i > 0 or want_input_grad:
                g = g @ self.weights[i].T
        if want_input_grad:
            return grads_w, grads_b, g
        return grads_w, grads_b

    def input_gradient(self, cache, grad_out):
        """Only the input gradient, weights untouched (for frozen networks)."""
        acts = cache
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            g = g @ self.weights[i].T
        return g

    def state(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def load_state(self, state):
        for i in range(len(self.weights)):
            self.weights[i] = np.array(state[f"w{i}"], dtype=np.float64)
            self.biases[i] = np.array(state[f"b{i}"], dtype=np.float64).ravel()


class Adam:
    """Adaptive-moment gradient descent over a list of parameter arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1 = 1.0 - self.beta1**self.t
        b2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1) / (np.sqrt(v / b2) + self.eps)


def mlp_params(net):
    return net.weights + net.biases
