"""Small feed-forward networks with hand-written reverse-mode gradients.

Hidden layers use ReLU and the output layer is linear. Everything is float64.
"""
import json
from pathlib import Path

import numpy as np

from ._validation import check_random_state
from .exceptions import LifecycleError, NumericError, ShapeError

CHECKPOINT_FORMAT = "hrtrade-mlp"
CHECKPOINT_VERSION = 1


class GradientTape:
    """Per-parameter gradients, aligned with ``Mlp.params``."""

    def __init__(self, grads):
        self.grads = [np.asarray(g, dtype=np.float64) for g in grads]

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)

    def scale(self, c):
        return GradientTape([g * c for g in self.grads])

    def __add__(self, other):
        return GradientTape([a + b for a, b in zip(self.grads, other.grads)])

    def flat(self):
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads])

    def is_finite(self):
        return all(np.all(np.isfinite(g)) for g in self.grads)


class Mlp:
    """Multilayer perceptron ``sizes[0] -> ... -> sizes[-1]``.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``X`` of shape
    ``(B, fan_in)`` maps to ``X @ W + b``.
    """

    def __init__(self, sizes, random_state=None, init="he", output_scale=1.0):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 1 or min(self.sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes!r}")
        rng = check_random_state(random_state)
        pairs = list(zip(self.sizes[:-1], self.sizes[1:]))
        self._bind(np.zeros(sum(a * b + b for a, b in pairs)))
        if init != "zeros":
            for j, W in enumerate(self.weights):
                W[...] = rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[0])
                if j == len(pairs) - 1:
                    W *= output_scale
        self._cache = None

    def _bind(self, flat):
        """Expose ``flat`` as per-layer weight and bias views."""
        self._flat = flat
        self.weights, self.biases = [], []
        pos = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(flat[pos : pos + a * b].reshape(a, b))
            pos += a * b
            self.biases.append(flat[pos : pos + b])
            pos += b

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def forward(self, x):
        """Evaluate the net on one input vector or a ``(B, n_in)`` batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ShapeError(f"expected input width {self.n_in}, got shape {x.shape}")
        acts = [X]
        pre = []
        h = X
        last = len(self.weights) - 1
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            h = z if j == last else np.maximum(z, 0.0)
            acts.append(h)
        self._cache = (acts, pre, single)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out) -> GradientTape:
        """Gradients of a scalar loss given ``dL/d(output)`` for the cached pass."""
        if self._cache is None:
            raise LifecycleError("backward() needs a preceding forward()")
        acts, pre, single = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ShapeError(f"output gradient shape {g.shape} != output shape {acts[-1].shape}")
        grads = []
        for j in range(len(self.weights) - 1, -1, -1):
            if j != len(self.weights) - 1:
                g = g * (pre[j] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[j].T @ g)
            if j:
                g = g @ self.weights[j].T
        grads.reverse()
        return GradientTape(grads)

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other._bind(self._flat.copy())
        other._cache = None
        return other

    def get_flat(self):
        return self._flat.copy()

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {flat.shape}")
        self._flat[...] = flat

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "sizes": self.sizes,
            "params": [p.ravel().tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ShapeError("not a supported network checkpoint")
        net = cls(d["sizes"], init="zeros")
        if len(d["params"]) != len(net.params):
            raise ShapeError("checkpoint layer count does not match sizes")
        for p, values in zip(net.params, d["params"]):
            arr = np.asarray(values, dtype=np.float64)
            if arr.size != p.size:
                raise ShapeError("checkpoint parameter shape does not match sizes")
            p[...] = arr.reshape(p.shape)
        if not np.all(np.isfinite(net.get_flat())):
            raise NumericError("checkpoint contains non-finite parameters")
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return (
            isinstance(other, Mlp)
            and self.sizes == other.sizes
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )


class Adam:
    """Adaptive-moment optimizer holding first/second moment estimates for one net."""

    def __init__(self, net, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.net = net
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = np.zeros_like(net._flat)
        self.v = np.zeros_like(net._flat)

    def step(self, tape: GradientTape):
        """Descend along ``tape`` (gradients of a loss to minimize)."""
        if len(tape) != len(self.net.params):
            raise ShapeError("gradient tape does not match the network")
        for p, g in zip(self.net.params, tape):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        g = tape.flat()
        self.t += 1
        b1, b2 = self.betas
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * g * g
        if self.lr:
            m_hat = self.m / (1.0 - b1**self.t)
            v_hat = self.v / (1.0 - b2**self.t)
            self.net._flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.net


def _readout(net, X, seed=12345):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((np.atleast_2d(X).shape[0], net.n_out))


def _forward_ext(params, X):
    """Extended-precision forward pass keeping every pre-activation."""
    h = X.astype(np.longdouble)
    acts, pre = [h], []
    n_layers = len(params) // 2
    for j in range(n_layers):
        z = h @ params[2 * j] + params[2 * j + 1]
        pre.append(z)
        h = z if j == n_layers - 1 else np.maximum(z, 0)
        acts.append(h)
    return acts, pre


def _output_shift(params, acts, pre, layer, is_bias, index, step):
    """Exact change of the network output when one parameter moves by ``step``.

    The difference is pushed forward layer by layer instead of subtracting two
    full forward passes, so small gradients are not drowned by round-off.
    """
    z = pre[layer]
    dz = np.zeros_like(z)
    if is_bias:
        dz[:, index] = step
    else:
        a, b = index
        dz[:, b] = acts[layer][:, a] * step
    n_layers = len(pre)
    for j in range(layer, n_layers):
        if j > layer:
            dz = dh @ params[2 * j]
        if j == n_layers - 1:
            return dz
        z = pre[j]
        moved = z + dz
        dh = np.where((z > 0) & (moved > 0), dz, np.maximum(moved, 0) - np.maximum(z, 0))


def grad_check(net, X, loss=None, h=1e-6, tape=None):
    """Largest relative error between reverse-mode and central-difference gradients.

    By default the loss is a fixed random linear readout of the outputs and the
    differences are taken on an independent long-double forward pass. A custom
    ``loss(net, X) -> (value, dL/d(output))`` is differenced in float64. If
    ``tape`` is given it is checked in place of a fresh backward pass.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if net.n_params == 0:
        return 0.0
    if loss is None:
        C = _readout(net, X)
        if tape is None:
            net.forward(X)
            tape = net.backward(C)
        C_ext = C.astype(np.longdouble)
        params = [p.astype(np.longdouble) for p in net.params]
        acts, pre = _forward_ext(params, X)
        step = np.longdouble(h)
        numeric = []
        for k, p in enumerate(params):
            layer, is_bias = k // 2, k % 2 == 1
            for index in np.ndindex(p.shape):
                idx = index[0] if is_bias else index
                up = _output_shift(params, acts, pre, layer, is_bias, idx, step)
                down = _output_shift(params, acts, pre, layer, is_bias, idx, -step)
                numeric.append(np.sum(C_ext * (up - down)) / (2 * step))
        numeric = np.array(numeric, dtype=np.float64)
    else:
        if tape is None:
            _, g_out = loss(net, X)
            tape = net.backward(g_out)
        theta = net.get_flat()
        numeric = np.empty_like(theta)
        for j in range(theta.size):
            orig = theta[j]
            theta[j] = orig + h
            net.set_flat(theta)
            lp, _ = loss(net, X)
            theta[j] = orig - h
            net.set_flat(theta)
            lm, _ = loss(net, X)
            theta[j] = orig
            numeric[j] = (lp - lm) / (2 * h)
        net.set_flat(theta)
    analytic = tape.flat()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
