"""Small dense-network toolkit: layers with manual backprop, Adam, RNG, grad checks.

Everything works in float64. Layer weights and biases are views into one flat
parameter vector so that the optimizer and the finite-difference checker can
treat a whole network as a single array.
"""

import hashlib

import numpy as np

from .errors import ContractViolation, TrainingDivergedError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)


class DenseLayer:
    """Affine map followed by an elementwise activation.

    Parameters
    ----------
    weights : ndarray of shape (out, in)
    bias : ndarray of shape (out,)
    activation : {"relu", "identity"}
    """

    def __init__(self, weights, bias, activation=IDENTITY):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.ndim != 1:
            raise ContractViolation("weights must be 2-D and bias 1-D")
        if bias.shape[0] != weights.shape[0]:
            raise ContractViolation(
                f"bias length {bias.shape[0]} != weight rows {weights.shape[0]}"
            )
        if activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self._cache = None

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise ContractViolation(
                f"input has trailing dimension {x.shape[-1] if x.ndim else 0}, "
                f"layer expects {self.in_dim}"
            )
        return x

    def apply(self, x):
        """Forward pass without caching (safe for concurrent inference)."""
        x = self._check_input(x)
        pre = x @ self.weights.T + self.bias
        return np.maximum(pre, 0.0) if self.activation == RELU else pre

    def forward(self, x):
        """Forward pass that records what :meth:`backward` needs."""
        x = self._check_input(x)
        pre = x @ self.weights.T + self.bias
        self._cache = (x, pre)
        return np.maximum(pre, 0.0) if self.activation == RELU else pre

    def backward(self, upstream):
        """Gradients of the cached forward application.

        Returns ``(grad_W, grad_b, grad_x)``. For batched input the weight and
        bias gradients are summed over rows.
        """
        if self._cache is None:
            raise ContractViolation("backward called before forward")
        x, pre = self._cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != pre.shape:
            raise ContractViolation(
                f"upstream gradient shape {upstream.shape} != output shape {pre.shape}"
            )
        g = upstream * (pre > 0.0) if self.activation == RELU else upstream
        if x.ndim == 1:
            grad_w = np.outer(g, x)
            grad_b = g.copy()
        else:
            grad_w = g.T @ x
            grad_b = g.sum(axis=0)
        grad_x = g @ self.weights
        return grad_w, grad_b, grad_x


def dense_forward(layer, x):
    return layer.forward(x)


def dense_backward(layer, upstream_grad):
    return layer.backward(upstream_grad)


class ParameterBuffer:
    """Flat float64 storage that hands out array views for layer parameters."""

    def __init__(self, shapes):
        self.shapes = [tuple(s) for s in shapes]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.data = np.zeros(int(self.offsets[-1]), dtype=np.float64)

    def __len__(self):
        return self.data.size

    def views(self, flat=None):
        flat = self.data if flat is None else flat
        return [
            flat[self.offsets[i] : self.offsets[i + 1]].reshape(shape)
            for i, shape in enumerate(self.shapes)
        ]


def glorot_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class AdamState:
    """Moment estimates and step counter for one flat parameter vector."""

    def __init__(self, size, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0:
            raise ContractViolation("learning rate must be positive")
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)
        self.t = 0
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(state, params, grads):
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if not (params.shape == grads.shape == state.m.shape):
        raise ContractViolation("params, grads and Adam moments differ in length")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergedError(
            f"non-finite gradient at Adam step {state.t + 1}"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class RngStream:
    """Seeded counter-based (Philox) stream with pure substream derivation.

    ``RngStream(seed).substream(i)`` depends only on ``(seed, i)``, never on
    how many draws were taken from the parent.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._bitgen = np.random.Philox(seq)
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"

    @property
    def counter(self):
        return int(self._bitgen.state["state"]["counter"][0])

    def substream(self, index):
        return RngStream(self.seed, self.path + (int(index),))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)


def gaussian_draw(rng, mu, sigma):
    if sigma < 0:
        raise ContractViolation(f"sigma must be >= 0, got {sigma}")
    return mu + sigma * rng.normal()


def stable_key(label):
    """64-bit integer key for a string, stable across processes and platforms."""
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def grad_check(loss_and_grad, params, eps=1e-6, indices=None, floor=1e-7):
    """Max relative error between analytic and central-difference gradients.

    Parameters
    ----------
    loss_and_grad : callable
        ``f(params) -> (loss, grad)``; must be deterministic.
    params : ndarray
        Point at which to check. Not modified.
    eps : float
        Finite-difference step.
    indices : array-like of int, optional
        Subset of coordinates to check; all by default.
    floor : float
        Lower bound on the error denominator so that coordinates whose true
        gradient is ~0 are judged on absolute error.
    """
    params = np.array(params, dtype=np.float64)
    _, analytic = loss_and_grad(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    if indices is None:
        indices = np.arange(params.size)
    worst = 0.0
    for i in indices:
        saved = params[i]
        params[i] = saved + eps
        f_plus, _ = loss_and_grad(params)
        params[i] = saved - eps
        f_minus, _ = loss_and_grad(params)
        params[i] = saved
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic[i]) + abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
