"""Conditional VAE with hand-written backpropagation.

The encoder sees ``[x, age]`` and emits latent mean and log-variance heads;
the decoder sees ``[z, age]`` and emits a point reconstruction. Features and
age are expected in standardized units (see :mod:`normvae.data`).
"""

from dataclasses import asdict, dataclass, fields
import logging
import math

import numpy as np

from .errors import ContractViolation, TrainingDivergedError
from .numerics import (
    IDENTITY,
    RELU,
    AdamState,
    DenseLayer,
    ParameterBuffer,
    RngStream,
    adam_step,
    glorot_uniform,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CvaeConfig:
    input_dim: int = 120
    latent_dim: int = 64
    hidden_dim: int = 512
    hidden_layers: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 500
    kl_weight: float = 1.0
    mc_samples: int = 100
    covariate_dim: int = 1

    def __post_init__(self):
        for name in ("input_dim", "latent_dim", "hidden_dim", "hidden_layers",
                     "batch_size", "epochs", "covariate_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.mc_samples < 2:
            raise ContractViolation("mc_samples must be >= 2 to estimate a variance")
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be > 0")
        if self.kl_weight < 0:
            raise ContractViolation("kl_weight must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown CVAE config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PredictiveStats:
    mean: np.ndarray
    var: np.ndarray
    k: int


def _layer_shapes(config):
    d, c, h, lat = config.input_dim, config.covariate_dim, config.hidden_dim, config.latent_dim
    shapes = []
    specs = []

    def add(n_out, n_in, act):
        shapes.extend([(n_out, n_in), (n_out,)])
        specs.append(act)

    n_in = d + c
    for _ in range(config.hidden_layers):
        add(h, n_in, RELU)
        n_in = h
    add(lat, h, IDENTITY)  # latent mean head
    add(lat, h, IDENTITY)  # latent log-variance head
    n_in = lat + c
    for _ in range(config.hidden_layers):
        add(h, n_in, RELU)
        n_in = h
    add(d, h, IDENTITY)
    return shapes, specs


class CvaeModel:
    """Network weights plus the layer objects viewing them.

    ``params`` is the flat parameter vector; mutating it in place updates every
    layer. ``encoder`` holds the shared trunk, ``mu_head``/``logvar_head`` the
    latent heads and ``decoder`` the full decoder stack including its output.
    """

    def __init__(self, config, params=None):
        self.config = config
        shapes, acts = _layer_shapes(config)
        self._buffer = ParameterBuffer(shapes)
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != self._buffer.data.shape:
                raise ContractViolation(
                    f"parameter vector has {params.size} entries, "
                    f"config needs {self._buffer.data.size}"
                )
            self._buffer.data[:] = params
        views = self._buffer.views()
        layers = [
            DenseLayer(views[2 * i], views[2 * i + 1], act) for i, act in enumerate(acts)
        ]
        n = config.hidden_layers
        self.encoder = layers[:n]
        self.mu_head = layers[n]
        self.logvar_head = layers[n + 1]
        self.decoder = layers[n + 2 :]

    @classmethod
    def initialize(cls, config, rng):
        """Glorot-uniform weights and zero biases from ``rng``."""
        model = cls(config)
        for layer in model.layers:
            layer.weights[:] = glorot_uniform(rng, layer.out_dim, layer.in_dim)
        return model

    @property
    def layers(self):
        return [*self.encoder, self.mu_head, self.logvar_head, *self.decoder]

    @property
    def params(self):
        return self._buffer.data

    def gradient_views(self, flat):
        return self._buffer.views(flat)


def _with_covariate(v, age, covariate_dim):
    v = np.asarray(v, dtype=np.float64)
    age = np.asarray(age, dtype=np.float64)
    if v.ndim == 1:
        age = age.reshape(covariate_dim)
    else:
        age = age.reshape(v.shape[0], covariate_dim)
    return np.concatenate([v, age], axis=-1)


def _check_dim(v, expected, what):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2) or v.shape[-1] != expected:
        raise ContractViolation(f"{what} has trailing dimension {v.shape[-1:]}, expected {expected}")
    return v


def encode(model, x, age):
    """Latent mean and log-variance for one row or a batch of rows."""
    cfg = model.config
    h = _with_covariate(_check_dim(x, cfg.input_dim, "x"), age, cfg.covariate_dim)
    for layer in model.encoder:
        h = layer.apply(h)
    return model.mu_head.apply(h), model.logvar_head.apply(h)


def reparameterize(mu_z, logvar_z, noise):
    mu_z = np.asarray(mu_z, dtype=np.float64)
    logvar_z = np.asarray(logvar_z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not (mu_z.shape == logvar_z.shape) or mu_z.shape[-1] != noise.shape[-1]:
        raise ContractViolation("mu, logvar and noise must share the latent dimension")
    return mu_z + np.exp(0.5 * logvar_z) * noise


def decode(model, z, age):
    cfg = model.config
    h = _with_covariate(_check_dim(z, cfg.latent_dim, "z"), age, cfg.covariate_dim)
    for layer in model.decoder:
        h = layer.apply(h)
    return h


def kl_divergence(mu_z, logvar_z):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis."""
    return 0.5 * np.sum(mu_z**2 + np.exp(logvar_z) - 1.0 - logvar_z, axis=-1)


def elbo_loss(x, xhat, mu_z, logvar_z, beta=1.0):
    """Return ``(recon, kl, total)`` for a single row.

    ``recon`` is the mean squared error over features, ``kl`` is summed over
    latent dimensions and ``total = recon + beta * kl``.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ContractViolation(f"x shape {x.shape} != xhat shape {xhat.shape}")
    recon = float(np.mean((x - xhat) ** 2))
    kl = float(kl_divergence(np.asarray(mu_z), np.asarray(logvar_z)))
    total = recon + beta * kl
    if not math.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss (recon={recon}, kl={kl})")
    return recon, kl, total


def loss_and_grad(model, x, age, noise, beta=None):
    """Batch-mean ELBO terms and the gradient w.r.t. ``model.params``.

    Parameters
    ----------
    x : ndarray of shape (n, D)
    age : ndarray of shape (n,) or (n, covariate_dim)
    noise : ndarray of shape (n, latent_dim)
        Standard-normal draws for the reparameterization; fixed noise makes
        the loss a deterministic function of the parameters.

    Returns
    -------
    recon, kl, total : float
    grad : ndarray, same shape as ``model.params``
    """
    cfg = model.config
    x = np.atleast_2d(_check_dim(x, cfg.input_dim, "x"))
    n = x.shape[0]
    age = np.asarray(age, dtype=np.float64).reshape(n, cfg.covariate_dim)
    noise = np.asarray(noise, dtype=np.float64).reshape(n, cfg.latent_dim)
    beta = cfg.kl_weight if beta is None else beta

    with np.errstate(over="ignore", invalid="ignore"):
        h = np.concatenate([x, age], axis=1)
        for layer in model.encoder:
            h = layer.forward(h)
        mu = model.mu_head.forward(h)
        logvar = model.logvar_head.forward(h)
        std = np.exp(0.5 * logvar)
        z = mu + std * noise
        d = np.concatenate([z, age], axis=1)
        for layer in model.decoder:
            d = layer.forward(d)
        xhat = d

        resid = xhat - x
        recon = float(np.mean(resid**2))  # mean over rows and features
        kl_rows = kl_divergence(mu, logvar)
        kl = float(np.mean(kl_rows))
        total = recon + beta * kl
    if not math.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss (recon={recon}, kl={kl})")

    grad = np.zeros_like(model.params)
    gviews = model.gradient_views(grad)
    layer_index = {id(layer): i for i, layer in enumerate(model.layers)}

    def store(layer, gw, gb):
        i = layer_index[id(layer)]
        gviews[2 * i] += gw
        gviews[2 * i + 1] += gb

    g = 2.0 * resid / (n * cfg.input_dim)
    for layer in reversed(model.decoder):
        gw, gb, g = layer.backward(g)
        store(layer, gw, gb)
    g_z = g[:, : cfg.latent_dim]
    g_mu = g_z + beta * mu / n
    g_logvar = g_z * noise * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    gw, gb, g_h_mu = model.mu_head.backward(g_mu)
    store(model.mu_head, gw, gb)
    gw, gb, g_h_lv = model.logvar_head.backward(g_logvar)
    store(model.logvar_head, gw, gb)
    g = g_h_mu + g_h_lv
    for layer in reversed(model.encoder):
        gw, gb, g = layer.backward(g)
        store(layer, gw, gb)
    return recon, kl, total, grad


def train(x, age, config, seed, log_every=50):
    """Fit a :class:`CvaeModel` on standardized control rows.

    Mini-batches come from a seeded shuffle each epoch (last short batch
    kept), giving ``ceil(n / batch_size)`` Adam updates per epoch.

    Returns
    -------
    model : CvaeModel
    loss_curve : ndarray of shape (epochs, 3)
        Per-epoch sample-weighted means of (recon, kl, total).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation("training requires a non-empty 2-D control matrix")
    if x.shape[1] != config.input_dim:
        raise ContractViolation(f"x has {x.shape[1]} features, config expects {config.input_dim}")
    n = x.shape[0]
    age = np.asarray(age, dtype=np.float64).reshape(n, config.covariate_dim)

    root = RngStream(seed)
    model = CvaeModel.initialize(config, root.substream(0))
    shuffle_rng = root.substream(1)
    noise_rng = root.substream(2)
    adam = AdamState(model.params.size, config.learning_rate)

    curve = np.zeros((config.epochs, 3))
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            noise = noise_rng.normal((idx.size, config.latent_dim))
            try:
                recon, kl, total, grad = loss_and_grad(
                    model, x[idx], age[idx], noise, config.kl_weight
                )
                adam_step(adam, model.params, grad)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch + 1} "
                    f"(learning_rate={config.learning_rate}): {exc}"
                ) from exc
            sums += idx.size * np.array([recon, kl, total])
        curve[epoch] = sums / n
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d: total=%.5f recon=%.5f kl=%.5f",
                        epoch + 1, curve[epoch, 2], curve[epoch, 0], curve[epoch, 1])
    return model, curve


def mc_predict(model, x, age, k, rng):
    """Monte-Carlo predictive mean and unbiased variance over ``k`` decodes.

    The encoder runs once; ``k`` latent samples are drawn from its posterior
    with ``rng`` and decoded, and per-feature sample statistics are returned.
    """
    if k < 2:
        raise ContractViolation("k must be >= 2")
    x = _check_dim(x, model.config.input_dim, "x")
    if x.ndim != 1:
        raise ContractViolation("mc_predict takes a single row")
    mu_z, logvar_z = encode(model, x, age)
    noise = rng.normal((k, model.config.latent_dim))
    z = reparameterize(mu_z, logvar_z, noise)
    ages = np.repeat(np.asarray(age, dtype=np.float64).reshape(1, -1), k, axis=0)
    samples = decode(model, z, ages)
    return PredictiveStats(
        mean=samples.mean(axis=0), var=samples.var(axis=0, ddof=1), k=int(k)
    )
