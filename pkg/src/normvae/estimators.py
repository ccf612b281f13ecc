"""scikit-learn compatible front ends for the normative model and the linear SVM."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cvae import CvaeConfig, decode, encode, mc_predict, train
from .data import FeatureScaler
from .errors import ContractViolation
from .normative import (
    BASELINE,
    METHODS,
    NORMVAE,
    build_nams,
    fit_normative_variance,
    subject_stream,
    z_baseline,
    z_normvae,
)
from .numerics import RngStream


def _check_age(age, n):
    if age is None:
        raise ContractViolation("age is required (the model is conditioned on it)")
    age = np.asarray(age, dtype=np.float64).reshape(-1)
    if age.size != n:
        raise ContractViolation(f"age has {age.size} entries for {n} rows")
    if not np.all(np.isfinite(age)):
        raise ContractViolation("age must be finite")
    return age


def _default_ids(ids, n):
    if ids is None:
        return [f"row{i}" for i in range(n)]
    ids = [str(i) for i in ids]
    if len(ids) != n:
        raise ContractViolation(f"{len(ids)} ids for {n} rows")
    return ids


class NormVAE(BaseEstimator):
    """Age-conditioned VAE normative model with Monte-Carlo deviation scores.

    ``X`` is always ICV-normalized region volumes (n_subjects, n_regions) in
    original units; standardization against the training controls happens
    inside. ``fit`` trains on healthy controls and estimates the per-region
    normative variance, preferably on a disjoint set of held-out controls.

    Monte-Carlo draws for a subject come from a substream keyed by its id, so
    scores do not depend on row order when ``ids`` are given. Without ids the
    row index is used.

    Parameters
    ----------
    latent_dim, hidden_dim, hidden_layers : int
        Network size; ``hidden_layers`` dense ReLU layers per coder.
    batch_size, learning_rate, epochs : training schedule (Adam).
    kl_weight : float
        Weight of the KL term in the ELBO.
    mc_samples : int
        Latent samples per subject for the predictive mean/variance.
    random_state : int
        Seeds initialization, batching, training noise and MC sampling.
    """

    def __init__(self, latent_dim=64, hidden_dim=512, hidden_layers=3, batch_size=32,
                 learning_rate=1e-4, epochs=500, kl_weight=1.0, mc_samples=100,
                 random_state=0):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.hidden_layers = hidden_layers
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.kl_weight = kl_weight
        self.mc_samples = mc_samples
        self.random_state = random_state

    def _make_config(self, n_features):
        return CvaeConfig(
            input_dim=n_features, latent_dim=self.latent_dim, hidden_dim=self.hidden_dim,
            hidden_layers=self.hidden_layers, batch_size=self.batch_size,
            learning_rate=self.learning_rate, epochs=self.epochs,
            kl_weight=self.kl_weight, mc_samples=self.mc_samples,
        )

    def fit(self, X, y=None, *, age=None, X_holdout=None, age_holdout=None,
            holdout_ids=None):
        X = check_array(X, dtype=np.float64)
        age = _check_age(age, X.shape[0])
        config = self._make_config(X.shape[1])
        self.scaler_ = FeatureScaler().fit(X, age)
        self.config_ = config
        self.n_features_in_ = X.shape[1]
        self.model_, self.loss_curve_ = train(
            self.scaler_.transform(X), self.scaler_.transform_age(age),
            config, self.random_state,
        )
        if X_holdout is None:
            self.fit_normative_variance(X, age=age, source="training-controls")
        else:
            self.fit_normative_variance(X_holdout, age=age_holdout, ids=holdout_ids)
        return self

    def fit_normative_variance(self, X, *, age=None, ids=None, source="held-out-controls"):
        """(Re-)estimate normative variances for both deviation methods."""
        check_is_fitted(self, "model_")
        Xs, ages = self._standardize(X, age)
        ids = _default_ids(ids, Xs.shape[0])
        self.sigma_n_ = {
            method: fit_normative_variance(self.model_, Xs, ages, ids, self.random_state,
                                           method=method, source=source)
            for method in METHODS
        }
        return self

    def _standardize(self, X, age):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractViolation(
                f"X has {X.shape[1]} regions, model was fitted on {self.n_features_in_}"
            )
        age = _check_age(age, X.shape[0])
        return self.scaler_.transform(X), self.scaler_.transform_age(age)

    def predict_stats(self, X, *, age=None, ids=None):
        """Predictive mean and variance per subject and region (standardized units)."""
        check_is_fitted(self, "model_")
        Xs, ages = self._standardize(X, age)
        ids = _default_ids(ids, Xs.shape[0])
        mean = np.empty_like(Xs)
        var = np.empty_like(Xs)
        for i, sid in enumerate(ids):
            stats = mc_predict(self.model_, Xs[i], ages[i], self.config_.mc_samples,
                               subject_stream(self.random_state, sid))
            mean[i], var[i] = stats.mean, stats.var
        return mean, var

    def reconstruct(self, X, *, age=None):
        """Deterministic reconstruction from the encoder mean (standardized units)."""
        check_is_fitted(self, "model_")
        Xs, ages = self._standardize(X, age)
        mu_z, _ = encode(self.model_, Xs, ages)
        return decode(self.model_, mu_z, ages)

    def deviations(self, X, *, age=None, ids=None, method=NORMVAE):
        """Signed deviation scores Z, shape (n_subjects, n_regions)."""
        check_is_fitted(self, "sigma_n_")
        Xs, _ = self._standardize(X, age)
        if method == NORMVAE:
            mean, var = self.predict_stats(X, age=age, ids=ids)
            return z_normvae(Xs, mean, var, self.sigma_n_[NORMVAE].sigma_n_sq)
        if method == BASELINE:
            return z_baseline(Xs, self.reconstruct(X, age=age),
                              self.sigma_n_[BASELINE].sigma_n_sq)
        raise ContractViolation(f"unknown method {method!r}")

    def transform(self, X, *, age=None, ids=None):
        return self.deviations(X, age=age, ids=ids, method=NORMVAE)

    def nams(self, X, *, age=None, ids=None, method=NORMVAE, q=0.05, fdr_scope="subject"):
        check_is_fitted(self, "sigma_n_")
        Xs, ages = self._standardize(X, age)
        ids = _default_ids(ids, Xs.shape[0])
        return build_nams(self.model_, Xs, ages, ids, self.sigma_n_[method], method, q,
                          self.random_state, self.config_.mc_samples, fdr_scope)


class PegasosSVC(ClassifierMixin, BaseEstimator):
    """Linear SVM trained by Pegasos stochastic subgradient descent.

    Minimizes ``lam/2 ||w||^2 + mean(hinge(y <w, [x, 1]>))``; the bias is the
    last coordinate of the augmented weight vector and is regularized with it.
    Each epoch visits every sample once in a seeded random order.
    """

    def __init__(self, lam=1e-3, epochs=50, random_state=0):
        self.lam = lam
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size != 2:
            raise ContractViolation(
                f"PegasosSVC needs exactly two classes, got {self.classes_.size}"
            )
        if not self.lam > 0:
            raise ContractViolation("lam must be > 0")
        signs = np.where(y == self.classes_[1], 1.0, -1.0)
        Xa = np.hstack([X, np.ones((X.shape[0], 1))])
        n = Xa.shape[0]
        w = np.zeros(Xa.shape[1])
        radius = 1.0 / np.sqrt(self.lam)
        rng = RngStream(self.random_state)
        t = 0
        for _ in range(self.epochs):
            for i in rng.permutation(n):
                t += 1
                eta = 1.0 / (self.lam * t)
                margin = signs[i] * (w @ Xa[i])
                w *= 1.0 - eta * self.lam
                if margin < 1.0:
                    w += eta * signs[i] * Xa[i]
                norm = np.linalg.norm(w)
                if norm > radius:
                    w *= radius / norm
        self.coef_ = w[:-1].copy()
        self.intercept_ = float(w[-1])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, self.classes_[1], self.classes_[0])
