"""Deviation scores, p-values, FDR control and Normative Abnormality Maps."""

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .cvae import decode, encode, mc_predict
from .errors import ContractViolation, DegenerateVarianceError, NormVAEError
from .numerics import RngStream, stable_key

NORMVAE = "normvae"
BASELINE = "baseline"
METHODS = (NORMVAE, BASELINE)
MIN_CONTROLS = 10
# erfc underflows to 0 for |Z| > ~38; p-values stay in (0, 1]
P_FLOOR = np.finfo(np.float64).tiny
# substream family for per-subject sampling; 0-2 are used by training
SUBJECT_STREAMS = 3


@dataclass
class NormativeVariance:
    sigma_n_sq: np.ndarray
    source: str
    n_controls: int
    method: str = NORMVAE


@dataclass
class DeviationMap:
    subject: str
    method: str
    z: np.ndarray
    p: np.ndarray


@dataclass
class NAM:
    subject: str
    method: str
    z: np.ndarray
    p: np.ndarray
    significant: np.ndarray
    q: float

    @property
    def n_significant(self):
        return int(np.count_nonzero(self.significant))


def subject_stream(seed, subject_id):
    """RNG substream owned by one subject, independent of cohort order."""
    return RngStream(seed, (SUBJECT_STREAMS, stable_key(subject_id)))


def z_normvae(x, mu_hat, sigma_sq, sigma_n_sq):
    x, mu_hat, sigma_sq, sigma_n_sq = (np.asarray(a, dtype=np.float64)
                                       for a in (x, mu_hat, sigma_sq, sigma_n_sq))
    if np.any(sigma_sq < 0):
        raise ContractViolation("predictive variance must be >= 0")
    if np.any(~(sigma_n_sq > 0)):
        raise ContractViolation("normative variance must be > 0")
    return (x - mu_hat) / np.sqrt(sigma_sq + sigma_n_sq)


def z_baseline(x, xhat, sigma_n_sq):
    x, xhat, sigma_n_sq = (np.asarray(a, dtype=np.float64) for a in (x, xhat, sigma_n_sq))
    if np.any(~(sigma_n_sq > 0)):
        raise ContractViolation("normative variance must be > 0")
    return (x - xhat) / np.sqrt(sigma_n_sq)


def p_two_sided(z):
    """Two-sided standard-normal tail probability ``2 * (1 - Phi(|z|))``."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ContractViolation("Z must be finite")
    return np.maximum(erfc(np.abs(z) / np.sqrt(2.0)), P_FLOOR)


def bh_fdr(pvals, q=0.05, axis=None):
    """Benjamini-Hochberg step-up procedure; returns a boolean mask.

    Finds the largest rank ``r`` with ``p_(r) <= q * r / m`` and flags every
    p-value not exceeding ``p_(r)``. With ``axis=None`` all entries form one
    family; otherwise each 1-D slice along ``axis`` is corrected separately.
    """
    p = np.asarray(pvals, dtype=np.float64)
    if not 0 < q < 1:
        raise ContractViolation(f"q must lie in (0, 1), got {q}")
    if np.any(~((p > 0) & (p <= 1))):
        raise ContractViolation("p-values must lie in (0, 1]")
    if p.size == 0:
        return np.zeros(p.shape, dtype=bool)
    if axis is None:
        return _bh_rows(p.reshape(1, -1), q).reshape(p.shape)
    moved = np.moveaxis(p, axis, -1)
    mask = _bh_rows(moved.reshape(-1, moved.shape[-1]), q).reshape(moved.shape)
    return np.moveaxis(mask, -1, axis)


def _bh_rows(p, q):
    m = p.shape[1]
    sorted_p = np.sort(p, axis=1)
    passing = sorted_p <= q * np.arange(1, m + 1) / m
    any_pass = passing.any(axis=1)
    last = m - 1 - np.argmax(passing[:, ::-1], axis=1)
    threshold = sorted_p[np.arange(p.shape[0]), last]
    return (p <= threshold[:, None]) & any_pass[:, None]


def _residual_center(model, x, age, subject_id, method, seed, k):
    if method == NORMVAE:
        stats = mc_predict(model, x, age, k, subject_stream(seed, subject_id))
        return stats.mean, stats.var
    if method == BASELINE:
        mu_z, _ = encode(model, x, age)
        return decode(model, mu_z, age), None
    raise ContractViolation(f"unknown method {method!r}")


def fit_normative_variance(model, X, age, ids, seed, method=NORMVAE, k=None,
                           source="held-out-controls"):
    """Per-region unbiased variance of control residuals.

    For ``normvae`` the residual is ``x - mu_hat`` with ``mu_hat`` the
    Monte-Carlo predictive mean; for ``baseline`` it is ``x - xhat`` with the
    deterministic reconstruction of the encoder mean.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < MIN_CONTROLS:
        raise ContractViolation(
            f"need at least {MIN_CONTROLS} controls for normative variance, got {X.shape[0]}"
        )
    k = model.config.mc_samples if k is None else k
    resid = np.empty_like(X)
    for i, sid in enumerate(ids):
        center, _ = _residual_center(model, X[i], age[i], sid, method, seed, k)
        resid[i] = X[i] - center
    return normative_variance_from_residuals(resid, source=source, method=method)


def normative_variance_from_residuals(resid, source="held-out-controls", method=NORMVAE):
    resid = np.asarray(resid, dtype=np.float64)
    if resid.shape[0] < 2:
        raise ContractViolation("need at least 2 residual rows")
    var = resid.var(axis=0, ddof=1)
    bad = np.flatnonzero(~(var > 0))
    if bad.size:
        raise DegenerateVarianceError(
            f"zero normative variance in region(s) {bad.tolist()}", bad
        )
    return NormativeVariance(var, source, int(resid.shape[0]), method)


def deviation_map(model, x, age, subject_id, sigma_n, method, seed, k=None):
    k = model.config.mc_samples if k is None else k
    center, pred_var = _residual_center(model, x, age, subject_id, method, seed, k)
    if method == NORMVAE:
        z = z_normvae(x, center, pred_var, sigma_n.sigma_n_sq)
    else:
        z = z_baseline(x, center, sigma_n.sigma_n_sq)
    return DeviationMap(subject_id, method, z, p_two_sided(z))


def build_nam(model, x, age, subject_id, sigma_n, method, q, seed, k=None):
    """NAM for one subject, with BH correction across its regions."""
    if not 0 < q < 1:
        raise ContractViolation(f"q must lie in (0, 1), got {q}")
    try:
        dm = deviation_map(model, x, age, subject_id, sigma_n, method, seed, k)
    except NormVAEError as exc:
        raise type(exc)(f"subject {subject_id}: {exc}") from exc
    return NAM(dm.subject, dm.method, dm.z, dm.p, bh_fdr(dm.p, q), float(q))


def build_nams(model, X, age, ids, sigma_n, method, q, seed, k=None, fdr_scope="subject"):
    """NAMs for many subjects.

    ``fdr_scope="subject"`` corrects each subject's region vector separately;
    ``"cohort"`` pools every (subject, region) test into one BH family.
    """
    if fdr_scope not in ("subject", "cohort"):
        raise ContractViolation(f"unknown fdr_scope {fdr_scope!r}")
    nams = [build_nam(model, X[i], age[i], sid, sigma_n, method, q, seed, k)
            for i, sid in enumerate(ids)]
    if fdr_scope == "cohort" and nams:
        pooled = bh_fdr(np.stack([n.p for n in nams]), q, axis=None)
        for nam, mask in zip(nams, pooled):
            nam.significant = mask
    return nams
