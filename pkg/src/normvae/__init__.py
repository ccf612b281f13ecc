"""Normative modeling of regional brain volumes with an age-conditioned VAE.

A VAE is trained on healthy controls; each new subject gets per-region
deviation scores that combine Monte-Carlo predictive uncertainty with the
normative (control) residual variance, followed by Benjamini-Hochberg FDR
control to produce Normative Abnormality Maps (NAMs).
"""

from .cvae import CvaeConfig, CvaeModel, PredictiveStats
from .data import (
    Cohort,
    FeatureScaler,
    SubjectRecord,
    SynthConfig,
    load_cohort,
    split_controls,
    synth_generate,
)
from .estimators import NormVAE, PegasosSVC
from .normative import NAM, bh_fdr, p_two_sided, z_baseline, z_normvae

__version__ = "0.1.0"

__all__ = [
    "NAM",
    "Cohort",
    "CvaeConfig",
    "CvaeModel",
    "FeatureScaler",
    "NormVAE",
    "PegasosSVC",
    "PredictiveStats",
    "SubjectRecord",
    "SynthConfig",
    "bh_fdr",
    "load_cohort",
    "p_two_sided",
    "split_controls",
    "synth_generate",
    "z_baseline",
    "z_normvae",
]
