"""Stage-stratified analyses comparing NormVAE and baseline deviation maps."""

import math

import numpy as np
from scipy import stats

from .data import CONTROL, STAGE_CODE, STAGES
from .errors import ContractViolation, InputError
from .estimators import PegasosSVC
from .normative import BASELINE, METHODS, NORMVAE

STAGE_METRICS = ("abs", "significant")


def subject_scores(nams, metric="abs"):
    """Mean |Z| over regions per subject; ``significant`` zeroes non-significant regions."""
    if metric not in STAGE_METRICS:
        raise ContractViolation(f"unknown stage metric {metric!r}")
    if metric == "abs":
        return np.array([np.mean(np.abs(n.z)) for n in nams])
    return np.array([np.mean(np.abs(n.z) * n.significant) for n in nams])


def stage_mean_deviation(nams, groups, metric="abs"):
    """Mean subject score per stage, in stage order; empty stages map to ``None``."""
    if len(nams) != len(groups):
        raise ContractViolation("one group label per NAM required")
    unknown = set(groups) - set(STAGES)
    if unknown:
        raise ContractViolation(f"unknown stage labels {sorted(unknown)}")
    scores = subject_scores(nams, metric)
    groups = np.asarray(groups)
    return {
        s: (float(scores[groups == s].mean()) if np.any(groups == s) else None)
        for s in STAGES
    }


def fit_stage_slope(stage_means):
    """OLS line through (stage code, mean) for the stages that are present.

    Accepts a sequence of five values (``None`` for missing) or a mapping from
    stage label. Returns ``(slope, intercept, stderr)``; ``stderr`` is NaN
    with only two stages.
    """
    if isinstance(stage_means, dict):
        pairs = [(STAGE_CODE[s], v) for s, v in stage_means.items() if v is not None]
    else:
        pairs = [(i, v) for i, v in enumerate(stage_means) if v is not None]
    if len(pairs) < 2:
        raise ContractViolation("need at least two stages to fit a slope")
    codes, means = map(np.asarray, zip(*pairs))
    if len(pairs) == 2:
        slope = (means[1] - means[0]) / (codes[1] - codes[0])
        return float(slope), float(means[0] - slope * codes[0]), math.nan
    fit = stats.linregress(codes.astype(float), means.astype(float))
    return float(fit.slope), float(fit.intercept), float(fit.stderr)


def welch_test(a, b):
    """Two-sided Welch t-test p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractViolation("each sample needs at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def significance_counts(nams):
    """Per-region significance frequency (%) and per-subject significant counts."""
    if not nams:
        return np.zeros(0), np.zeros(0, dtype=int)
    mask = np.stack([np.asarray(n.significant, dtype=bool) for n in nams])
    per_region = 100.0 * mask.sum(axis=0) / mask.shape[0]
    return per_region, mask.sum(axis=1)


def train_linear_svm(X, y, lam=1e-3, epochs=50, seed=0):
    return PegasosSVC(lam=lam, epochs=epochs, random_state=seed).fit(X, y).coef_


def weight_significance_correlation(w, counts):
    """Pearson correlation between |w| and per-region significance counts."""
    a = np.abs(np.asarray(w, dtype=np.float64))
    b = np.asarray(counts, dtype=np.float64)
    if a.size != b.size or a.size < 3:
        raise ContractViolation("need equal-length vectors with at least 3 regions")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ContractViolation("correlation undefined for a constant vector")
    return float(np.corrcoef(a, b)[0, 1])


def planted_recall(nams, truth_mask):
    """Mean fraction of planted regions flagged significant per subject."""
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if not nams or not truth_mask.any():
        return None
    return float(np.mean([np.asarray(n.significant)[truth_mask].mean() for n in nams]))


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def method_report(nams, groups, svm_weights, metric="abs", truth_mask=None):
    """All stage/region/subject summaries for one method."""
    groups = list(groups)
    means = stage_mean_deviation(nams, groups, metric)
    present = [s for s in STAGES if means[s] is not None]
    slope = intercept = stderr = None
    if len(present) >= 2:
        slope, intercept, stderr = fit_stage_slope(means)
    scores = subject_scores(nams, metric)
    g = np.asarray(groups)
    adjacent = {}
    for lo, hi in zip(STAGES, STAGES[1:]):
        a, b = scores[g == lo], scores[g == hi]
        adjacent[f"{lo}-{hi}"] = welch_test(a, b) if a.size >= 2 and b.size >= 2 else None

    patients = [n for n, s in zip(nams, groups) if s != CONTROL]
    freq, _ = significance_counts(patients)
    if not patients:
        freq = np.zeros(len(svm_weights))
    _, counts = significance_counts(nams)
    region_counts = (np.stack([n.significant for n in patients]).sum(axis=0)
                     if patients else np.zeros(len(svm_weights), dtype=int))
    try:
        corr = weight_significance_correlation(svm_weights, region_counts)
    except ContractViolation:
        corr = None
    recall = None
    if truth_mask is not None:
        top = [n for n, s in zip(nams, groups) if s == STAGES[-1]]
        recall = planted_recall(top, truth_mask)
    return {
        "stage_means": means,
        "slope": {"slope": slope, "intercept": intercept, "stderr": _nan_to_none(stderr)},
        "adjacent_stage_p": adjacent,
        "region_freq": [float(f) for f in freq],
        "region_counts": [int(c) for c in region_counts],
        "subject_counts": {n.subject: int(c) for n, c in zip(nams, counts)},
        "correlation": corr,
        "top_stage_recall": recall,
        "mean_subject_count": {
            s: (float(np.mean([c for c, gg in zip(counts, groups) if gg == s]))
                if s in groups else None)
            for s in STAGES
        },
    }


def evaluate(nams_by_method, groups_by_subject, svm_X, svm_y, *, q, seed,
             metric="abs", truth_mask=None, svm_lambda=1e-3, svm_epochs=50):
    """Assemble the full comparison report as a JSON-ready dict.

    ``nams_by_method`` maps method name to a list of NAMs; subjects are looked
    up in ``groups_by_subject`` for their stage. The SVM separates CN from AD on
    ``svm_X`` (standardized features) with labels ``svm_y``.
    """
    if not nams_by_method:
        raise InputError("no NAMs to evaluate")
    labels = set(np.asarray(svm_y).tolist())
    if len(labels) != 2:
        raise InputError("SVM needs both CN and AD subjects in the cohort")
    w = train_linear_svm(svm_X, svm_y, svm_lambda, svm_epochs, seed)

    per_method = {}
    for method in METHODS:
        nams = nams_by_method.get(method)
        if not nams:
            continue
        try:
            groups = [groups_by_subject[n.subject] for n in nams]
        except KeyError as exc:
            raise InputError(f"NAM subject {exc.args[0]} not present in cohort") from None
        per_method[method] = method_report(nams, groups, w, metric, truth_mask)

    def pick(key):
        return {m: r[key] for m, r in per_method.items()}

    nv, bl = per_method.get(NORMVAE), per_method.get(BASELINE)
    report = {
        "format": "normvae-eval/1",
        "seed": int(seed),
        "q": float(q),
        "stage_metric": metric,
        "stages": list(STAGES),
        "methods": sorted(per_method),
        "panel_a_stage_means": nv["stage_means"] if nv else None,
        "panel_b_stage_means": bl["stage_means"] if bl else None,
        "panel_c_correlation": pick("correlation"),
        "panel_d_region_freq": pick("region_freq"),
        "region_counts": pick("region_counts"),
        "panel_e_subject_counts": pick("subject_counts"),
        "slope": pick("slope"),
        "adjacent_stage_p": pick("adjacent_stage_p"),
        "top_stage_recall": pick("top_stage_recall"),
        "mean_subject_count": pick("mean_subject_count"),
        "svm": {"lambda": svm_lambda, "epochs": svm_epochs,
                "weights": [float(x) for x in w]},
    }
    if nv and bl:
        report["comparison"] = _compare(nv, bl)
    return report


def _compare(nv, bl):
    def gt(a, b):
        return None if a is None or b is None else bool(a > b)

    top = STAGES[-1]
    nv_counts = [c for c in nv["subject_counts"].values()]
    bl_counts = [c for c in bl["subject_counts"].values()]
    return {
        "normvae_higher_slope": gt(nv["slope"]["slope"], bl["slope"]["slope"]),
        "normvae_higher_top_stage_mean": gt(nv["stage_means"][top], bl["stage_means"][top]),
        "normvae_more_significant_regions": gt(float(np.mean(nv_counts)),
                                               float(np.mean(bl_counts))),
        "normvae_higher_correlation": gt(nv["correlation"], bl["correlation"]),
    }
