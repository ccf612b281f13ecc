"""End-to-end acceptance checks, one test per criterion.

The pipeline fixture trains full-size models on the default and null synthetic
cohorts (three trainings in total, a few minutes on one core). A summary line
per criterion is printed at the end of the pytest run.
"""

import hashlib
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from normvae.cli import main
from normvae.cvae import CvaeConfig, CvaeModel, kl_divergence, loss_and_grad, mc_predict
from normvae.data import STAGES, SynthConfig, split_controls, synth_generate
from normvae.estimators import NormVAE, PegasosSVC
from normvae.normative import BASELINE, NORMVAE, bh_fdr, z_baseline, z_normvae
from normvae.numerics import RngStream, grad_check
from normvae.serialization import load_model, load_nams, load_report, model_from_bytes, model_to_bytes

SYNTH_SEED = 7
TRAIN_SEED = 0
PIPELINE_OUTPUTS = ("cohort.csv", "cohort.truth.json", "model.ndev", "model.loss.csv",
                    "nams.csv", "report.json", *(f"report.panel_{x}.csv" for x in "abcde"))


def run_pipeline(directory, null=False):
    d = str(directory)
    synth = ["synth", "--seed", str(SYNTH_SEED), "-o", f"{d}/cohort.csv"]
    if null:
        synth.append("--stages-null")
    assert main(synth) == 0
    start = time.perf_counter()
    assert main(["train", f"{d}/cohort.csv", "--seed", str(TRAIN_SEED),
                 "-o", f"{d}/model.ndev"]) == 0
    assert main(["deviate", f"{d}/model.ndev", f"{d}/cohort.csv", "-o", f"{d}/nams.csv"]) == 0
    elapsed = time.perf_counter() - start
    assert main(["eval", f"{d}/nams.csv", f"{d}/cohort.csv", "--model", f"{d}/model.ndev",
                 "--truth", f"{d}/cohort.truth.json", "-o", f"{d}/report.json"]) == 0
    return elapsed


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("default")
    elapsed = run_pipeline(d)
    return d, elapsed


@pytest.fixture(scope="session")
def null_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("null")
    run_pipeline(d, null=True)
    return d


def report_of(directory):
    return load_report(directory / "report.json")


# --------------------------------------------------------------------------- 1

@pytest.mark.criterion(1, "full-loss gradient matches central differences")
def test_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2026)

    small = CvaeConfig(input_dim=6, latent_dim=3, hidden_dim=10, hidden_layers=3)
    cases = [(small, None), (CvaeConfig(), 40)]
    for config, per_tensor in cases:
        model = CvaeModel.initialize(config, RngStream(int(rng.integers(2**32))))
        x = rng.normal(size=(2, config.input_dim))
        age = rng.normal(size=2)
        noise = rng.normal(size=(2, config.latent_dim))

        def f(params):
            _, _, total, grad = loss_and_grad(CvaeModel(config, params), x, age, noise)
            return total, grad

        indices = None
        if per_tensor is not None:
            # every weight matrix and bias of the full-size model, sampled
            indices, offset = [], 0
            for layer in model.layers:
                for size in (layer.weights.size, layer.bias.size):
                    k = min(per_tensor, size)
                    indices.extend(offset + rng.choice(size, k, replace=False))
                    offset += size
        err = grad_check(f, model.params.copy(), eps=1e-6, indices=indices)
        assert err < 1e-4, f"relative error {err:.2e} for {config}"
    assert time.perf_counter() - start < 30


# --------------------------------------------------------------------------- 2

@pytest.mark.criterion(2, "closed-form KL matches its oracles")
def test_kl_oracle():
    start = time.perf_counter()
    assert kl_divergence(np.zeros(8), np.zeros(8)) == 0.0
    assert kl_divergence(np.ones(3), np.zeros(3)) == 1.5

    rng = np.random.default_rng(11)
    stream = RngStream(11)
    n = 1_000_000
    for _ in range(3):
        mu = rng.normal(size=4)
        logvar = rng.uniform(-1.0, 1.0, size=4)
        eps = stream.normal((n, 4))
        z = mu + np.exp(0.5 * logvar) * eps
        # log q(z) - log p(z), constants cancel
        log_ratio = np.sum(-0.5 * logvar - 0.5 * eps**2 + 0.5 * z**2, axis=1)
        mc = log_ratio.mean()
        closed = kl_divergence(mu, logvar)
        assert abs(closed - mc) <= 0.01 * closed, (closed, mc)
    assert time.perf_counter() - start < 10


# --------------------------------------------------------------------------- 3

GRID = ("0.001", "0.01", "0.04", "0.05", "0.2", "1.0")


def brute_force_bh(index_rows, m, q):
    """BH by its definition: reject p <= q r*/m with r* the largest r such that
    at least r p-values are <= q r/m. Thresholds compared in exact rationals."""
    below = np.array([[Fraction(g) <= Fraction(q) * r / m for r in range(0, m + 1)]
                      for g in GRID])
    hits = below[index_rows]  # (N, m, m+1)
    counts = hits.sum(axis=1)
    r = np.arange(m + 1)
    ok = (counts >= r) & (r > 0)
    r_star = np.where(ok.any(axis=1), m - np.argmax(ok[:, ::-1], axis=1), 0)
    reject = np.take_along_axis(hits, r_star[:, None, None].repeat(m, 1), axis=2)[..., 0]
    return reject & (r_star > 0)[:, None]


@pytest.mark.criterion(3, "BH-FDR equals the brute-force definition on the exhaustive grid")
def test_bh_exhaustive():
    start = time.perf_counter()
    values = np.array([float(g) for g in GRID])
    q = "0.05"
    checked = 0
    for m in range(1, 9):
        rows = np.indices((len(GRID),) * m).reshape(m, -1).T
        got = bh_fdr(values[rows], float(q), axis=1)
        expected = brute_force_bh(rows, m, q)
        mismatch = np.flatnonzero((got != expected).any(axis=1))
        assert mismatch.size == 0, values[rows[mismatch[0]]]
        checked += rows.shape[0]
    assert checked == sum(6**m for m in range(1, 9))
    assert time.perf_counter() - start < 5


# --------------------------------------------------------------------------- 4

def ulps_apart(a, b):
    return np.abs(a - b) / np.spacing(np.maximum(np.abs(a), np.abs(b)))


@pytest.mark.criterion(4, "deviation formulas exact to 1 ulp")
def test_deviation_formula_exactness():
    rng = np.random.default_rng(4)
    n = 20_000
    x = rng.normal(0, 3, n)
    mu = rng.normal(0, 3, n)
    s2 = rng.exponential(1.0, n)
    sn2 = rng.exponential(1.0, n) + 1e-6
    got_nv = z_normvae(x, mu, s2, sn2)
    got_bl = z_baseline(x, mu, sn2)
    ref_nv = np.array([(a - b) / math.sqrt(c + d) for a, b, c, d in zip(x, mu, s2, sn2)])
    ref_bl = np.array([(a - b) / math.sqrt(d) for a, b, d in zip(x, mu, sn2)])
    assert ulps_apart(got_nv, ref_nv).max() <= 1
    assert ulps_apart(got_bl, ref_bl).max() <= 1


# --------------------------------------------------------------------------- 5

@pytest.mark.slow
@pytest.mark.criterion(5, "held-out controls are calibrated at q=0.05")
def test_control_calibration(default_run):
    d, elapsed = default_run
    _, extra = load_model(d / "model.ndev")
    held = set(extra["holdout_ids"])
    assert len(held) == 53
    nams, header = load_nams(d / "nams.csv")
    assert float(header["q"]) == 0.05
    fractions = [n.significant.mean() for n in nams if n.method == NORMVAE and n.subject in held]
    assert len(fractions) == len(held)
    assert np.mean(fractions) <= 0.08
    assert elapsed < 15 * 60


# --------------------------------------------------------------------------- 6

@pytest.mark.slow
@pytest.mark.criterion(6, "stage means rise with severity; null cohort has no significant slope")
def test_stage_monotonicity(default_run, null_run):
    report = report_of(default_run[0])
    means = [report["panel_a_stage_means"][s] for s in STAGES]
    assert all(b > a for a, b in zip(means, means[1:])), means
    fit = report["slope"][NORMVAE]
    assert fit["slope"] > 0 and abs(fit["slope"]) > 2 * fit["stderr"]

    null_fit = report_of(null_run)["slope"][NORMVAE]
    assert not abs(null_fit["slope"]) > 2 * null_fit["stderr"]


# --------------------------------------------------------------------------- 7

@pytest.mark.slow
@pytest.mark.criterion(7, "comparison report complete; correlation and recall bounds hold")
def test_comparison_report(default_run, capsys):
    report = report_of(default_run[0])
    assert report["methods"] == [BASELINE, NORMVAE]
    assert report["panel_a_stage_means"] and report["panel_b_stage_means"]
    for key in ("slope", "panel_e_subject_counts", "panel_d_region_freq", "panel_c_correlation"):
        assert set(report[key]) == {BASELINE, NORMVAE}
    assert len(report["panel_d_region_freq"][NORMVAE]) == 120
    assert len(report["panel_e_subject_counts"][NORMVAE]) == 1131 - 216

    corr = report["panel_c_correlation"]
    assert corr[NORMVAE] >= corr[BASELINE] - 0.05
    assert report["top_stage_recall"][NORMVAE] >= 0.5
    with capsys.disabled():
        print("\ndirection of probabilistic vs baseline claims (reported only):",
              report["comparison"])


# --------------------------------------------------------------------------- 8

@pytest.mark.slow
@pytest.mark.criterion(8, "pipeline outputs are byte-identical across equal-seed runs")
def test_determinism(default_run, tmp_path_factory):
    again = tmp_path_factory.mktemp("default_again")
    run_pipeline(again)
    for name in PIPELINE_OUTPUTS:
        a = hashlib.sha256((default_run[0] / name).read_bytes()).hexdigest()
        b = hashlib.sha256((again / name).read_bytes()).hexdigest()
        assert a == b, name


@pytest.mark.slow
def test_default_training_curve(default_run):
    curve = np.loadtxt(default_run[0] / "model.loss.csv", delimiter=",", skiprows=2)
    total = curve[:, 3]
    assert total.size == 500
    assert total[-1] < 0.5 * total[0]
    # no 50-epoch window may drift upward by more than 5%
    assert np.all(total[50:] <= 1.05 * total[:-50])


# --------------------------------------------------------------------------- 9

@pytest.mark.criterion(9, "Pegasos separates the toy set; huge lambda shrinks w")
def test_svm_sanity():
    X = np.array([[-1.0, 0.0], [1.0, 0.0]] * 50)
    y = np.array([-1, 1] * 50)
    clf = PegasosSVC(lam=1e-3, epochs=20, random_state=0).fit(X, y)
    assert np.mean(clf.predict(X) == y) == 1.0
    assert clf.coef_[0] > 0
    heavy = PegasosSVC(lam=1e6, epochs=20, random_state=0).fit(X, y)
    assert np.linalg.norm(heavy.coef_) < 1e-2


# --------------------------------------------------------------------------- 10

@pytest.mark.criterion(10, "model file round-trip keeps mc_predict bitwise")
def test_serialization_round_trip():
    cohort, _ = synth_generate(SynthConfig(seed=SYNTH_SEED))
    train, held = split_controls(cohort.controls(), 0.2, seed=TRAIN_SEED)
    est = NormVAE(epochs=2, random_state=TRAIN_SEED)
    est.fit(train.normalized(), age=train.age, X_holdout=held.normalized(),
            age_holdout=held.age, holdout_ids=held.ids)
    back, _ = model_from_bytes(model_to_bytes(est))
    Xs = est.scaler_.transform(cohort.normalized()[:5])
    ages = est.scaler_.transform_age(cohort.age[:5])
    for i in range(5):
        a = mc_predict(est.model_, Xs[i], ages[i], 100, RngStream(3).substream(i))
        b = mc_predict(back.model_, Xs[i], ages[i], 100, RngStream(3).substream(i))
        assert a.mean.tobytes() == b.mean.tobytes()
        assert a.var.tobytes() == b.var.tobytes()
